//! The denoiser: given a sentence, a set of noisy blocks and a timestep it
//! predicts, for every block, categorical distributions over the positions
//! of its four edges and over relation types for its level.
//!
//! Pipeline per sentence:
//!
//! 1. token + position embeddings, then a bidirectional tanh recurrent layer
//!    give the sentence representation `R_H` (`L x d`);
//! 2. each block mean-pools `R_H` over its head and tail spans (`R_E`) and
//!    looks up its relation row (`R_V`);
//! 3. two parallel co-attention branches fuse `R_E` / `R_V` with `R_H` and a
//!    sinusoidal timestep embedding;
//! 4. four biaffine scorers pair every fused block with every position, an
//!    MLP reduces each pair to a logit and a masked softmax over positions
//!    gives the edge distributions;
//! 5. the four biaffine feature maps are max-pooled and attended by the
//!    fused level representation to predict the relation distribution.

use crate::block::{descale_to_indices, Block, ScaleSpec};
use crate::error::{Error, Result};
use crate::probs::BlockProbabilities;
use crate::tensor::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Which axis the four edge feature maps are max-pooled over before they
/// serve as keys and values of the level predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LevelPool {
    /// Elementwise over the four edges; keys stay `h` wide.
    #[default]
    Edges,
    /// Over the hidden width of each edge map; keys are 4 wide.
    Hidden,
}

/// How a continuous level coordinate selects rows of the relation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LevelLookup {
    /// Round and clamp to one row.
    #[default]
    Round,
    /// Linear interpolation between the two neighbouring rows.
    Interpolate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub relations: usize,
    /// Width of token and position embeddings.
    pub embed_dim: usize,
    /// Width `d` of the sentence representation (both directions together).
    pub hidden: usize,
    /// Width `k` of the co-attention middle state.
    pub coatt_dim: usize,
    /// Width `h` of biaffine features and cross-attention.
    pub head_dim: usize,
    pub level_pool: LevelPool,
    pub level_lookup: LevelLookup,
    /// Use one affinity matrix `W_b` for both co-attention branches.
    pub share_affinity: bool,
    /// Multiply the co-attention weights by the block count, so the mean
    /// weight is 1 and block features are not drowned by `E_t` when N is large.
    pub scale_attention: bool,
    /// Half-range of the scaled block coordinates.
    pub lambda: f64,
}

impl ModelConfig {
    pub fn new(vocab: usize, max_len: usize, relations: usize) -> Self {
        Self {
            vocab,
            max_len,
            relations,
            embed_dim: 32,
            hidden: 32,
            coatt_dim: 32,
            head_dim: 32,
            level_pool: LevelPool::Edges,
            level_lookup: LevelLookup::Round,
            share_affinity: false,
            scale_attention: true,
            lambda: 0.02,
        }
    }

    /// Sets `embed_dim`, `hidden`, `coatt_dim` and `head_dim` together.
    pub fn with_width(mut self, width: usize) -> Self {
        self.embed_dim = width;
        self.hidden = width;
        self.coatt_dim = width;
        self.head_dim = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model config", msg));
        if self.vocab == 0 || self.max_len == 0 || self.relations == 0 {
            return bad(format!(
                "vocab, max_len and relations must be positive ({}, {}, {})",
                self.vocab, self.max_len, self.relations
            ));
        }
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return bad(format!("hidden width must be positive and even, got {}", self.hidden));
        }
        if self.embed_dim == 0 || self.coatt_dim == 0 || self.head_dim == 0 {
            return bad("widths must be positive".into());
        }
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        Ok(())
    }

    pub fn scale(&self, length: usize) -> Result<ScaleSpec> {
        ScaleSpec::new(self.lambda, length, self.relations)
    }
}

pub const EDGE_NAMES: [&str; 4] = ["up", "down", "left", "right"];
const BRANCH_NAMES: [&str; 2] = ["edge", "level"];

#[derive(Debug, Clone, Copy)]
struct RnnIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BranchIds {
    w_b: ParamId,
    w_e: ParamId,
    w_h: ParamId,
    w_he: ParamId,
    time_w: ParamId,
    time_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BiaffineIds {
    u1: ParamId,
    u2: ParamId,
    bias: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LevelIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    token: ParamId,
    position: ParamId,
    rnn: [RnnIds; 2],
    relation: ParamId,
    branch: [BranchIds; 2],
    biaffine: [BiaffineIds; 4],
    level: LevelIds,
}

/// All learnable arrays of the denoiser, keyed by name.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    ids: Ids,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect())
}

/// Parameter names and shapes for `config`, in registration order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let (e, d, k, h) = (config.embed_dim, config.hidden, config.coatt_dim, config.head_dim);
    let half = d / 2;
    let mut out = vec![
        ("embed.token".to_string(), [config.vocab, e]),
        ("embed.position".to_string(), [config.max_len, e]),
    ];
    for dir in ["fwd", "bwd"] {
        out.push((format!("rnn.{dir}.w_ih"), [e, half]));
        out.push((format!("rnn.{dir}.w_hh"), [half, half]));
        out.push((format!("rnn.{dir}.bias"), [1, half]));
    }
    out.push(("relation".to_string(), [config.relations, d]));
    for (i, b) in BRANCH_NAMES.iter().enumerate() {
        if i == 0 || !config.share_affinity {
            out.push((format!("coatt.{b}.w_b"), [d, d]));
        }
        out.push((format!("coatt.{b}.w_e"), [k, d]));
        out.push((format!("coatt.{b}.w_h"), [k, d]));
        out.push((format!("coatt.{b}.w_he"), [k, 1]));
        out.push((format!("coatt.{b}.time_w"), [d, d]));
        out.push((format!("coatt.{b}.time_b"), [1, d]));
    }
    for edge in EDGE_NAMES {
        out.push((format!("biaffine.{edge}.u1"), [d, h * d]));
        out.push((format!("biaffine.{edge}.u2"), [2 * d, h]));
        out.push((format!("biaffine.{edge}.bias"), [1, h]));
        out.push((format!("biaffine.{edge}.mlp_w1"), [h, h]));
        out.push((format!("biaffine.{edge}.mlp_b1"), [1, h]));
        out.push((format!("biaffine.{edge}.mlp_w2"), [h, 1]));
    }
    let key_width = match config.level_pool {
        LevelPool::Edges => h,
        LevelPool::Hidden => 4,
    };
    out.push(("level.w_q".to_string(), [d, h]));
    out.push(("level.w_k".to_string(), [key_width, h]));
    out.push(("level.w_v".to_string(), [key_width, h]));
    out.push(("level.mlp_w1".to_string(), [h, h]));
    out.push(("level.mlp_b1".to_string(), [1, h]));
    out.push(("level.mlp_w2".to_string(), [h, config.relations]));
    out.push(("level.mlp_b2".to_string(), [1, config.relations]));
    out
}

fn init_std(name: &str, shape: [usize; 2], config: &ModelConfig) -> f64 {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if name.starts_with("embed.") || name == "relation" {
        1.0
    } else if leaf.contains("bias") || leaf.starts_with("mlp_b") || leaf == "time_b" {
        0.0
    } else if leaf == "u1" {
        1.0 / config.hidden as f64
    } else if leaf == "w_hh" {
        0.5 / (shape[0] as f64).sqrt()
    } else if leaf == "w_e" || leaf == "w_h" {
        1.0 / (shape[1] as f64).sqrt()
    } else {
        1.0 / (shape[0] as f64).sqrt()
    }
}

impl ModelParams {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape) in parameter_layout(&config) {
            let std = init_std(&name, shape, &config);
            store.add(name, normal(shape[0], shape[1], std, rng))?;
        }
        Self::from_store(config, store)
    }

    /// Wraps an existing store, checking that every expected array is present
    /// with the right shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if store.len() != layout.len() {
            return Err(Error::invalid(
                "parameters",
                format!("expected {} arrays, found {}", layout.len(), store.len()),
            ));
        }
        for (name, shape) in &layout {
            let id = store
                .id(name)
                .ok_or_else(|| Error::invalid("parameters", format!("missing {name}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::invalid(
                    "parameters",
                    format!("{name} has shape {:?}, expected {shape:?}", store.get(id).shape()),
                ));
            }
        }
        let id = |n: &str| store.id(n).expect("validated above");
        let rnn = ["fwd", "bwd"].map(|dir| RnnIds {
            w_ih: id(&format!("rnn.{dir}.w_ih")),
            w_hh: id(&format!("rnn.{dir}.w_hh")),
            bias: id(&format!("rnn.{dir}.bias")),
        });
        let branch = BRANCH_NAMES.map(|b| BranchIds {
            w_b: if config.share_affinity {
                id("coatt.edge.w_b")
            } else {
                id(&format!("coatt.{b}.w_b"))
            },
            w_e: id(&format!("coatt.{b}.w_e")),
            w_h: id(&format!("coatt.{b}.w_h")),
            w_he: id(&format!("coatt.{b}.w_he")),
            time_w: id(&format!("coatt.{b}.time_w")),
            time_b: id(&format!("coatt.{b}.time_b")),
        });
        let biaffine = EDGE_NAMES.map(|e| BiaffineIds {
            u1: id(&format!("biaffine.{e}.u1")),
            u2: id(&format!("biaffine.{e}.u2")),
            bias: id(&format!("biaffine.{e}.bias")),
            mlp_w1: id(&format!("biaffine.{e}.mlp_w1")),
            mlp_b1: id(&format!("biaffine.{e}.mlp_b1")),
            mlp_w2: id(&format!("biaffine.{e}.mlp_w2")),
        });
        let level = LevelIds {
            w_q: id("level.w_q"),
            w_k: id("level.w_k"),
            w_v: id("level.w_v"),
            mlp_w1: id("level.mlp_w1"),
            mlp_b1: id("level.mlp_b1"),
            mlp_w2: id("level.mlp_w2"),
            mlp_b2: id("level.mlp_b2"),
        };
        let ids = Ids {
            token: id("embed.token"),
            position: id("embed.position"),
            rnn,
            relation: id("relation"),
            branch,
            biaffine,
            level,
        };
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn relation_matrix(&self) -> ParamId {
        self.ids.relation
    }

    pub fn affinity(&self, branch: usize) -> ParamId {
        self.ids.branch[branch].w_b
    }
}

/// Token ids of several sentences padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceBatch {
    ids: Vec<Vec<usize>>,
    lengths: Vec<usize>,
    width: usize,
}

/// Reserved vocabulary entries.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

impl SentenceBatch {
    pub fn new(sentences: &[Vec<usize>], config: &ModelConfig) -> Result<Self> {
        let width = sentences.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sentences.len());
        for (i, s) in sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid("sentence batch", format!("sentence {i} is empty")));
            }
            if s.len() > config.max_len {
                return Err(Error::invalid(
                    "sentence batch",
                    format!("sentence {i} has {} tokens, limit {}", s.len(), config.max_len),
                ));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= config.vocab) {
                return Err(Error::invalid(
                    "sentence batch",
                    format!("token id {bad} in sentence {i} exceeds vocabulary {}", config.vocab),
                ));
            }
            let mut row = s.clone();
            row.resize(width, PAD_ID);
            ids.push(row);
        }
        Ok(Self {
            ids,
            lengths: sentences.iter().map(Vec::len).collect(),
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn length(&self, i: usize) -> usize {
        self.lengths[i]
    }

    /// Unpadded token ids of sentence `i`.
    pub fn tokens(&self, i: usize) -> &[usize] {
        &self.ids[i][..self.lengths[i]]
    }

    pub fn mask(&self, i: usize) -> Vec<bool> {
        (0..self.width).map(|j| j < self.lengths[i]).collect()
    }
}

/// Interleaved sine/cosine embedding of timestep `t`, `1 x dim`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let mut out = vec![0.0; dim];
    for i in 0..dim.div_ceil(2) {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        if 2 * i + 1 < dim {
            out[2 * i + 1] = arg.cos();
        }
    }
    Tensor::matrix(1, dim, out)
}

fn rnn_direction(g: &mut Graph<'_>, x: Var, ids: RnnIds, reverse: bool) -> Var {
    let len = g.value(x).rows();
    let w_ih = g.param(ids.w_ih);
    let w_hh = g.param(ids.w_hh);
    let bias = g.param(ids.bias);
    let xw = g.matmul(x, w_ih);
    let xw = g.add_row(xw, bias);
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    let mut states = vec![None; len];
    let mut prev: Option<Var> = None;
    for t in order {
        let xt = g.slice_rows(xw, t, t + 1);
        let pre = match prev {
            Some(h) => {
                let rec = g.matmul(h, w_hh);
                g.add(xt, rec)
            }
            None => xt,
        };
        let h = g.tanh(pre);
        states[t] = Some(h);
        prev = Some(h);
    }
    g.concat_rows(states.into_iter().map(|s| s.expect("every position visited")).collect())
}

/// Contextual sentence representation `R_H`, `len x d`.
pub fn encode_sentence(g: &mut Graph<'_>, params: &ModelParams, tokens: &[usize]) -> Var {
    assert!(!tokens.is_empty(), "encode_sentence on an empty sentence");
    let ids = &params.ids;
    let tok = g.param(ids.token);
    let pos = g.param(ids.position);
    let xt = g.gather_rows(tok, tokens.to_vec());
    let xp = g.gather_rows(pos, (0..tokens.len()).collect());
    let x = g.add(xt, xp);
    let fwd = rnn_direction(g, x, ids.rnn[0], false);
    let bwd = rnn_direction(g, x, ids.rnn[1], true);
    g.concat_cols(vec![fwd, bwd])
}

/// Positions pooled for a block: the union of its head and tail spans.
pub fn block_positions(block: &Block, scale: &ScaleSpec) -> Vec<usize> {
    let ix = descale_to_indices(block, scale);
    let (head, tail) = (ix.head(), ix.tail());
    let mut pos: Vec<usize> = head.positions().chain(tail.positions()).collect();
    pos.sort_unstable();
    pos.dedup();
    pos
}

/// Edge representation `R_E`: mean of `R_H` over each block's spans.
pub fn edge_repr(g: &mut Graph<'_>, r_h: Var, blocks: &[Block], scale: &ScaleSpec) -> Var {
    let sets = blocks.iter().map(|b| block_positions(b, scale)).collect();
    g.mean_rows(r_h, sets)
}

/// Level representation `R_V`: rows of the relation matrix selected by
/// each block's level coordinate.
pub fn level_repr(g: &mut Graph<'_>, params: &ModelParams, blocks: &[Block], scale: &ScaleSpec) -> Var {
    let rel = g.param(params.ids.relation);
    match params.config.level_lookup {
        LevelLookup::Round => {
            let idx = blocks.iter().map(|b| descale_to_indices(b, scale).level).collect();
            g.gather_rows(rel, idx)
        }
        LevelLookup::Interpolate => {
            let k = scale.relations();
            let top = (k - 1) as f64;
            let pos: Vec<f64> = blocks
                .iter()
                .map(|b| ((b.level + scale.lambda()) / (2.0 * scale.lambda()) * top).clamp(0.0, top))
                .collect();
            let lo: Vec<usize> = pos.iter().map(|p| p.floor() as usize).collect();
            let hi: Vec<usize> = lo.iter().map(|&l| (l + 1).min(k - 1)).collect();
            let frac: Vec<f64> = pos.iter().zip(&lo).map(|(p, &l)| p - l as f64).collect();
            let a = g.gather_rows(rel, lo);
            let b = g.gather_rows(rel, hi);
            let wa = g.constant(Tensor::matrix(blocks.len(), 1, frac.iter().map(|f| 1.0 - f).collect()));
            let wb = g.constant(Tensor::matrix(blocks.len(), 1, frac));
            let a = g.row_scale(a, wa);
            let b = g.row_scale(b, wb);
            g.add(a, b)
        }
    }
}

/// Timestep embedding projected to width `d` for co-attention branch
/// `branch` (0 edges, 1 level).
pub fn time_embedding(g: &mut Graph<'_>, params: &ModelParams, t: usize, branch: usize) -> Var {
    let ids = params.ids.branch[branch];
    let sin = g.constant(timestep_embedding(t, params.config.hidden));
    let w = g.param(ids.time_w);
    let b = g.param(ids.time_b);
    let proj = g.matmul(sin, w);
    g.add(proj, b)
}

/// Parallel co-attention between `R_H` (`L x d`) and the block
/// representation `R_X` (`N x d`):
///
/// ```text
/// C   = tanh(R_H W_b R_X^T)                      L x N
/// H   = tanh(R_X W_e^T + C^T (R_H W_h^T))        N x k
/// a   = softmax over blocks of H w_he            N
/// out = a_i * R_X[i] + E_t                       N x d
/// ```
///
/// With `scale_attention`, `a` is multiplied by N.
pub fn co_attention(g: &mut Graph<'_>, params: &ModelParams, r_h: Var, r_x: Var, t_embed: Var, branch: usize) -> Var {
    let ids = params.ids.branch[branch];
    let w_b = g.param(ids.w_b);
    let w_e = g.param(ids.w_e);
    let w_h = g.param(ids.w_h);
    let w_he = g.param(ids.w_he);
    let hb = g.matmul(r_h, w_b);
    let c = g.matmul_t(hb, false, r_x, true);
    let c = g.tanh(c);
    let xe = g.matmul_t(r_x, false, w_e, true);
    let hh = g.matmul_t(r_h, false, w_h, true);
    let ch = g.matmul_t(c, true, hh, false);
    let pre = g.add(xe, ch);
    let state = g.tanh(pre);
    let score = g.matmul(state, w_he);
    let score = g.transpose(score);
    let weights = g.softmax_rows(score, None);
    let mut weights = g.transpose(weights);
    if params.config.scale_attention {
        let n = g.value(weights).rows() as f64;
        weights = g.scale(weights, n);
    }
    let scaled = g.row_scale(r_x, weights);
    g.add_row(scaled, t_embed)
}

/// Biaffine features of one edge, `(N * L) x h`, row `n * L + l` holding
/// `E[n]^T U_1 R_H[l] + U_2 (R_H[l] ++ E[n]) + b`.
pub fn biaffine_features(g: &mut Graph<'_>, params: &ModelParams, r_h: Var, fused: Var, edge: usize) -> Var {
    let ids = params.ids.biaffine[edge];
    let d = params.config.hidden;
    let h = params.config.head_dim;
    let u1 = g.param(ids.u1);
    let u2 = g.param(ids.u2);
    let bias = g.param(ids.bias);
    let eu = g.matmul(fused, u1);
    let bilinear = g.contract(eu, r_h, h);
    let u2_sent = g.slice_rows(u2, 0, d);
    let u2_block = g.slice_rows(u2, d, 2 * d);
    let lin_sent = g.matmul(r_h, u2_sent);
    let lin_block = g.matmul(fused, u2_block);
    let linear = g.pair_sum(lin_block, lin_sent);
    let sum = g.add(bilinear, linear);
    g.add_row(sum, bias)
}

/// Edge distributions `[P^u, P^d, P^l, P^r]` (`N x L` each) and the biaffine
/// feature maps they were computed from.
pub fn biaffine_edges(g: &mut Graph<'_>, params: &ModelParams, r_h: Var, fused: Var, mask: &[bool]) -> ([Var; 4], [Var; 4]) {
    let n = g.value(fused).rows();
    let l = g.value(r_h).rows();
    let mut probs = Vec::with_capacity(4);
    let mut feats = Vec::with_capacity(4);
    for edge in 0..4 {
        let ids = params.ids.biaffine[edge];
        let feat = biaffine_features(g, params, r_h, fused, edge);
        let w1 = g.param(ids.mlp_w1);
        let b1 = g.param(ids.mlp_b1);
        let w2 = g.param(ids.mlp_w2);
        let hid = g.matmul(feat, w1);
        let hid = g.add_row(hid, b1);
        let hid = g.tanh(hid);
        let logit = g.matmul(hid, w2);
        let logit = g.reshape(logit, n, l);
        probs.push(g.softmax_rows(logit, Some(mask)));
        feats.push(feat);
    }
    (
        probs.try_into().expect("four edges"),
        feats.try_into().expect("four edges"),
    )
}

/// Single-head attention of each block's query over its own `L` key/value
/// rows. `query` is `N x h`, `keys` and `values` are `(N * L) x h`.
pub fn cross_attention(g: &mut Graph<'_>, query: Var, keys: Var, values: Var, mask: &[bool]) -> Var {
    let h = g.value(query).cols();
    let scores = g.group_dot(query, keys);
    let scores = g.scale(scores, 1.0 / (h as f64).sqrt());
    let weights = g.softmax_rows(scores, Some(mask));
    g.group_mix(weights, values)
}

/// Relation distribution `P^v`, `N x K`.
pub fn level_head(g: &mut Graph<'_>, params: &ModelParams, edge_feats: &[Var; 4], fused_level: Var, mask: &[bool]) -> Var {
    let ids = params.ids.level;
    let pooled = match params.config.level_pool {
        LevelPool::Edges => g.max_of(edge_feats.to_vec()),
        LevelPool::Hidden => {
            let cols: Vec<Var> = edge_feats.iter().map(|&f| g.row_max(f)).collect();
            g.concat_cols(cols)
        }
    };
    let w_q = g.param(ids.w_q);
    let w_k = g.param(ids.w_k);
    let w_v = g.param(ids.w_v);
    let query = g.matmul(fused_level, w_q);
    let keys = g.matmul(pooled, w_k);
    let values = g.matmul(pooled, w_v);
    let attended = cross_attention(g, query, keys, values, mask);
    let latent = g.add(attended, query);
    let w1 = g.param(ids.mlp_w1);
    let b1 = g.param(ids.mlp_b1);
    let w2 = g.param(ids.mlp_w2);
    let b2 = g.param(ids.mlp_b2);
    let hid = g.matmul(latent, w1);
    let hid = g.add_row(hid, b1);
    let hid = g.tanh(hid);
    let logit = g.matmul(hid, w2);
    let logit = g.add_row(logit, b2);
    g.softmax_rows(logit, None)
}

/// Graph handles of the five heads.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub edges: [Var; 4],
    pub level: Var,
}

impl HeadVars {
    pub fn read(&self, g: &Graph<'_>) -> BlockProbabilities {
        BlockProbabilities {
            edges: self.edges.map(|v| g.value(v).clone()),
            level: g.value(self.level).clone(),
        }
    }
}

/// Records the full denoiser on `g`. `tokens` is the unpadded sentence,
/// `pad_to >= tokens.len()` the width of the position axis, `blocks` the
/// noisy blocks (`N x 5`) and `t` their timestep.
pub fn forward_graph(
    g: &mut Graph<'_>,
    params: &ModelParams,
    tokens: &[usize],
    pad_to: usize,
    blocks: &[Block],
    t: usize,
) -> Result<HeadVars> {
    let len = tokens.len();
    if len == 0 || len > params.config.max_len {
        return Err(Error::invalid(
            "sentence",
            format!("length {len} outside 1..={}", params.config.max_len),
        ));
    }
    if pad_to < len {
        return Err(Error::invalid("sentence", format!("pad width {pad_to} below length {len}")));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id >= params.config.vocab) {
        return Err(Error::invalid("sentence", format!("token id {bad} outside vocabulary")));
    }
    if blocks.is_empty() {
        return Err(Error::invalid("blocks", "at least one block is required"));
    }
    let scale = params.config.scale(len)?;
    let mut r_h = encode_sentence(g, params, tokens);
    if pad_to > len {
        let zeros = g.constant(Tensor::zeros(&[pad_to - len, params.config.hidden]));
        r_h = g.concat_rows(vec![r_h, zeros]);
    }
    let mask: Vec<bool> = (0..pad_to).map(|j| j < len).collect();
    let r_e = edge_repr(g, r_h, blocks, &scale);
    let r_v = level_repr(g, params, blocks, &scale);
    let te = time_embedding(g, params, t, 0);
    let tv = time_embedding(g, params, t, 1);
    let fused_e = co_attention(g, params, r_h, r_e, te, 0);
    let fused_v = co_attention(g, params, r_h, r_v, tv, 1);
    let (edges, feats) = biaffine_edges(g, params, r_h, fused_e, &mask);
    let level = level_head(g, params, &feats, fused_v, &mask);
    Ok(HeadVars { edges, level })
}

/// Evaluates the denoiser for one unpadded sentence.
pub fn forward(params: &ModelParams, tokens: &[usize], blocks: &[Block], t: usize) -> Result<BlockProbabilities> {
    let mut g = Graph::new(params.store());
    let heads = forward_graph(&mut g, params, tokens, tokens.len(), blocks, t)?;
    Ok(heads.read(&g))
}

/// Evaluates every sentence of a padded batch; `blocks[i]` and `t[i]` belong
/// to sentence `i`. Position axes are `batch.width()` wide.
pub fn forward_batch(params: &ModelParams, batch: &SentenceBatch, blocks: &[Vec<Block>], t: &[usize]) -> Result<Vec<BlockProbabilities>> {
    if blocks.len() != batch.len() || t.len() != batch.len() {
        return Err(Error::invalid("batch", "blocks and timesteps must match the batch size"));
    }
    (0..batch.len())
        .map(|i| {
            let mut g = Graph::new(params.store());
            let heads = forward_graph(&mut g, params, batch.tokens(i), batch.width(), &blocks[i], t[i])?;
            Ok(heads.read(&g))
        })
        .collect()
}
