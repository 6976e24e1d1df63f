//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "BLKDIFF\0"
//! version  u32      1
//! hlen     u64      byte length of the header
//! header   hlen     UTF-8 JSON: config echo, step, RNG state, model shape,
//!                   vocabulary, relation names and the parameter table
//!                   [{name, shape: [rows, cols]}, ...]
//! data              every parameter in table order as row-major f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{RelationInventory, Vocab};
use crate::error::{Error, Result};
use crate::network::{LevelLookup, LevelPool, ModelConfig, ModelParams};
use crate::tensor::{ParamStore, RngState, Tensor};

pub const MAGIC: &[u8; 8] = b"BLKDIFF\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    vocab: usize,
    max_len: usize,
    relations: usize,
    embed_dim: usize,
    hidden: usize,
    coatt_dim: usize,
    head_dim: usize,
    level_pool: String,
    level_lookup: String,
    share_affinity: bool,
    scale_attention: bool,
    lambda: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngHeader {
    seed: u64,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: String,
    step: u64,
    rng: RngHeader,
    model: ModelHeader,
    vocab: Vec<String>,
    relations: Vec<String>,
    params: Vec<ParamHeader>,
}

/// Everything stored next to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Flat key/value text of the run configuration.
    pub config_echo: String,
    pub step: u64,
    pub rng: RngState,
    pub vocab: Vocab,
    pub relations: RelationInventory,
}

fn model_header(c: &ModelConfig) -> ModelHeader {
    ModelHeader {
        vocab: c.vocab,
        max_len: c.max_len,
        relations: c.relations,
        embed_dim: c.embed_dim,
        hidden: c.hidden,
        coatt_dim: c.coatt_dim,
        head_dim: c.head_dim,
        level_pool: match c.level_pool {
            LevelPool::Edges => "edges",
            LevelPool::Hidden => "hidden",
        }
        .into(),
        level_lookup: match c.level_lookup {
            LevelLookup::Round => "round",
            LevelLookup::Interpolate => "interpolate",
        }
        .into(),
        share_affinity: c.share_affinity,
        scale_attention: c.scale_attention,
        lambda: c.lambda,
    }
}

fn model_config(h: &ModelHeader, path: &Path) -> Result<ModelConfig> {
    let err = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    Ok(ModelConfig {
        vocab: h.vocab,
        max_len: h.max_len,
        relations: h.relations,
        embed_dim: h.embed_dim,
        hidden: h.hidden,
        coatt_dim: h.coatt_dim,
        head_dim: h.head_dim,
        level_pool: match h.level_pool.as_str() {
            "edges" => LevelPool::Edges,
            "hidden" => LevelPool::Hidden,
            other => return Err(err(format!("unknown level pool {other:?}"))),
        },
        level_lookup: match h.level_lookup.as_str() {
            "round" => LevelLookup::Round,
            "interpolate" => LevelLookup::Interpolate,
            other => return Err(err(format!("unknown level lookup {other:?}"))),
        },
        share_affinity: h.share_affinity,
        scale_attention: h.scale_attention,
        lambda: h.lambda,
    })
}

impl Checkpoint {
    pub fn save(&self, path: &Path, params: &ModelParams) -> Result<()> {
        let header = Header {
            config: self.config_echo.clone(),
            step: self.step,
            rng: RngHeader {
                seed: self.rng.seed,
                stream: self.rng.stream,
                word_pos: self.rng.word_pos.to_string(),
            },
            model: model_header(params.config()),
            vocab: self.vocab.tokens().to_vec(),
            relations: self.relations.names().to_vec(),
            params: params
                .store()
                .iter()
                .map(|(_, name, t)| ParamHeader { name: name.to_string(), shape: [t.rows(), t.cols()] })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(json.len() + 8 * params.store().num_values() + 20);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, _, t) in params.store().iter() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ModelParams)> {
        let err = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| err("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| err(format!("header: {e}")))?;
        let mut data = &bytes[20 + hlen..];
        let mut store = ParamStore::new();
        for p in &header.params {
            let n = p.shape[0] * p.shape[1];
            if data.len() < 8 * n {
                return Err(err(format!("truncated data for {}", p.name)));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            store.add(p.name.clone(), Tensor::matrix(p.shape[0], p.shape[1], values))?;
        }
        if !data.is_empty() {
            return Err(err(format!("{} trailing bytes", data.len())));
        }
        let config = model_config(&header.model, path)?;
        let params = ModelParams::from_store(config, store).map_err(|e| err(e.to_string()))?;
        let word_pos = header.rng.word_pos.parse().map_err(|_| err("bad rng position".into()))?;
        let vocab = Vocab::from_tokens(header.vocab).map_err(|e| err(e.to_string()))?;
        let relations = RelationInventory::new(&header.relations).map_err(|e| err(e.to_string()))?;
        if vocab.len() != params.config().vocab || relations.len() != params.config().relations {
            return Err(err("vocabulary or relation count disagrees with the model".into()));
        }
        Ok((
            Checkpoint {
                config_echo: header.config,
                step: header.step,
                rng: RngState { seed: header.rng.seed, stream: header.rng.stream, word_pos },
                vocab,
                relations,
            },
            params,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn sample() -> (Checkpoint, ModelParams) {
        let vocab = Vocab::from_tokens(["<pad>", "<unk>", "a", "b"].map(String::from).to_vec()).unwrap();
        let mut cfg = ModelConfig::new(4, 8, 2).with_width(4);
        cfg.level_pool = LevelPool::Hidden;
        let params = ModelParams::init(cfg, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(11);
        rng.normal();
        let ck = Checkpoint {
            config_echo: "seed = 11\n".into(),
            step: 42,
            rng: rng.state(),
            vocab,
            relations: RelationInventory::new(&["x", "y"]).unwrap(),
        };
        (ck, params)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (ck, params) = sample();
        ck.save(&path, &params).unwrap();
        let (back, loaded) = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(loaded.config(), params.config());
        for ((_, na, a), (_, nb, b)) in loaded.store().iter().zip(params.store().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
        let mut a = Rng::from_state(back.rng);
        let mut b = Rng::from_state(ck.rng);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (ck, params) = sample();
        ck.save(&path, &params).unwrap();
        let bytes = fs::read(&path).unwrap();
        let cases: Vec<Vec<u8>> = vec![
            b"NOTACKPT0000000000000".to_vec(),
            bytes[..bytes.len() - 3].to_vec(),
            [bytes.clone(), vec![0]].concat(),
            {
                let mut v = bytes.clone();
                v[8] = 9;
                v
            },
        ];
        for bad in cases {
            fs::write(&path, bad).unwrap();
            assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint { .. })));
        }
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
