//! Inference: start from Gaussian blocks, denoise them along the sampling
//! plan, drop low-confidence blocks and decode the rest into triples.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{pbes_decode, Triple, TripleSet};
use crate::diffusion::{
    ddim_step, filter_blocks, gaussian, reconstruct_z0, tensor_to_blocks, NoiseSchedule, Reconstruction, SamplingPlan,
};
use crate::error::{Error, Result};
use crate::network::{forward, ModelParams};
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    /// Initial noisy blocks per sentence (`D`).
    pub blocks: usize,
    /// Denoising iterations.
    pub sigma: usize,
    /// Confidence threshold on the summed head maxima.
    pub phi: f64,
    pub batch: usize,
    pub seed: u64,
    /// Reject over-long sentences instead of truncating them.
    pub strict: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { blocks: 30, sigma: 10, phi: 4.0, batch: 8, seed: 0, strict: false }
    }
}

impl InferConfig {
    pub fn plan(&self, timesteps: usize) -> Result<SamplingPlan> {
        SamplingPlan::new(timesteps, self.sigma, self.blocks, self.phi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePrediction {
    pub triples: TripleSet,
    pub kept_blocks: usize,
    pub discarded_blocks: usize,
}

/// Denoises `plan.blocks()` Gaussian blocks for one sentence.
pub fn infer_sentence(
    tokens: &[usize],
    params: &ModelParams,
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<SentencePrediction> {
    let scale = params.config().scale(tokens.len())?;
    let mut z = gaussian(plan.blocks(), 5, rng);
    let steps = plan.steps();
    for (k, &(t_cur, t_prev)) in steps.iter().enumerate() {
        let probs = forward(params, tokens, &tensor_to_blocks(&z), t_cur)?;
        if k + 1 == steps.len() {
            let z0 = reconstruct_z0(&probs, &scale, Reconstruction::Argmax);
            let keep = filter_blocks(&probs, plan.phi());
            let blocks: Vec<_> = tensor_to_blocks(&z0).into_iter().zip(&keep).filter(|(_, k)| **k).map(|(b, _)| b).collect();
            let kept = blocks.len();
            return Ok(SentencePrediction {
                triples: pbes_decode(&blocks, &scale),
                kept_blocks: kept,
                discarded_blocks: plan.blocks() - kept,
            });
        }
        let z0 = reconstruct_z0(&probs, &scale, Reconstruction::Expectation);
        z = ddim_step(&z, &z0, t_cur, t_prev, schedule)?;
    }
    unreachable!("a sampling plan has at least one step")
}

/// Prepares token ids for inference, truncating to the model limit unless
/// `strict`.
pub fn fit_length(tokens: &[usize], max_len: usize, strict: bool, id: usize) -> Result<Vec<usize>> {
    if tokens.is_empty() {
        return Err(Error::invalid("sentence", format!("sentence {id} is empty")));
    }
    if tokens.len() <= max_len {
        return Ok(tokens.to_vec());
    }
    if strict {
        return Err(Error::invalid(
            "sentence",
            format!("sentence {id} has {} tokens, limit {max_len}", tokens.len()),
        ));
    }
    log::warn!("sentence {id} truncated from {} to {max_len} tokens", tokens.len());
    Ok(tokens[..max_len].to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub batch: usize,
    pub sentences: usize,
    pub total_ms: f64,
    pub ms_per_sentence: f64,
}

/// Predicts every sentence, `cfg.batch` sentences at a time. Sentence `i`
/// draws its initial noise from stream `i + 1` of `cfg.seed`, so results do
/// not depend on batching or thread count.
pub fn infer_corpus(
    sentences: &[Vec<usize>],
    params: &ModelParams,
    cfg: &InferConfig,
    schedule: &NoiseSchedule,
) -> Result<(Vec<SentencePrediction>, Timing)> {
    let plan = cfg.plan(schedule.steps())?;
    let batch = cfg.batch.max(1);
    let max_len = params.config().max_len;
    let start = Instant::now();
    let mut out = Vec::with_capacity(sentences.len());
    for (c, chunk) in sentences.chunks(batch).enumerate() {
        let preds: Vec<Result<SentencePrediction>> = chunk
            .par_iter()
            .enumerate()
            .map(|(k, tokens)| {
                let id = c * batch + k;
                let tokens = fit_length(tokens, max_len, cfg.strict, id)?;
                let mut rng = Rng::stream(cfg.seed, id as u64 + 1);
                infer_sentence(&tokens, params, &plan, schedule, &mut rng)
            })
            .collect();
        for p in preds {
            out.push(p?);
        }
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    let n = sentences.len();
    let timing = Timing {
        batch,
        sentences: n,
        total_ms: if n == 0 { 0.0 } else { total_ms },
        ms_per_sentence: if n == 0 { 0.0 } else { total_ms / n as f64 },
    };
    Ok((out, timing))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sentence_id: usize,
    /// `[head_start, head_end, relation_id, tail_start, tail_end]`.
    pub triples: Vec<[usize; 5]>,
    pub kept_blocks: usize,
    pub discarded_blocks: usize,
}

pub fn write_predictions(path: &Path, preds: &[SentencePrediction]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (i, p) in preds.iter().enumerate() {
        let rec = PredictionRecord {
            sentence_id: i,
            triples: p.triples.iter().map(Triple::to_record).collect(),
            kept_blocks: p.kept_blocks,
            discarded_blocks: p.discarded_blocks,
        };
        let line = serde_json::to_string(&rec).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a predictions file back as one triple set per sentence, ordered by
/// `sentence_id`, which must run `0..n` without gaps.
pub fn read_predictions(path: &Path) -> Result<Vec<TripleSet>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut recs = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        for r in &rec.triples {
            if r[0] > r[1] || r[3] > r[4] {
                return Err(Error::Parse { path: path.to_path_buf(), line: n + 1, msg: format!("inverted span in {r:?}") });
            }
        }
        recs.push(rec);
    }
    recs.sort_by_key(|r| r.sentence_id);
    for (i, r) in recs.iter().enumerate() {
        if r.sentence_id != i {
            return Err(Error::invalid("predictions", format!("sentence ids are not 0..{}", recs.len())));
        }
    }
    Ok(recs.into_iter().map(|r| r.triples.into_iter().map(Triple::from_record).collect()).collect())
}
