//! Sweeps over the inference block count and the number of denoising
//! iterations.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::block::TripleSet;
use crate::data::SooRule;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MatchMode};
use crate::infer::{infer_corpus, InferConfig};
use crate::network::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    #[serde(rename = "D")]
    pub blocks: usize,
    pub sigma: usize,
    pub f1: f64,
    pub ms_per_sentence: f64,
}

/// Runs inference for every `(D, sigma)` pair. F1 comes from the first run;
/// the reported time is the fastest of `repeats` runs.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    sentences: &[Vec<usize>],
    gold: &[TripleSet],
    params: &ModelParams,
    schedule: &NoiseSchedule,
    base: &InferConfig,
    block_grid: &[usize],
    sigma_grid: &[usize],
    repeats: usize,
) -> Result<Vec<AblationRow>> {
    if repeats == 0 {
        return Err(Error::invalid("ablation", "repeats must be positive"));
    }
    let mut rows = Vec::new();
    for &sigma in sigma_grid {
        for &blocks in block_grid {
            let cfg = InferConfig { blocks, sigma, ..base.clone() };
            let mut best = f64::INFINITY;
            let mut f1 = 0.0;
            for r in 0..repeats {
                let (preds, timing) = infer_corpus(sentences, params, &cfg, schedule)?;
                best = best.min(timing.ms_per_sentence);
                if r == 0 {
                    let sets: Vec<TripleSet> = preds.into_iter().map(|p| p.triples).collect();
                    f1 = evaluate(&sets, gold, MatchMode::Exact, SooRule::Overlap)?.overall.f1;
                }
            }
            log::info!("D={blocks} sigma={sigma} f1={f1:.4} ms/sentence={best:.2}");
            rows.push(AblationRow { blocks, sigma, f1, ms_per_sentence: best });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("D,sigma,f1,ms_per_sentence\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.4}\n", r.blocks, r.sigma, r.f1, r.ms_per_sentence));
    }
    out
}

pub fn write_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_csv(rows).as_bytes()).map_err(|e| Error::io(path, e))
}
