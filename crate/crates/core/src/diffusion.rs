//! Gaussian forward corruption of blocks, the deterministic DDIM-style
//! reverse update, and the glue between categorical network outputs and
//! continuous block coordinates.
//!
//! Block arrays are `N x 5` tensors whose columns are
//! `[up, down, left, right, level]` in scaled space. Timesteps are 1-based;
//! `t = 0` denotes the clean data with `alpha_bar = 1`.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::block::{Block, BlockIndices, ScaleSpec};
use crate::error::{Error, Result};
use crate::probs::{argmax, BlockProbabilities};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid("schedule kind", other.to_string())),
        }
    }
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        }
    }
}

/// Precomputed `beta_t`, `alpha_t = 1 - beta_t` and their running product
/// `alpha_bar_t` for `t = 1..=T` (stored at index `t - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule", "T must be at least 1"));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(Error::invalid(
                        "schedule",
                        format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
                    ));
                }
                if steps == 1 {
                    vec![beta_start]
                } else {
                    (0..steps)
                        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                // Squared-cosine alpha_bar with offset 0.008, betas capped at 0.999.
                let s = 0.008;
                let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * PI / 2.0).cos().powi(2);
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999))
                    .collect()
            }
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("schedule", "every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid("timestep", format!("{t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Reverse-process settings: `sigma` DDIM steps over the arithmetic
/// subsequence `tau` of `1..=T` ending at `T`, `blocks` initial noisy blocks
/// and the confidence threshold `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    tau: Vec<usize>,
    blocks: usize,
    phi: f64,
}

impl SamplingPlan {
    pub fn new(steps: usize, sigma: usize, blocks: usize, phi: f64) -> Result<Self> {
        if sigma == 0 || sigma > steps {
            return Err(Error::invalid("sampling plan", format!("sigma must be in 1..={steps}, got {sigma}")));
        }
        if blocks == 0 {
            return Err(Error::invalid("sampling plan", "D must be at least 1"));
        }
        if !(0.0..=5.0).contains(&phi) {
            return Err(Error::invalid("sampling plan", format!("phi must be in [0, 5], got {phi}")));
        }
        let stride = steps / sigma;
        let tau = (0..sigma).map(|i| steps - (sigma - 1 - i) * stride).collect();
        Ok(Self { tau, blocks, phi })
    }

    /// Like [`SamplingPlan::new`] but without the `phi <= 5` bound, for
    /// deliberately unsatisfiable thresholds.
    pub fn with_phi_unchecked(mut self, phi: f64) -> Self {
        self.phi = phi;
        self
    }

    pub fn sigma(&self) -> usize {
        self.tau.len()
    }

    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// `(t_cur, t_prev)` pairs from `tau[sigma-1]` down to `(tau[0], 0)`.
    pub fn steps(&self) -> Vec<(usize, usize)> {
        (0..self.tau.len())
            .rev()
            .map(|i| (self.tau[i], if i == 0 { 0 } else { self.tau[i - 1] }))
            .collect()
    }
}

pub fn blocks_to_tensor(blocks: &[Block]) -> Tensor {
    Tensor::matrix(blocks.len(), Block::DIM, blocks.iter().flat_map(|b| b.to_array()).collect())
}

pub fn tensor_to_blocks(z: &Tensor) -> Vec<Block> {
    (0..z.rows()).map(|r| Block::from_slice(z.row(r))).collect()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
}

/// `sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps`.
pub fn mix_noise(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::matrix(z0.rows(), z0.cols(), data)
}

/// One-shot sample from `q(z_t | z_0)`.
pub fn forward_noise(z0: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor> {
    schedule.check_t(t)?;
    let eps = gaussian(z0.rows(), z0.cols(), rng);
    Ok(mix_noise(z0, &eps, schedule.alpha_bar(t)))
}

/// Single Markov transition `q(z_t | z_{t-1})`.
pub fn forward_step(z_prev: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor> {
    schedule.check_t(t)?;
    let eps = gaussian(z_prev.rows(), z_prev.cols(), rng);
    Ok(mix_noise(z_prev, &eps, schedule.alpha(t)))
}

/// Ground-truth blocks padded with Gaussian rows and shuffled.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedBlocks {
    /// `N x 5`.
    pub z0: Tensor,
    /// `origin[row]` is the pre-shuffle row: `< gt_count` for ground truth,
    /// otherwise a padding row.
    pub origin: Vec<usize>,
    pub gt_count: usize,
}

impl ExpandedBlocks {
    /// Shuffled row holding ground-truth block `j`.
    pub fn row_of(&self, j: usize) -> Option<usize> {
        self.origin.iter().position(|&o| o == j)
    }
}

pub fn expand_blocks(gt: &[Block], total: usize, pad_std: f64, rng: &mut Rng) -> Result<ExpandedBlocks> {
    if total < gt.len() {
        return Err(Error::invalid(
            "expansion",
            format!("N = {total} is smaller than the {} ground-truth blocks", gt.len()),
        ));
    }
    let mut rows: Vec<[f64; 5]> = gt.iter().map(|b| b.to_array()).collect();
    for _ in gt.len()..total {
        rows.push(std::array::from_fn(|_| pad_std * rng.normal()));
    }
    let mut origin: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut origin);
    let data = origin.iter().flat_map(|&o| rows[o]).collect();
    Ok(ExpandedBlocks {
        z0: Tensor::matrix(total, Block::DIM, data),
        origin,
        gt_count: gt.len(),
    })
}

/// Deterministic reverse update given the clean-sample estimate `z0_hat`,
/// expressed in terms of `alpha_bar` at both ends.
pub fn ddim_update(z_cur: &Tensor, z0_hat: &Tensor, ab_cur: f64, ab_prev: f64) -> Tensor {
    let (sc, nc) = (ab_cur.sqrt(), (1.0 - ab_cur).sqrt());
    let (sp, np) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = z_cur
        .data()
        .iter()
        .zip(z0_hat.data())
        .map(|(&z, &x0)| {
            let eps = (z - sc * x0) / nc;
            sp * x0 + np * eps
        })
        .collect();
    Tensor::matrix(z_cur.rows(), z_cur.cols(), data)
}

pub fn ddim_step(z_cur: &Tensor, z0_hat: &Tensor, t_cur: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t_cur)?;
    if t_prev >= t_cur {
        return Err(Error::invalid("ddim step", format!("t_prev = {t_prev} must be below t_cur = {t_cur}")));
    }
    let ab_cur = schedule.alpha_bar(t_cur);
    if ab_cur >= 1.0 {
        return Err(Error::invalid("ddim step", format!("alpha_bar at t = {t_cur} is 1")));
    }
    if z_cur.shape() != z0_hat.shape() {
        return Err(Error::shape("ddim step", format!("{:?} vs {:?}", z_cur.shape(), z0_hat.shape())));
    }
    Ok(ddim_update(z_cur, z0_hat, ab_cur, schedule.alpha_bar(t_prev)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reconstruction {
    /// Probability-weighted mean of the scaled positions.
    Expectation,
    /// Scaled position of the most probable index.
    Argmax,
}

/// Continuous clean-block estimate from the categorical heads.
pub fn reconstruct_z0(probs: &BlockProbabilities, scale: &ScaleSpec, mode: Reconstruction) -> Tensor {
    let n = probs.blocks();
    let mut out = Tensor::zeros(&[n, Block::DIM]);
    for (c, head) in probs.heads().into_iter().enumerate() {
        let extent = if c < 4 { scale.length() } else { scale.relations() };
        for i in 0..n {
            let row = head.row(i);
            let v = match mode {
                Reconstruction::Expectation => row.iter().enumerate().map(|(j, p)| p * scale.scale_index(j, extent)).sum(),
                Reconstruction::Argmax => scale.scale_index(argmax(row), extent),
            };
            out.set(i, c, v);
        }
    }
    out
}

/// Confidence of each block: the sum over the five heads of the largest
/// probability.
pub fn block_scores(probs: &BlockProbabilities) -> Vec<f64> {
    (0..probs.blocks()).map(|i| probs.maxima(i).iter().sum()).collect()
}

/// Keeps block `i` iff its confidence score reaches `phi`.
pub fn filter_blocks(probs: &BlockProbabilities, phi: f64) -> Vec<bool> {
    block_scores(probs).into_iter().map(|s| s >= phi).collect()
}

/// Variant scoring each block by the probabilities at given indices instead
/// of the per-head maxima.
pub fn filter_blocks_at(probs: &BlockProbabilities, indices: &[BlockIndices], phi: f64) -> Vec<bool> {
    indices
        .iter()
        .enumerate()
        .map(|(i, ix)| {
            let e = ix.edges();
            let score: f64 = (0..4).map(|c| probs.edges[c].get(i, e[c])).sum::<f64>() + probs.level.get(i, ix.level);
            score >= phi
        })
        .collect()
}
