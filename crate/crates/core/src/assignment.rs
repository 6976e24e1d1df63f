//! Target assignment between predicted blocks and ground-truth blocks.
//!
//! Every ground truth is covered by exactly one prediction through a
//! minimum-cost one-to-one matching (shortest augmenting paths with vertex
//! potentials); the remaining predictions each take their cheapest ground
//! truth so that the likelihood objective is defined over all `N` blocks.

use crate::block::BlockIndices;
use crate::error::{Error, Result};
use crate::probs::BlockProbabilities;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Weights of the head-edge, tail-edge and level terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub head: f64,
    pub tail: f64,
    pub level: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            head: 1.0,
            tail: 1.0,
            level: 1.0,
        }
    }
}

/// `N x M` matrix; entry `(i, j)` is the weighted negative log-likelihood of
/// ground truth `j` under prediction `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    preds: usize,
    targets: usize,
    cost: Vec<f64>,
}

impl CostMatrix {
    pub fn from_fn(preds: usize, targets: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut cost = Vec::with_capacity(preds * targets);
        for i in 0..preds {
            for j in 0..targets {
                cost.push(f(i, j));
            }
        }
        Self { preds, targets, cost }
    }

    pub fn preds(&self) -> usize {
        self.preds
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.targets + j]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            preds: self.preds,
            targets: self.targets,
            cost: self.cost.iter().map(|c| c * factor).collect(),
        }
    }
}

pub fn nll(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

pub fn build_cost(probs: &BlockProbabilities, gt: &[BlockIndices], weights: LossWeights) -> Result<CostMatrix> {
    if gt.is_empty() {
        return Err(Error::invalid("cost matrix", "no ground-truth blocks"));
    }
    let [pu, pd, pl, pr] = &probs.edges;
    let pv = &probs.level;
    Ok(CostMatrix::from_fn(probs.blocks(), gt.len(), |i, j| {
        let g = &gt[j];
        weights.head * (nll(pu.get(i, g.up)) + nll(pd.get(i, g.down)))
            + weights.tail * (nll(pl.get(i, g.left)) + nll(pr.get(i, g.right)))
            + weights.level * nll(pv.get(i, g.level))
    }))
}

/// How predictions beyond the one-to-one core pick their targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtraTargets {
    /// Each extra prediction takes its individually cheapest ground truth.
    #[default]
    Cheapest,
    /// Ground truths are repeated cyclically to `N` and matched one-to-one.
    RepeatTargets,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMap {
    /// Ground-truth index for every prediction.
    pub xi: Vec<usize>,
    /// `core[j]` is the prediction matched one-to-one to ground truth `j`.
    pub core: Vec<usize>,
}

impl AssignmentMap {
    pub fn core_cost(&self, cost: &CostMatrix) -> f64 {
        self.core.iter().enumerate().map(|(j, &i)| cost.get(i, j)).sum()
    }
}

/// Minimum-cost assignment of `rows` to distinct columns (`rows <= cols`);
/// returns the column of each row.
fn hungarian(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based potentials formulation; column 0 is a virtual source.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assigned = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assigned[owner[j] - 1] = j - 1;
        }
    }
    assigned
}

pub fn optimal_assign(cost: &CostMatrix) -> Result<AssignmentMap> {
    optimal_assign_with(cost, ExtraTargets::Cheapest)
}

pub fn optimal_assign_with(cost: &CostMatrix, extra: ExtraTargets) -> Result<AssignmentMap> {
    let (n, m) = (cost.preds, cost.targets);
    if n < m {
        return Err(Error::invalid(
            "assignment",
            format!("{n} predictions cannot cover {m} ground truths"),
        ));
    }
    if m == 0 {
        return Err(Error::invalid("assignment", "no ground-truth blocks"));
    }
    match extra {
        ExtraTargets::Cheapest => {
            let core = hungarian(m, n, |j, i| cost.get(i, j));
            let mut xi: Vec<usize> = (0..n)
                .map(|i| {
                    (0..m).fold(0, |best, j| if cost.get(i, j) < cost.get(i, best) { j } else { best })
                })
                .collect();
            for (j, &i) in core.iter().enumerate() {
                xi[i] = j;
            }
            Ok(AssignmentMap { xi, core })
        }
        ExtraTargets::RepeatTargets => {
            let copies = hungarian(n, n, |c, i| cost.get(i, c % m));
            let mut xi = vec![0; n];
            for (c, &i) in copies.iter().enumerate() {
                xi[i] = c % m;
            }
            Ok(AssignmentMap {
                xi,
                core: copies[..m].to_vec(),
            })
        }
    }
}
