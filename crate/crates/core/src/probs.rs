use crate::block::BlockIndices;
use crate::tensor::Tensor;

/// Per-block categorical distributions produced by the denoiser: one row
/// per block over token positions for each edge, and over relations for the
/// level.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockProbabilities {
    /// `[up, down, left, right]`, each `N x L`.
    pub edges: [Tensor; 4],
    /// `N x K`.
    pub level: Tensor,
}

impl BlockProbabilities {
    pub fn blocks(&self) -> usize {
        self.level.rows()
    }

    pub fn positions(&self) -> usize {
        self.edges[0].cols()
    }

    pub fn relations(&self) -> usize {
        self.level.cols()
    }

    /// The five distributions of block `i`, edges first.
    pub fn heads(&self) -> [&Tensor; 5] {
        [&self.edges[0], &self.edges[1], &self.edges[2], &self.edges[3], &self.level]
    }

    pub fn argmax(&self, i: usize) -> BlockIndices {
        let am = |t: &Tensor| argmax(t.row(i));
        BlockIndices {
            up: am(&self.edges[0]),
            down: am(&self.edges[1]),
            left: am(&self.edges[2]),
            right: am(&self.edges[3]),
            level: am(&self.level),
        }
    }

    /// Largest probability of each head for block `i`.
    pub fn maxima(&self, i: usize) -> [f64; 5] {
        self.heads().map(|t| t.row(i).iter().copied().fold(0.0, f64::max))
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
