//! Blocks inside the stack of `K` relation tables and the codec between
//! blocks and relational triples.
//!
//! A block covers rows `up..=down` (head entity), columns `left..=right`
//! (tail entity) of the table at depth `level` (relation). For diffusion the
//! five integer coordinates are mapped affinely onto `[-lambda, lambda]`.
//! Decoding projects each edge back to a token boundary and the level to a
//! relation id, independently for every block.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive token range `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn single(at: usize) -> Self {
        Self { start: at, end: at }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: Span,
    pub relation: usize,
    pub tail: Span,
}

impl Triple {
    pub fn new(head: Span, relation: usize, tail: Span) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    /// Integer block coordinates of this triple.
    pub fn indices(&self) -> BlockIndices {
        BlockIndices {
            up: self.head.start,
            down: self.head.end,
            left: self.tail.start,
            right: self.tail.end,
            level: self.relation,
        }
    }

    /// Flat `[head_start, head_end, relation, tail_start, tail_end]`.
    pub fn to_record(&self) -> [usize; 5] {
        [self.head.start, self.head.end, self.relation, self.tail.start, self.tail.end]
    }

    pub fn from_record(r: [usize; 5]) -> Self {
        Self::new(Span::new(r[0], r[1]), r[2], Span::new(r[3], r[4]))
    }

    fn check(&self, length: usize, relations: usize) -> Result<()> {
        let ok_span = |s: &Span| s.start <= s.end && s.end < length;
        if !ok_span(&self.head) || !ok_span(&self.tail) || self.relation >= relations {
            return Err(Error::invalid(
                "triple",
                format!(
                    "({}, {}, {}) outside L={length}, K={relations}",
                    self.head, self.relation, self.tail
                ),
            ));
        }
        Ok(())
    }
}

/// The relational triples of one sentence. Ordered, so iteration and
/// serialization are deterministic.
pub type TripleSet = BTreeSet<Triple>;

/// Five continuous block coordinates in diffusion space.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Block {
    pub up: f64,
    pub down: f64,
    pub left: f64,
    pub right: f64,
    pub level: f64,
}

impl Block {
    pub const DIM: usize = 5;

    pub fn to_array(self) -> [f64; 5] {
        [self.up, self.down, self.left, self.right, self.level]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            up: a[0],
            down: a[1],
            left: a[2],
            right: a[3],
            level: a[4],
        }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::from_array([s[0], s[1], s[2], s[3], s[4]])
    }
}

/// Integer coordinates after descaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockIndices {
    pub up: usize,
    pub down: usize,
    pub left: usize,
    pub right: usize,
    pub level: usize,
}

impl BlockIndices {
    /// Edge coordinates in `[up, down, left, right]` order.
    pub fn edges(&self) -> [usize; 4] {
        [self.up, self.down, self.left, self.right]
    }

    pub fn head(&self) -> Span {
        Span::new(self.up.min(self.down), self.up.max(self.down))
    }

    pub fn tail(&self) -> Span {
        Span::new(self.left.min(self.right), self.left.max(self.right))
    }

    pub fn to_triple(&self) -> Triple {
        Triple::new(self.head(), self.level, self.tail())
    }
}

/// Affine map between integer coordinates and `[-lambda, lambda]` for one
/// sentence of `length` tokens and `relations` relation types.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSpec {
    lambda: f64,
    length: usize,
    relations: usize,
}

impl ScaleSpec {
    pub fn new(lambda: f64, length: usize, relations: usize) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("scale", format!("lambda must be positive, got {lambda}")));
        }
        if length == 0 || relations == 0 {
            return Err(Error::invalid(
                "scale",
                format!("need L >= 1 and K >= 1, got L={length}, K={relations}"),
            ));
        }
        Ok(Self {
            lambda,
            length,
            relations,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn relations(&self) -> usize {
        self.relations
    }

    /// Index `i` on an axis of `extent` positions to a scaled coordinate.
    pub fn scale_index(&self, i: usize, extent: usize) -> f64 {
        let denom = extent.saturating_sub(1).max(1) as f64;
        (i as f64 / denom) * 2.0 * self.lambda - self.lambda
    }

    /// Scaled coordinate back to the nearest index, ties away from zero,
    /// clamped into `[0, extent - 1]`.
    pub fn descale_coord(&self, x: f64, extent: usize) -> usize {
        let top = extent.saturating_sub(1);
        let raw = ((x + self.lambda) / (2.0 * self.lambda) * top as f64).round();
        if raw.is_nan() || raw <= 0.0 {
            0
        } else if raw >= top as f64 {
            top
        } else {
            raw as usize
        }
    }

    pub fn scale_edge(&self, i: usize) -> f64 {
        self.scale_index(i, self.length)
    }

    pub fn scale_level(&self, k: usize) -> f64 {
        self.scale_index(k, self.relations)
    }
}

pub fn encode_block(triple: &Triple, scale: &ScaleSpec) -> Result<Block> {
    triple.check(scale.length, scale.relations)?;
    Ok(Block {
        up: scale.scale_edge(triple.head.start),
        down: scale.scale_edge(triple.head.end),
        left: scale.scale_edge(triple.tail.start),
        right: scale.scale_edge(triple.tail.end),
        level: scale.scale_level(triple.relation),
    })
}

/// One block per triple, in set order.
pub fn encode_blocks(triples: &TripleSet, scale: &ScaleSpec) -> Result<Vec<Block>> {
    triples.iter().map(|t| encode_block(t, scale)).collect()
}

pub fn descale_to_indices(block: &Block, scale: &ScaleSpec) -> BlockIndices {
    let edge = |x| scale.descale_coord(x, scale.length);
    BlockIndices {
        up: edge(block.up),
        down: edge(block.down),
        left: edge(block.left),
        right: edge(block.right),
        level: scale.descale_coord(block.level, scale.relations),
    }
}

/// Parallel boundary emission: every block independently yields the triple
/// whose head spans its up/down edges, whose tail spans its left/right edges
/// and whose relation is its level. Duplicates collapse.
pub fn pbes_decode(blocks: &[Block], scale: &ScaleSpec) -> TripleSet {
    blocks
        .iter()
        .map(|b| descale_to_indices(b, scale).to_triple())
        .collect()
}
