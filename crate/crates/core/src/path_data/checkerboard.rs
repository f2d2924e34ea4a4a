use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sequence, SourceKind, Token, Vocab};
use crate::error::{config, Result};

/// Two-coordinate checkerboard on a `grid x grid` lattice of `block`-wide
/// squares. `x1` is uniform; `x2` is uniform over the blocks whose index
/// parity matches that of `x1`'s block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckerboardSpec {
    pub grid: usize,
    pub block: usize,
}

impl Default for CheckerboardSpec {
    fn default() -> Self {
        Self { grid: 128, block: 32 }
    }
}

impl CheckerboardSpec {
    pub fn new(grid: usize, block: usize) -> Result<Self> {
        if block == 0 || grid % block != 0 || (grid / block) % 2 != 0 {
            return Err(config(format!(
                "block {block} must divide grid {grid} into an even number of blocks"
            )));
        }
        Ok(Self { grid, block })
    }

    pub const SEQ_LEN: usize = 2;

    fn parity(&self, v: Token) -> usize {
        (v as usize / self.block) % 2
    }

    /// The "valid mass" predicate: both coordinates lie in blocks of equal parity.
    pub fn is_valid(&self, x: &[Token]) -> bool {
        x.len() == 2
            && (x[0] as usize) < self.grid
            && (x[1] as usize) < self.grid
            && self.parity(x[0]) == self.parity(x[1])
    }

    pub fn valid_cells(&self) -> usize {
        self.grid * self.grid / 2
    }

    pub fn probability(&self, x: &[Token]) -> f64 {
        if self.is_valid(x) {
            1.0 / self.valid_cells() as f64
        } else {
            0.0
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence {
        let x1 = rng.random_range(0..self.grid) as Token;
        let blocks_per_class = self.grid / self.block / 2;
        let block = 2 * rng.random_range(0..blocks_per_class) + self.parity(x1);
        let x2 = (block * self.block + rng.random_range(0..self.block)) as Token;
        Sequence(vec![x1, x2])
    }

    /// Every valid cell with its probability, in row-major order.
    pub fn support(&self) -> Vec<(Sequence, f64)> {
        let p = 1.0 / self.valid_cells() as f64;
        let mut out = Vec::with_capacity(self.valid_cells());
        for a in 0..self.grid as Token {
            for b in 0..self.grid as Token {
                if self.parity(a) == self.parity(b) {
                    out.push((Sequence(vec![a, b]), p));
                }
            }
        }
        out
    }

    /// Vocabulary for the given source: a mask source appends a mask id.
    pub fn vocab(&self, source: SourceKind) -> Vocab {
        match source {
            SourceKind::Mask => Vocab::with_mask(self.grid),
            SourceKind::Uniform => Vocab::plain(self.grid),
        }
    }
}

/// Checkerboard as a training dataset.
#[derive(Debug, Clone, Copy)]
pub struct CheckerboardData {
    pub spec: CheckerboardSpec,
    pub vocab: Vocab,
}

impl CheckerboardData {
    pub fn new(spec: CheckerboardSpec, source: SourceKind) -> Self {
        Self { spec, vocab: spec.vocab(source) }
    }
}

impl Dataset for CheckerboardData {
    fn seq_len(&self) -> usize {
        CheckerboardSpec::SEQ_LEN
    }

    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence {
        self.spec.sample(rng)
    }
}

/// Two-column CSV (`x1,x2`) of checkerboard samples.
pub fn checkerboard_csv(samples: &[Sequence]) -> String {
    let mut out = String::from("x1,x2\n");
    for s in samples {
        let _ = writeln!(out, "{},{}", s[0], s[1]);
    }
    out
}
