//! Source distributions, the conditional probability path, datasets and the
//! corruption protocol.

mod checkerboard;
mod corpus;

pub use checkerboard::{checkerboard_csv, CheckerboardData, CheckerboardSpec};
pub use corpus::{pack_corpus, CharVocab, PackedCorpus};

use std::ops::{Deref, DerefMut};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Error, Result};
use crate::kinetics::Scheduler;

pub type Token = u32;

/// Token vocabulary, optionally with a reserved `[MASK]` id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub mask_id: Option<Token>,
}

impl Vocab {
    pub fn new(size: usize, mask_id: Option<Token>) -> Result<Self> {
        if size == 0 {
            return Err(config("vocabulary must be non-empty"));
        }
        if let Some(m) = mask_id {
            if m as usize >= size {
                return Err(config(format!("mask id {m} outside vocabulary of size {size}")));
            }
        }
        Ok(Self { size, mask_id })
    }

    /// Vocabulary of `n` ordinary tokens plus a trailing mask id.
    pub fn with_mask(n: usize) -> Self {
        Self { size: n + 1, mask_id: Some(n as Token) }
    }

    pub fn plain(n: usize) -> Self {
        Self { size: n, mask_id: None }
    }

    pub fn is_mask(&self, token: Token) -> bool {
        self.mask_id == Some(token)
    }

    /// Number of tokens a clean sequence may contain.
    pub fn data_size(&self) -> usize {
        self.size - usize::from(self.mask_id.is_some())
    }

    /// The `k`-th non-mask id.
    pub fn data_token(&self, k: usize) -> Token {
        match self.mask_id {
            Some(m) if k as Token >= m => k as Token + 1,
            _ => k as Token,
        }
    }

    pub fn check(&self, seq: &[Token]) -> Result<()> {
        match seq.iter().find(|&&t| t as usize >= self.size) {
            Some(t) => Err(validation(format!("token {t} outside vocabulary of size {}", self.size))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Uniform,
    Mask,
}

/// The source distribution `p0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub kind: SourceKind,
}

impl SourceSpec {
    pub fn uniform() -> Self {
        Self { kind: SourceKind::Uniform }
    }

    pub fn mask() -> Self {
        Self { kind: SourceKind::Mask }
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        match self.kind {
            SourceKind::Mask if vocab.mask_id.is_none() => {
                Err(config("mask source requires a vocabulary with a mask id"))
            }
            SourceKind::Uniform if vocab.data_size() == 0 => {
                Err(config("uniform source needs at least one non-mask token"))
            }
            _ => Ok(()),
        }
    }
}

/// A length-`L` sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Sequence(pub Vec<Token>);

impl Sequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn into_inner(self) -> Vec<Token> {
        self.0
    }
}

impl Deref for Sequence {
    type Target = [Token];
    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl DerefMut for Sequence {
    fn deref_mut(&mut self) -> &mut [Token] {
        &mut self.0
    }
}

impl From<Vec<Token>> for Sequence {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}

/// Anything that can produce clean training sequences `x1 ~ p1`.
pub trait Dataset {
    fn seq_len(&self) -> usize;
    fn vocab(&self) -> Vocab;
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence;
}

pub fn sample_source<R: Rng + ?Sized>(
    spec: SourceSpec,
    vocab: &Vocab,
    len: usize,
    rng: &mut R,
) -> Result<Sequence> {
    spec.check_vocab(vocab)?;
    let tokens = match spec.kind {
        SourceKind::Mask => vec![vocab.mask_id.expect("checked above"); len],
        SourceKind::Uniform => {
            let n = vocab.data_size();
            (0..len).map(|_| vocab.data_token(rng.random_range(0..n))).collect()
        }
    };
    Ok(Sequence(tokens))
}

/// Draws `x_t` from the factorized conditional path: each position takes
/// the `x1` token with probability `k(t)` and the `x0` token otherwise.
pub fn sample_conditional_xt<R: Rng + ?Sized>(
    x0: &[Token],
    x1: &[Token],
    t: f64,
    scheduler: &Scheduler,
    rng: &mut R,
) -> Result<Sequence> {
    if x0.len() != x1.len() {
        return Err(validation(format!(
            "x0 has length {} but x1 has length {}",
            x0.len(),
            x1.len()
        )));
    }
    let (kappa, _) = scheduler.kappa_eval(t)?;
    let tokens = x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| if rng.random::<f64>() < kappa { b } else { a })
        .collect();
    Ok(Sequence(tokens))
}

/// Replaces exactly `round(fraction * L)` distinct positions with a different
/// non-mask token. Returns the corrupted sequence and the changed-position mask.
pub fn corrupt<R: Rng + ?Sized>(
    x: &[Token],
    fraction: f64,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<(Sequence, Vec<bool>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(validation(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    vocab.check(x)?;
    let count = (fraction * x.len() as f64).round() as usize;
    let mut out = x.to_vec();
    let mut changed = vec![false; x.len()];
    if count == 0 {
        return Ok((Sequence(out), changed));
    }
    let n = vocab.data_size();
    if n <= 1 {
        return Err(Error::Validation(format!(
            "cannot replace tokens with a vocabulary of {n} data tokens"
        )));
    }
    for pos in sample_indices(rng, x.len(), count) {
        let original = x[pos];
        let replacement = if vocab.is_mask(original) {
            vocab.data_token(rng.random_range(0..n))
        } else {
            // Uniform over the n - 1 data tokens other than the original.
            let mut k = rng.random_range(0..n - 1);
            if vocab.data_token(k) >= original {
                k += 1;
            }
            vocab.data_token(k)
        };
        out[pos] = replacement;
        changed[pos] = true;
    }
    Ok((Sequence(out), changed))
}
