use std::collections::HashMap;

use ndarray::{Array2, Array3};

use super::{check_batch, log_probs_as_logits, softmax_rows, PosteriorModel};
use crate::error::{config, validation, Result};
use crate::path_data::{CheckerboardSpec, Token, Vocab};

const MAX_STATES: usize = 4096;

/// Groups `(state, position)` contexts into keys, and candidate targets into
/// classes whose members share one posterior probability.
pub trait StateAbstraction: Send + Sync {
    fn seq_len(&self) -> usize;
    fn vocab(&self) -> Vocab;
    fn num_classes(&self) -> usize;
    fn key(&self, z: &[Token], position: usize) -> u64;
    /// `None` for tokens that are never targets.
    fn class_of(&self, z: &[Token], position: usize, token: Token) -> Option<usize>;
}

/// Every full state is its own context and every token its own class.
#[derive(Debug, Clone)]
pub struct IdentityAbstraction {
    vocab: Vocab,
    len: usize,
}

impl IdentityAbstraction {
    pub fn new(vocab: Vocab, len: usize) -> Result<Self> {
        state_count(&vocab, len)?;
        Ok(Self { vocab, len })
    }
}

fn state_count(vocab: &Vocab, len: usize) -> Result<usize> {
    let count = (vocab.size as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if len == 0 || count > MAX_STATES as u128 {
        return Err(config(format!(
            "state space |V|^L = {}^{len} exceeds {MAX_STATES}",
            vocab.size
        )));
    }
    Ok(count as usize)
}

fn state_index(z: &[Token], v: usize) -> usize {
    z.iter().fold(0, |acc, &a| acc * v + a as usize)
}

impl StateAbstraction for IdentityAbstraction {
    fn seq_len(&self) -> usize {
        self.len
    }
    fn vocab(&self) -> Vocab {
        self.vocab
    }
    fn num_classes(&self) -> usize {
        self.vocab.size
    }
    fn key(&self, z: &[Token], position: usize) -> u64 {
        (state_index(z, self.vocab.size) * self.len + position) as u64
    }
    fn class_of(&self, _z: &[Token], _position: usize, token: Token) -> Option<usize> {
        (!self.vocab.is_mask(token)).then_some(token as usize)
    }
}

/// Checkerboard contexts: a target token either equals the observed token,
/// lies in a block whose parity agrees with the other coordinate's observed
/// block, or neither. Those three classes are exchangeable under the
/// posterior for both sources.
#[derive(Debug, Clone)]
pub struct CheckerboardAbstraction {
    spec: CheckerboardSpec,
    vocab: Vocab,
}

impl CheckerboardAbstraction {
    pub fn new(spec: CheckerboardSpec, vocab: Vocab) -> Result<Self> {
        if vocab.data_size() != spec.grid {
            return Err(config(format!(
                "vocabulary has {} data tokens, grid has {}",
                vocab.data_size(),
                spec.grid
            )));
        }
        Ok(Self { spec, vocab })
    }

    fn parity(&self, a: Token) -> usize {
        (a as usize / self.spec.block) % 2
    }
}

impl StateAbstraction for CheckerboardAbstraction {
    fn seq_len(&self) -> usize {
        CheckerboardSpec::SEQ_LEN
    }
    fn vocab(&self) -> Vocab {
        self.vocab
    }
    fn num_classes(&self) -> usize {
        3
    }
    fn key(&self, z: &[Token], position: usize) -> u64 {
        let other = 1 - position;
        let mask_self = self.vocab.is_mask(z[position]);
        let mask_other = self.vocab.is_mask(z[other]);
        let valid = !mask_self && !mask_other && self.spec.is_valid(z);
        position as u64 | (valid as u64) << 1 | (mask_self as u64) << 2 | (mask_other as u64) << 3
    }
    fn class_of(&self, z: &[Token], position: usize, token: Token) -> Option<usize> {
        if self.vocab.is_mask(token) {
            return None;
        }
        if token == z[position] {
            return Some(0);
        }
        let observed = z[1 - position];
        if !self.vocab.is_mask(observed) && self.parity(token) == self.parity(observed) {
            Some(1)
        } else {
            Some(2)
        }
    }
}

/// Empirical posterior with add-one smoothing over classes, per
/// `(context key, time bin)`.
pub struct TabularModel {
    abstraction: Box<dyn StateAbstraction>,
    bins: usize,
    counts: HashMap<(u64, usize), Vec<u64>>,
}

impl TabularModel {
    pub fn empty(abstraction: Box<dyn StateAbstraction>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(config("tabular model needs at least one time bin"));
        }
        Ok(Self { abstraction, bins, counts: HashMap::new() })
    }

    pub fn bin(&self, t: f64) -> usize {
        ((t * self.bins as f64) as usize).min(self.bins - 1)
    }

    pub fn observe(&mut self, x_t: &[Token], x1: &[Token], t: f64) -> Result<()> {
        let len = self.abstraction.seq_len();
        if x_t.len() != len || x1.len() != len {
            return Err(validation(format!("training pair lengths differ from {len}")));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(validation(format!("training time {t} outside [0, 1]")));
        }
        let bin = self.bin(t);
        let classes = self.abstraction.num_classes();
        for i in 0..len {
            let Some(class) = self.abstraction.class_of(x_t, i, x1[i]) else {
                return Err(validation("target sequence contains the mask id"));
            };
            let key = self.abstraction.key(x_t, i);
            self.counts.entry((key, bin)).or_insert_with(|| vec![0; classes])[class] += 1;
        }
        Ok(())
    }

    pub fn posterior_probs(&self, z: &[Token], t: f64) -> Result<Array2<f64>> {
        let vocab = self.abstraction.vocab();
        let len = self.abstraction.seq_len();
        if z.len() != len {
            return Err(validation(format!("state has length {}, expected {len}", z.len())));
        }
        vocab.check(z)?;
        let bin = self.bin(t);
        let classes = self.abstraction.num_classes();
        let mut out = Array2::zeros((len, vocab.size));
        let mut members = vec![0usize; classes];
        for i in 0..len {
            let class_of: Vec<Option<usize>> =
                (0..vocab.size).map(|a| self.abstraction.class_of(z, i, a as Token)).collect();
            let counts = self.counts.get(&(self.abstraction.key(z, i), bin));
            match counts {
                Some(c) if c.iter().any(|&n| n > 0) => {
                    members.iter_mut().for_each(|m| *m = 0);
                    class_of.iter().flatten().for_each(|&k| members[k] += 1);
                    let live = members.iter().filter(|&&m| m > 0).count() as f64;
                    let total: u64 = c.iter().zip(&members).filter(|(_, &m)| m > 0).map(|(n, _)| n).sum();
                    for (a, k) in class_of.iter().enumerate() {
                        if let Some(k) = *k {
                            let p_class = (c[k] as f64 + 1.0) / (total as f64 + live);
                            out[[i, a]] = p_class / members[k] as f64;
                        }
                    }
                }
                _ => {
                    let p = 1.0 / vocab.data_size() as f64;
                    for (a, k) in class_of.iter().enumerate() {
                        if k.is_some() {
                            out[[i, a]] = p;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fits a [`TabularModel`] from `(x_t, x1, t)` triples.
pub fn tabular_fit<'a, I>(abstraction: Box<dyn StateAbstraction>, bins: usize, samples: I) -> Result<TabularModel>
where
    I: IntoIterator<Item = (&'a [Token], &'a [Token], f64)>,
{
    let mut model = TabularModel::empty(abstraction, bins)?;
    for (x_t, x1, t) in samples {
        model.observe(x_t, x1, t)?;
    }
    Ok(model)
}

impl PosteriorModel for TabularModel {
    fn vocab(&self) -> Vocab {
        self.abstraction.vocab()
    }
    fn logits(&self, z: &[Token], t: f64, _h: f64) -> Result<Array2<f64>> {
        Ok(log_probs_as_logits(&self.posterior_probs(z, t)?))
    }
    fn posterior(&self, z: &[Token], t: f64, h: f64, temperature: f64) -> Result<Array2<f64>> {
        if temperature == 1.0 {
            self.posterior_probs(z, t)
        } else {
            Ok(softmax_rows(self.logits(z, t, h)?.view(), temperature))
        }
    }
}

/// Logits tabulated over every state at evenly spaced time knots and
/// linearly interpolated in `t`.
#[derive(Debug, Clone)]
pub struct TimeTable {
    vocab: Vocab,
    len: usize,
    intervals: usize,
    states: usize,
    /// `[state][knot][position][token]`, flattened.
    logits: Vec<f64>,
}

impl TimeTable {
    /// Tabulates `f(z, t)` at `t = k / intervals`, `k = 0..=intervals`.
    pub fn from_fn<F>(vocab: Vocab, len: usize, intervals: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(&[Token], f64) -> Result<Array2<f64>>,
    {
        let states = state_count(&vocab, len)?;
        if intervals == 0 {
            return Err(config("time table needs at least one interval"));
        }
        let v = vocab.size;
        let mut logits = Vec::with_capacity(states * (intervals + 1) * len * v);
        let mut z = vec![0 as Token; len];
        for s in 0..states {
            let mut rest = s;
            for slot in z.iter_mut().rev() {
                *slot = (rest % v) as Token;
                rest /= v;
            }
            for k in 0..=intervals {
                let l = f(&z, k as f64 / intervals as f64)?;
                if l.dim() != (len, v) {
                    return Err(config(format!("tabulated logits have shape {:?}", l.dim())));
                }
                logits.extend(l.iter());
            }
        }
        Ok(Self { vocab, len, intervals, states, logits })
    }

    /// Tabulates another model's logits (at the given `h`).
    pub fn from_model(model: &dyn PosteriorModel, len: usize, intervals: usize, h: f64) -> Result<Self> {
        let vocab = model.vocab();
        Self::from_fn(vocab, len, intervals, |z, t| model.logits(z, t, h))
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    /// Interpolated logits written into `out` (`L * |V|`, row-major).
    pub fn logits_into(&self, z: &[Token], t: f64, out: &mut [f64]) -> Result<()> {
        if z.len() != self.len {
            return Err(validation(format!("state has length {}, expected {}", z.len(), self.len)));
        }
        self.vocab.check(z)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(validation(format!("time {t} outside [0, 1]")));
        }
        let block = self.len * self.vocab.size;
        let u = t * self.intervals as f64;
        let k = (u as usize).min(self.intervals - 1);
        let w = u - k as f64;
        let base = (state_index(z, self.vocab.size) * (self.intervals + 1) + k) * block;
        let (lo, hi) = (&self.logits[base..base + block], &self.logits[base + block..base + 2 * block]);
        for ((o, a), b) in out.iter_mut().zip(lo).zip(hi) {
            *o = (1.0 - w) * a + w * b;
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

impl PosteriorModel for TimeTable {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn logits(&self, z: &[Token], t: f64, _h: f64) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.len, self.vocab.size));
        self.logits_into(z, t, out.as_slice_mut().expect("standard layout"))?;
        Ok(out)
    }

    /// Rows for repeated states at the same time are computed once.
    fn posterior_batch(&self, zs: &[&[Token]], t: &[f64], _h: &[f64], temperature: f64) -> Result<Array3<f64>> {
        check_batch(zs, t, _h)?;
        let v = self.vocab.size;
        let block = self.len * v;
        let mut out = Array3::zeros((zs.len(), self.len, v));
        let flat = out.as_slice_mut().expect("standard layout");
        let mut first_row = vec![usize::MAX; self.states];
        let mut memo_t = f64::NAN;
        for (b, (z, &tb)) in zs.iter().zip(t).enumerate() {
            if tb.to_bits() != memo_t.to_bits() {
                first_row.fill(usize::MAX);
                memo_t = tb;
            }
            if z.len() != self.len {
                return Err(validation(format!("state has length {}, expected {}", z.len(), self.len)));
            }
            self.vocab.check(z)?;
            let s = state_index(z, v);
            match first_row[s] {
                usize::MAX => {
                    let row = &mut flat[b * block..(b + 1) * block];
                    self.logits_into(z, tb, row)?;
                    row.chunks_exact_mut(v).for_each(|r| softmax_in_place(r, temperature));
                    first_row[s] = b;
                }
                src => flat.copy_within(src * block..(src + 1) * block, b * block),
            }
        }
        Ok(out)
    }
}
