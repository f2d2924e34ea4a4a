use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{log_probs_as_logits, softmax_rows, PosteriorModel};
use crate::error::{config, validation, Error, Result};
use crate::kinetics::Scheduler;
use crate::path_data::{Sequence, SourceKind, SourceSpec, Token, Vocab};

const MAX_SUPPORT: usize = 65_536;
const SUPPORT_SUM_TOL: f64 = 1e-9;

/// An explicit target distribution plus the path it is observed through.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactBayesSpec {
    pub support: Vec<(Sequence, f64)>,
    pub source: SourceSpec,
    pub scheduler: Scheduler,
    pub vocab: Vocab,
}

/// Posterior computed by summing over the target support.
///
/// The likelihood of `z` factorizes over positions and each factor takes
/// one of two values (match or no match). Writing `N` for the likelihood of a
/// target that matches nowhere, only targets matching `z` in at least one
/// position deviate from `N`, so the sum splits into
/// `N * marginal + sum over matching targets of p(x1) * (W(x1) - N)`.
#[derive(Debug, Clone)]
pub struct ExactBayes {
    spec: ExactBayesSpec,
    len: usize,
    tokens: Vec<Token>,
    probs: Vec<f64>,
    /// `marginals[i * V + a]` = P(x1^i = a).
    marginals: Vec<f64>,
    /// `index[i * V + a]` lists support ids with `x1^i = a`.
    index: Vec<Vec<u32>>,
}

impl ExactBayes {
    pub fn new(spec: ExactBayesSpec) -> Result<Self> {
        spec.source.check_vocab(&spec.vocab)?;
        let n = spec.support.len();
        if n == 0 || n > MAX_SUPPORT {
            return Err(config(format!("support size {n} outside 1..={MAX_SUPPORT}")));
        }
        let len = spec.support[0].0.len();
        if len == 0 {
            return Err(config("support sequences must be non-empty"));
        }
        let v = spec.vocab.size;
        let mut tokens = Vec::with_capacity(n * len);
        let mut probs = Vec::with_capacity(n);
        let mut marginals = vec![0.0; len * v];
        let mut index = vec![Vec::new(); len * v];
        let mut total = 0.0;
        for (k, (x, p)) in spec.support.iter().enumerate() {
            if x.len() != len {
                return Err(config(format!("support sequence {k} has length {}, expected {len}", x.len())));
            }
            spec.vocab.check(x)?;
            if x.iter().any(|&a| spec.vocab.is_mask(a)) {
                return Err(config(format!("support sequence {k} contains the mask id")));
            }
            if !(p.is_finite() && *p >= 0.0) {
                return Err(validation(format!("support probability {p} is not a valid mass")));
            }
            total += p;
            tokens.extend_from_slice(x);
            probs.push(*p);
            for (i, &a) in x.iter().enumerate() {
                marginals[i * v + a as usize] += p;
                index[i * v + a as usize].push(k as u32);
            }
        }
        if (total - 1.0).abs() > SUPPORT_SUM_TOL {
            return Err(validation(format!("support probabilities sum to {total}, not 1")));
        }
        Ok(Self { spec, len, tokens, probs, marginals, index })
    }

    pub fn spec(&self) -> &ExactBayesSpec {
        &self.spec
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    /// Per-position likelihood factors `(no match, match)` for `z`.
    fn factors(&self, z: &[Token], kappa: f64) -> Result<Vec<(f64, f64)>> {
        let vocab = &self.spec.vocab;
        z.iter()
            .enumerate()
            .map(|(j, &zj)| match self.spec.source.kind {
                SourceKind::Mask if vocab.is_mask(zj) => Ok((1.0 - kappa, 1.0 - kappa)),
                SourceKind::Mask => Ok((0.0, kappa)),
                SourceKind::Uniform if vocab.is_mask(zj) => Err(Error::Evidence(format!(
                    "position {j} holds the mask id, which a uniform source never emits"
                ))),
                SourceKind::Uniform => {
                    let base = (1.0 - kappa) / vocab.data_size() as f64;
                    Ok((base, base + kappa))
                }
            })
            .collect()
    }

    /// Exact posterior rows at time `t` (which may equal 1).
    pub fn exact_posterior(&self, z: &[Token], t: f64) -> Result<Array2<f64>> {
        let v = self.spec.vocab.size;
        if z.len() != self.len {
            return Err(validation(format!("state has length {}, expected {}", z.len(), self.len)));
        }
        self.spec.vocab.check(z)?;
        let (kappa, _) = self.spec.scheduler.kappa_eval(t)?;
        let factors = self.factors(z, kappa)?;
        let ln = |x: f64| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
        let ln_miss: Vec<f64> = factors.iter().map(|f| ln(f.0)).collect();
        let ln_hit: Vec<f64> = factors.iter().map(|f| ln(f.1)).collect();
        let ln_none: f64 = ln_miss.iter().sum();

        // Targets agreeing with z somewhere, each listed once (at its first match).
        let mut matched: Vec<(usize, f64)> = Vec::new();
        for (j, &zj) in z.iter().enumerate() {
            if self.spec.vocab.is_mask(zj) {
                continue;
            }
            for &k in &self.index[j * v + zj as usize] {
                let k = k as usize;
                let x = &self.tokens[k * self.len..(k + 1) * self.len];
                if x[..j].iter().zip(&z[..j]).any(|(a, b)| a == b) {
                    continue;
                }
                let ln_w: f64 = (0..self.len)
                    .map(|m| if x[m] == z[m] { ln_hit[m] } else { ln_miss[m] })
                    .sum();
                matched.push((k, ln_w));
            }
        }
        let shift = matched.iter().fold(ln_none, |m, &(_, w)| m.max(w));
        if shift == f64::NEG_INFINITY {
            return Err(Error::Evidence(format!("state {z:?} has zero likelihood at t = {t}")));
        }
        let none = (ln_none - shift).exp();
        let mut post = Array2::zeros((self.len, v));
        for i in 0..self.len {
            for a in 0..v {
                post[[i, a]] = none * self.marginals[i * v + a];
            }
        }
        for &(k, ln_w) in &matched {
            let extra = self.probs[k] * ((ln_w - shift).exp() - none);
            for (i, &a) in self.tokens[k * self.len..(k + 1) * self.len].iter().enumerate() {
                post[[i, a as usize]] += extra;
            }
        }
        for mut row in post.rows_mut() {
            let total: f64 = row.sum();
            if !(total > 0.0) {
                return Err(Error::Evidence(format!("state {z:?} has zero likelihood at t = {t}")));
            }
            row.mapv_inplace(|p| (p / total).max(0.0));
        }
        Ok(post)
    }
}

impl PosteriorModel for ExactBayes {
    fn vocab(&self) -> Vocab {
        self.spec.vocab
    }

    fn logits(&self, z: &[Token], t: f64, _h: f64) -> Result<Array2<f64>> {
        Ok(log_probs_as_logits(&self.exact_posterior(z, t)?))
    }

    fn posterior(&self, z: &[Token], t: f64, h: f64, temperature: f64) -> Result<Array2<f64>> {
        if temperature == 1.0 {
            self.exact_posterior(z, t)
        } else {
            Ok(softmax_rows(self.logits(z, t, h)?.view(), temperature))
        }
    }
}
