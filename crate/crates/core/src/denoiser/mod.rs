//! Posterior models `p_{1|t}(x1^i | z)`: the direction term of the velocity.

mod checkpoint;
mod exact;
mod neural;
mod tabular;

pub use checkpoint::{decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TensorEntry};
pub use exact::{ExactBayes, ExactBayesSpec};
pub use neural::{ForwardCache, NeuralDenoiser, NeuralDenoiserSpec};
pub use tabular::{
    tabular_fit, CheckerboardAbstraction, IdentityAbstraction, StateAbstraction, TabularModel,
    TimeTable,
};

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{validation, Result};
use crate::path_data::{Token, Vocab};

/// Logit assigned to tokens that can never be targets (the mask id).
/// `exp` of it underflows to exactly zero inside a softmax.
pub const MASKED_LOGIT: f64 = -1.0e4;

/// Anything producing per-position target-token logits from `(z, t, h)`.
///
/// Outputs are `L x |V|` arrays. Implementations must never place mass on
/// the vocabulary's mask id.
pub trait PosteriorModel: Sync {
    fn vocab(&self) -> Vocab;

    fn logits(&self, z: &[Token], t: f64, h: f64) -> Result<Array2<f64>>;

    /// Row-softmax of `logits / temperature`.
    fn posterior(&self, z: &[Token], t: f64, h: f64, temperature: f64) -> Result<Array2<f64>> {
        Ok(softmax_rows(self.logits(z, t, h)?.view(), temperature))
    }

    /// Logits for equal-length states, stacked as `B x L x |V|`.
    fn logits_batch(&self, zs: &[&[Token]], t: &[f64], h: &[f64]) -> Result<Array3<f64>> {
        stack_rows(self.vocab(), zs, t, h, |z, t, h| self.logits(z, t, h))
    }

    fn posterior_batch(
        &self,
        zs: &[&[Token]],
        t: &[f64],
        h: &[f64],
        temperature: f64,
    ) -> Result<Array3<f64>> {
        stack_rows(self.vocab(), zs, t, h, |z, t, h| self.posterior(z, t, h, temperature))
    }
}

/// Evaluates `f` per state and stacks the results.
pub fn stack_rows<F>(vocab: Vocab, zs: &[&[Token]], t: &[f64], h: &[f64], mut f: F) -> Result<Array3<f64>>
where
    F: FnMut(&[Token], f64, f64) -> Result<Array2<f64>>,
{
    check_batch(zs, t, h)?;
    let len = zs.first().map_or(0, |z| z.len());
    let mut out = Array3::zeros((zs.len(), len, vocab.size));
    for (b, ((z, &t), &h)) in zs.iter().zip(t).zip(h).enumerate() {
        out.index_axis_mut(Axis(0), b).assign(&f(z, t, h)?);
    }
    Ok(out)
}

/// Batch inputs must agree in count and share one sequence length.
pub fn check_batch(zs: &[&[Token]], t: &[f64], h: &[f64]) -> Result<()> {
    if zs.len() != t.len() || zs.len() != h.len() {
        return Err(validation("batch inputs have different lengths"));
    }
    if let Some(first) = zs.first() {
        if zs.iter().any(|z| z.len() != first.len()) {
            return Err(validation("batch states have different lengths"));
        }
    }
    Ok(())
}

impl<M: PosteriorModel + ?Sized> PosteriorModel for &M {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }
    fn logits(&self, z: &[Token], t: f64, h: f64) -> Result<Array2<f64>> {
        (**self).logits(z, t, h)
    }
    fn posterior(&self, z: &[Token], t: f64, h: f64, temperature: f64) -> Result<Array2<f64>> {
        (**self).posterior(z, t, h, temperature)
    }
    fn logits_batch(&self, zs: &[&[Token]], t: &[f64], h: &[f64]) -> Result<Array3<f64>> {
        (**self).logits_batch(zs, t, h)
    }
    fn posterior_batch(
        &self,
        zs: &[&[Token]],
        t: &[f64],
        h: &[f64],
        temperature: f64,
    ) -> Result<Array3<f64>> {
        (**self).posterior_batch(zs, t, h, temperature)
    }
}

/// Wraps a model and counts evaluations, one per sequence evaluated.
pub struct CountingModel<M> {
    inner: M,
    count: AtomicUsize,
}

impl<M: PosteriorModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self { inner, count: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    fn bump(&self, n: usize) {
        self.count.fetch_add(n, Ordering::Relaxed);
    }
}

impl<M: PosteriorModel> PosteriorModel for CountingModel<M> {
    fn vocab(&self) -> Vocab {
        self.inner.vocab()
    }
    fn logits(&self, z: &[Token], t: f64, h: f64) -> Result<Array2<f64>> {
        self.bump(1);
        self.inner.logits(z, t, h)
    }
    fn posterior(&self, z: &[Token], t: f64, h: f64, temperature: f64) -> Result<Array2<f64>> {
        self.bump(1);
        self.inner.posterior(z, t, h, temperature)
    }
    fn logits_batch(&self, zs: &[&[Token]], t: &[f64], h: &[f64]) -> Result<Array3<f64>> {
        self.bump(zs.len());
        self.inner.logits_batch(zs, t, h)
    }
    fn posterior_batch(
        &self,
        zs: &[&[Token]],
        t: &[f64],
        h: &[f64],
        temperature: f64,
    ) -> Result<Array3<f64>> {
        self.bump(zs.len());
        self.inner.posterior_batch(zs, t, h, temperature)
    }
}

/// Row-wise softmax of `logits / temperature`, max-shifted.
pub fn softmax_rows(logits: ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            total += *v;
        }
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Natural log of probabilities, floored at [`MASKED_LOGIT`] for zeros.
pub fn log_probs_as_logits(probs: &Array2<f64>) -> Array2<f64> {
    probs.mapv(|p| if p > 0.0 { p.ln().max(MASKED_LOGIT) } else { MASKED_LOGIT })
}
