//! Path loss, distillation loss, budget-aware blending and step-size policies.

use ndarray::{Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};
use crate::path_data::Token;

/// Floor for `log p(x1)` inside the path loss.
pub const LOG_CLAMP: f64 = -30.0;

fn check_rows(rows: &ArrayView2<f64>, x_t: &[Token], x1: &[Token]) -> Result<()> {
    if rows.nrows() != x_t.len() || x1.len() != x_t.len() {
        return Err(validation("posterior rows, x_t and x1 must have equal length"));
    }
    let v = rows.ncols();
    if x_t.iter().chain(x1).any(|&a| a as usize >= v) {
        return Err(validation("token outside the posterior's vocabulary"));
    }
    Ok(())
}

/// Mean over positions of
/// `-scale * [p(x_t^i) - d_i + (1 - d_i) * log p(x1^i)]`, `d_i = [x_t^i == x1^i]`.
pub fn dfm_loss(posterior: ArrayView2<f64>, x_t: &[Token], x1: &[Token], scale: f64) -> Result<f64> {
    check_rows(&posterior, x_t, x1)?;
    let mut total = 0.0;
    for (i, row) in posterior.axis_iter(Axis(0)).enumerate() {
        let (c, target) = (x_t[i] as usize, x1[i] as usize);
        let term = if c == target {
            row[c] - 1.0
        } else {
            row[c] + clamped_log(row[target])
        };
        // The term is at most zero for a probability row; rounding can overshoot.
        total += -scale * term.min(0.0);
    }
    Ok(total / x_t.len() as f64)
}

fn clamped_log(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_CLAMP)
    } else {
        LOG_CLAMP
    }
}

/// Row-wise `log softmax(logits / temperature)`.
pub fn log_softmax_rows(logits: ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| v / temperature);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// [`dfm_loss`] of `softmax(logits)` together with its gradient in the logits.
pub fn dfm_loss_grad(logits: ArrayView2<f64>, x_t: &[Token], x1: &[Token], scale: f64) -> Result<(f64, Array2<f64>)> {
    check_rows(&logits, x_t, x1)?;
    let logp = log_softmax_rows(logits, 1.0);
    let p = logp.mapv(f64::exp);
    let n = x_t.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for i in 0..x_t.len() {
        let (c, target) = (x_t[i] as usize, x1[i] as usize);
        let pc = p[[i, c]];
        let clamped = logp[[i, target]] < LOG_CLAMP;
        let log_target = logp[[i, target]].max(LOG_CLAMP);
        total += -scale * (if c == target { pc - 1.0 } else { pc + log_target }).min(0.0);
        for a in 0..logits.ncols() {
            let pa = p[[i, a]];
            // d p_c / d l_a = p_c (1[a = c] - p_a);  d log p_1 / d l_a = 1[a = x1] - p_a.
            let mut d = pc * (f64::from(u8::from(a == c)) - pa);
            if c != target && !clamped {
                d += f64::from(u8::from(a == target)) - pa;
            }
            grad[[i, a]] = -scale * d / n;
        }
    }
    Ok((total / n, grad))
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>, temperature: f64) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(validation(format!("teacher {:?} and student {:?} shapes differ", a.dim(), b.dim())));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(config(format!("temperature {temperature} must be positive")));
    }
    Ok(())
}

/// Mean over positions of `KL(softmax(teacher / T) || softmax(student / T))`.
pub fn kl_distill(teacher: ArrayView2<f64>, student: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    Ok(kl_distill_grad(teacher, student, temperature)?.0)
}

/// [`kl_distill`] and its gradient in the student logits, `(p_student - p_teacher) / (T L)`.
/// The teacher receives no gradient.
pub fn kl_distill_grad(
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    check_pair(&teacher, &student, temperature)?;
    let lt = log_softmax_rows(teacher, temperature);
    let ls = log_softmax_rows(student, temperature);
    let n = teacher.nrows() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(student.raw_dim());
    for ((rt, rs), mut g) in lt.rows().into_iter().zip(ls.rows()).zip(grad.rows_mut()) {
        let mut kl = 0.0;
        for a in 0..rt.len() {
            let pt = rt[a].exp();
            if pt > 0.0 {
                kl += pt * (rt[a] - rs[a]);
            }
            g[a] = (rs[a].exp() - pt) / (temperature * n);
        }
        total += kl.max(0.0);
    }
    Ok((total / n, grad))
}

/// The per-sample switch between path and distillation losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_tau() -> f64 {
    STEP_GRID[1]
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { tau: default_tau(), temperature: default_temperature() }
    }
}

impl BlendConfig {
    pub fn check(&self) -> Result<()> {
        if !(STEP_GRID[0]..=1.0).contains(&self.tau) {
            return Err(config(format!("tau {} outside the step grid range", self.tau)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }

    /// Whether a sample with step `h` trains on the path loss.
    pub fn uses_path_loss(&self, h: f64) -> bool {
        h < self.tau
    }
}

/// `dfm` when `h < tau`, otherwise `dist`.
pub fn blended_loss(h: f64, dfm: f64, dist: f64, cfg: &BlendConfig) -> f64 {
    if cfg.uses_path_loss(h) {
        dfm
    } else {
        dist
    }
}

/// Batch mean of [`blended_loss`] over `(h, dfm, dist)` triples.
pub fn blended_batch(samples: &[(f64, f64, f64)], cfg: &BlendConfig) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|&(h, a, b)| blended_loss(h, a, b, cfg)).sum::<f64>() / samples.len() as f64
}

/// `2^k` for `k = -10..=0`, ascending.
pub const STEP_GRID: [f64; 11] = [
    1.0 / 1024.0,
    1.0 / 512.0,
    1.0 / 256.0,
    1.0 / 128.0,
    1.0 / 64.0,
    1.0 / 32.0,
    1.0 / 16.0,
    1.0 / 8.0,
    1.0 / 4.0,
    1.0 / 2.0,
    1.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "tb10")]
    Tb10,
    #[serde(rename = "tb20")]
    Tb20,
    #[serde(rename = "pu")]
    Pu,
    #[serde(rename = "g")]
    G,
    #[serde(rename = "ag")]
    Ag,
}

/// Sampling weights over [`STEP_GRID`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepPolicy {
    pub kind: PolicyKind,
    #[serde(default = "default_anneal")]
    pub anneal_interval: usize,
}

fn default_anneal() -> usize {
    10_000
}

const WEIGHT_CAP: f64 = 1024.0;

impl StepPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self { kind, anneal_interval: default_anneal() }
    }

    /// Unnormalized weights aligned with [`STEP_GRID`] at `training_step`.
    pub fn weights(&self, training_step: usize) -> [f64; 11] {
        let mut w = [1.0; 11];
        match self.kind {
            PolicyKind::Pu => {}
            PolicyKind::Tb10 => w[10] = 10.0,
            PolicyKind::Tb20 => w[10] = 20.0,
            PolicyKind::G | PolicyKind::Ag => {
                let doublings = match self.kind {
                    PolicyKind::Ag => (training_step / self.anneal_interval.max(1)).min(64) as i32,
                    _ => 0,
                };
                for (k, wk) in w.iter_mut().enumerate() {
                    *wk = (2f64.powi(k as i32) * 2f64.powi(doublings)).min(WEIGHT_CAP);
                }
            }
        }
        w
    }

    pub fn probabilities(&self, training_step: usize) -> [f64; 11] {
        let w = self.weights(training_step);
        let total: f64 = w.iter().sum();
        w.map(|x| x / total)
    }
}

/// Draws a step size from the grid under `policy`.
pub fn sample_h<R: Rng + ?Sized>(policy: &StepPolicy, training_step: usize, rng: &mut R) -> f64 {
    let dist = WeightedIndex::new(policy.weights(training_step)).expect("positive weights");
    STEP_GRID[dist.sample(rng)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::softmax_rows;
    use crate::rng::stream_rng;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn dfm_examples() {
        let perfect = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(dfm_loss(perfect.view(), &[0, 1], &[0, 1], 3.0).unwrap(), 0.0);
        let p = array![[0.6, 0.4]];
        assert!((dfm_loss(p.view(), &[0], &[0], 2.0).unwrap() - 0.8).abs() < 1e-15);
        // Zero-probability target hits the clamp instead of -inf.
        let p = array![[1.0, 0.0]];
        assert!((dfm_loss(p.view(), &[0], &[1], 1.0).unwrap() - 29.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let l = array![[1.0, -2.0, 0.5]];
        assert_eq!(kl_distill(l.view(), l.view(), 1.0).unwrap(), 0.0);
        let teacher = array![[20.0, 0.0, 0.0, 0.0]];
        let student = array![[0.0, 0.0, 0.0, 0.0]];
        let kl = kl_distill(teacher.view(), student.view(), 1.0).unwrap();
        assert!((kl - 4f64.ln()).abs() <= 1e-6, "{kl}");
    }

    #[test]
    fn blending_threshold_is_strict() {
        let cfg = BlendConfig::default();
        assert_eq!(cfg.tau, 1.0 / 512.0);
        assert_eq!(blended_loss(1.0 / 1024.0, 1.0, 2.0, &cfg), 1.0);
        assert_eq!(blended_loss(1.0 / 512.0, 1.0, 2.0, &cfg), 2.0);
        assert_eq!(blended_batch(&[(1.0 / 1024.0, 1.0, 9.0), (0.5, 9.0, 3.0)], &cfg), 2.0);
        assert!(BlendConfig { tau: 2.0, temperature: 1.0 }.check().is_err());
    }

    #[test]
    fn policy_weights() {
        let pu = StepPolicy::new(PolicyKind::Pu).probabilities(0);
        assert!(pu.iter().all(|&p| (p - 1.0 / 11.0).abs() < 1e-15));
        let tb20 = StepPolicy::new(PolicyKind::Tb20).probabilities(0);
        assert!((tb20[10] - 2.0 / 3.0).abs() < 1e-15);
        let tb10 = StepPolicy::new(PolicyKind::Tb10).probabilities(0);
        assert!((tb10[10] - 0.5).abs() < 1e-15);
        let g = StepPolicy::new(PolicyKind::G).weights(0);
        assert_eq!(g.iter().sum::<f64>(), 2047.0);
        assert_eq!(g[10], 1024.0);
        assert_eq!(g[0], 1.0);
        let ag = StepPolicy::new(PolicyKind::Ag);
        assert_eq!(ag.weights(0), g);
        assert_eq!(ag.weights(9_999), g);
        assert_eq!(ag.weights(10_000)[0], 2.0);
        assert!(ag.weights(100_000).iter().all(|&w| w == 1024.0));
        assert!(ag.weights(99_999).iter().any(|&w| w < 1024.0));
    }

    #[test]
    fn sample_h_frequencies() {
        let mut rng = stream_rng(1, 2);
        let policy = StepPolicy::new(PolicyKind::Tb20);
        let n = 60_000;
        let ones = (0..n).filter(|_| sample_h(&policy, 0, &mut rng) == 1.0).count();
        assert!((ones as f64 / n as f64 - 2.0 / 3.0).abs() < 0.01);
        assert!((0..1000).all(|_| STEP_GRID.contains(&sample_h(&policy, 0, &mut rng))));
    }

    fn numeric_grad<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut up = x.clone();
            up[[i, j]] += eps;
            let mut down = x.clone();
            down[[i, j]] -= eps;
            g[[i, j]] = (f(&up) - f(&down)) / (2.0 * eps);
        }
        g
    }

    fn logits_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(-4.0..4.0f64, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn dfm_is_nonnegative(l in logits_strategy(3, 4), x_t in prop::collection::vec(0u32..4, 3),
                              x1 in prop::collection::vec(0u32..4, 3), scale in 0.0..50.0f64) {
            let p = softmax_rows(l.view(), 1.0);
            prop_assert!(dfm_loss(p.view(), &x_t, &x1, scale).unwrap() >= 0.0);
        }

        #[test]
        fn dfm_gradient_matches_finite_differences(l in logits_strategy(2, 3),
                x_t in prop::collection::vec(0u32..3, 2), x1 in prop::collection::vec(0u32..3, 2)) {
            let (loss, g) = dfm_loss_grad(l.view(), &x_t, &x1, 1.7).unwrap();
            let p = softmax_rows(l.view(), 1.0);
            prop_assert!((loss - dfm_loss(p.view(), &x_t, &x1, 1.7).unwrap()).abs() < 1e-12);
            let n = numeric_grad(|x| dfm_loss_grad(x.view(), &x_t, &x1, 1.7).unwrap().0, &l);
            for (a, b) in g.iter().zip(n.iter()) {
                prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }

        #[test]
        fn kl_nonnegative_and_shift_invariant(t in logits_strategy(3, 5), s in logits_strategy(3, 5),
                                              shift in prop::collection::vec(-10.0..10.0f64, 3),
                                              temp in 0.5..3.0f64) {
            prop_assert!(kl_distill(t.view(), s.view(), temp).unwrap() >= 0.0);
            let mut shifted = t.clone();
            for (mut row, c) in shifted.rows_mut().into_iter().zip(&shift) {
                row += *c;
            }
            prop_assert!(kl_distill(t.view(), shifted.view(), temp).unwrap() < 1e-12);
        }

        #[test]
        fn kl_gradient_matches_finite_differences(t in logits_strategy(2, 4), s in logits_strategy(2, 4),
                                                  temp in 0.5..2.0f64) {
            let (_, g) = kl_distill_grad(t.view(), s.view(), temp).unwrap();
            let n = numeric_grad(|x| kl_distill(t.view(), x.view(), temp).unwrap(), &s);
            for (a, b) in g.iter().zip(n.iter()) {
                prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }
}
