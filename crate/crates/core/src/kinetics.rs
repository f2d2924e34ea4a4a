//! Path schedulers, scale factors and factorized rate rows.
//!
//! The velocity of a single token position splits into a scale and a
//! direction:
//!
//! ```text
//! u(a | z) = scale * (p(a | z) - delta_z(a))
//! ```
//!
//! The scale is either the instantaneous rate `g(t) = k'(t) / (1 - k(t))`
//! or the cumulative scalar
//!
//! ```text
//! gbar(t, h) = (1/h) * ln[(1 - k(t)) / (1 - k(t + h))]
//! ```
//!
//! which is the exact average of `g` over `[t, t + h]`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, validation, Result};

/// Default gap keeping `k(t_end)` away from 1 inside the log ratio.
pub const DEFAULT_CLAMP_EPSILON: f64 = 1e-4;

/// Tolerance on `t + h <= 1` for grids built from floating point divisions.
const INTERVAL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    #[default]
    Linear,
    Quadratic,
}

/// A monotone path schedule `k: [0,1] -> [0,1]` with `k(0) = 0`, `k(1) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    pub kind: SchedulerKind,
    pub clamp_epsilon: f64,
}

impl Default for Scheduler {
    fn default() -> Self {
        Self::linear()
    }
}

impl Scheduler {
    pub fn new(kind: SchedulerKind, clamp_epsilon: f64) -> Result<Self> {
        if !(clamp_epsilon > 0.0 && clamp_epsilon <= 0.01) {
            return Err(validation(format!(
                "clamp_epsilon must lie in (0, 0.01], got {clamp_epsilon}"
            )));
        }
        Ok(Self { kind, clamp_epsilon })
    }

    pub fn linear() -> Self {
        Self { kind: SchedulerKind::Linear, clamp_epsilon: DEFAULT_CLAMP_EPSILON }
    }

    pub fn quadratic() -> Self {
        Self { kind: SchedulerKind::Quadratic, clamp_epsilon: DEFAULT_CLAMP_EPSILON }
    }

    pub fn with_clamp(self, clamp_epsilon: f64) -> Result<Self> {
        Self::new(self.kind, clamp_epsilon)
    }

    /// `k(t)` without domain checks; callers guarantee `t` in `[0, 1]`.
    #[inline]
    pub(crate) fn kappa_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            SchedulerKind::Linear => t,
            SchedulerKind::Quadratic => t * t,
        }
    }

    #[inline]
    pub(crate) fn kappa_dot_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            SchedulerKind::Linear => 1.0,
            SchedulerKind::Quadratic => 2.0 * t,
        }
    }

    /// Returns `(k(t), k'(t))`.
    pub fn kappa_eval(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(domain(format!("scheduler evaluated at t = {t}, outside [0, 1]")));
        }
        Ok((self.kappa_unchecked(t), self.kappa_dot_unchecked(t)))
    }

    /// Largest time at which the instantaneous rate is defined.
    pub fn clamp_boundary(&self) -> f64 {
        1.0 - self.clamp_epsilon
    }

    /// Instantaneous scale `g(t) = k'(t) / (1 - k(t))`, defined for
    /// `0 <= t < 1 - clamp_epsilon`.
    pub fn g_instant(&self, t: f64) -> Result<f64> {
        if !(0.0..self.clamp_boundary()).contains(&t) {
            return Err(domain(format!(
                "instantaneous rate needs 0 <= t < {}, got {t}",
                self.clamp_boundary()
            )));
        }
        let (k, kd) = (self.kappa_unchecked(t), self.kappa_dot_unchecked(t));
        Ok(kd / (1.0 - k))
    }

    /// Cumulative scalar over `interval`, with the upper endpoint clamped to
    /// `1 - clamp_epsilon`.
    ///
    /// If `t` itself lies at or beyond the clamp boundary the interval has no
    /// room left, and the limit value `g(1 - clamp_epsilon)` is returned.
    pub fn g_cumulative(&self, interval: TimeInterval) -> f64 {
        let boundary = self.clamp_boundary();
        let t = interval.t();
        if t >= boundary {
            let k = self.kappa_unchecked(boundary);
            return self.kappa_dot_unchecked(boundary) / (1.0 - k);
        }
        let t_end = (t + interval.h()).min(boundary);
        // ln(1 - k(t)) - ln(1 - k(t_end)), each term via ln_1p for accuracy near 0.
        let log_ratio =
            (-self.kappa_unchecked(t)).ln_1p() - (-self.kappa_unchecked(t_end)).ln_1p();
        log_ratio / interval.h()
    }

    /// The scale used by a jump step under `mode`.
    pub fn scale(&self, mode: ScaleMode, t: f64, h: f64) -> Result<f64> {
        match mode {
            ScaleMode::Instantaneous => self.g_instant(t),
            ScaleMode::Cumulative => Ok(self.g_cumulative(TimeInterval::new(t, h)?)),
        }
    }
}

/// A step `[t, t + h]` with `t` in `[0, 1)`, `h` in `(0, 1]` and `t + h <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeInterval {
    t: f64,
    h: f64,
}

impl TimeInterval {
    pub fn new(t: f64, h: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&t) {
            return Err(domain(format!("interval start t = {t} outside [0, 1)")));
        }
        if !(h > 0.0 && h <= 1.0) {
            return Err(domain(format!("step h = {h} outside (0, 1]")));
        }
        if t + h > 1.0 + INTERVAL_SLACK {
            return Err(domain(format!("t + h = {} exceeds 1", t + h)));
        }
        Ok(Self { t, h })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn h(&self) -> f64 {
        self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    Instantaneous,
    #[default]
    Cumulative,
}

/// Generator row for one position: `rates[a] = scale * (p[a] - delta_current(a))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    rates: Vec<f64>,
    current: usize,
}

impl RateRow {
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn current(&self) -> usize {
        self.current
    }

    /// `lambda = -rates[current]`, the total rate of leaving the current token.
    pub fn exit_rate(&self) -> f64 {
        -self.rates[self.current]
    }

    /// Probability of at least one jump during a step of length `h`.
    pub fn jump_probability(&self, h: f64) -> f64 {
        -(-h * self.exit_rate()).exp_m1()
    }
}

/// Tolerance on `sum(posterior) = 1`.
pub const POSTERIOR_SUM_TOL: f64 = 1e-6;

pub fn rate_row_from_posterior(posterior: &[f64], current: usize, scale: f64) -> Result<RateRow> {
    if current >= posterior.len() {
        return Err(validation(format!(
            "current token {current} outside vocabulary of size {}",
            posterior.len()
        )));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(validation(format!("scale must be finite and >= 0, got {scale}")));
    }
    if posterior.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(validation("posterior has negative or non-finite entries"));
    }
    let total: f64 = posterior.iter().sum();
    if (total - 1.0).abs() > POSTERIOR_SUM_TOL {
        return Err(validation(format!("posterior sums to {total}, expected 1")));
    }
    let mut rates: Vec<f64> = posterior.iter().map(|&p| scale * p).collect();
    // Diagonal is the negated off-diagonal mass so the row sums to zero exactly
    // even when the posterior is only normalized to within the tolerance.
    rates[current] = 0.0;
    let off: f64 = rates.iter().sum();
    rates[current] = -off;
    Ok(RateRow { rates, current })
}
