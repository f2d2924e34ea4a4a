//! Runge-Kutta shortcut teachers and the EMA parameter shadow.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::ctmc_sampler::jump_positions;
use crate::denoiser::{softmax_rows, PosteriorModel};
use crate::error::{config, validation, Result};
use crate::kinetics::{Scheduler, TimeInterval};
use crate::path_data::Token;
use crate::rng::{derive_seed, PositionStreams};

/// Exponential moving average of student parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaRegistry {
    shadow: Vec<f64>,
    decay: f64,
}

pub const DEFAULT_EMA_DECAY: f64 = 0.999;

impl EmaRegistry {
    pub fn new(initial: &[f64], decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(config(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self { shadow: initial.to_vec(), decay })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    /// `shadow = decay * shadow + (1 - decay) * student`.
    pub fn update(&mut self, student: &[f64]) -> Result<()> {
        if student.len() != self.shadow.len() {
            return Err(config(format!(
                "student has {} parameters, shadow has {}",
                student.len(),
                self.shadow.len()
            )));
        }
        let b = self.decay;
        for (s, &p) in self.shadow.iter_mut().zip(student) {
            *s = b * *s + (1.0 - b) * p;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Rk2,
    #[default]
    Rk4,
}

impl TeacherKind {
    /// Model evaluations per teacher call.
    pub fn evaluations(self) -> usize {
        match self {
            TeacherKind::Rk2 => 2,
            TeacherKind::Rk4 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default)]
    pub kind: TeacherKind,
    #[serde(default = "yes")]
    pub use_ema: bool,
    #[serde(default)]
    pub teacher_seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { kind: TeacherKind::Rk4, use_ema: true, teacher_seed: 0 }
    }
}

impl TeacherConfig {
    /// Seed for the internal jumps of example `index` in batch `batch`.
    pub fn example_seed(&self, batch: u64, index: u64) -> u64 {
        derive_seed(derive_seed(self.teacher_seed, batch), index)
    }
}

/// Stage times and weights: `(time offset in units of h/2, weight)`.
fn stages(kind: TeacherKind) -> &'static [(f64, f64)] {
    match kind {
        TeacherKind::Rk2 => &[(0.0, 0.5), (1.0, 0.5)],
        TeacherKind::Rk4 => &[(0.0, 1.0 / 6.0), (1.0, 2.0 / 6.0), (1.0, 2.0 / 6.0), (2.0, 1.0 / 6.0)],
    }
}

/// Interval-averaged logits over `[t, t + h]` for each state, every model
/// call conditioned on the half step `h / 2`. Between stages each state is
/// advanced by one jump of size `h / 2` using the cumulative scale.
pub fn teacher_estimate_batch(
    kind: TeacherKind,
    xs: &[&[Token]],
    t: &[f64],
    h: &[f64],
    model: &dyn PosteriorModel,
    scheduler: &Scheduler,
    streams: &mut [PositionStreams],
) -> Result<Array3<f64>> {
    let n = xs.len();
    if t.len() != n || h.len() != n || streams.len() != n {
        return Err(validation("teacher batch inputs have different lengths"));
    }
    for (&tb, &hb) in t.iter().zip(h) {
        TimeInterval::new(tb, hb)?;
    }
    let half: Vec<f64> = h.iter().map(|h| h / 2.0).collect();
    let mut states: Vec<Vec<Token>> = xs.iter().map(|x| x.to_vec()).collect();
    let plan = stages(kind);
    let mut acc: Option<Array3<f64>> = None;
    for (k, &(offset, weight)) in plan.iter().enumerate() {
        let times: Vec<f64> = t.iter().zip(&half).map(|(t, hp)| (t + offset * hp).min(1.0)).collect();
        let refs: Vec<&[Token]> = states.iter().map(|s| &s[..]).collect();
        let logits = model.logits_batch(&refs, &times, &half)?;
        match acc.as_mut() {
            None => acc = Some(&logits * weight),
            Some(a) => a.scaled_add(weight, &logits),
        }
        if k + 1 == plan.len() {
            break;
        }
        for (b, state) in states.iter_mut().enumerate() {
            let post = softmax_rows(logits.index_axis(Axis(0), b), 1.0);
            let scale = scheduler.g_cumulative(TimeInterval::new(times[b], half[b])?);
            let mut changed = vec![false; state.len()];
            jump_positions(state, post.view(), scale, half[b], &mut streams[b], None, &mut changed)?;
        }
    }
    Ok(acc.expect("at least one stage"))
}

fn single(
    kind: TeacherKind,
    x_t: &[Token],
    t: f64,
    h: f64,
    model: &dyn PosteriorModel,
    scheduler: &Scheduler,
    streams: &mut PositionStreams,
) -> Result<Array2<f64>> {
    let out = teacher_estimate_batch(kind, &[x_t], &[t], &[h], model, scheduler, std::slice::from_mut(streams))?;
    Ok(out.index_axis_move(Axis(0), 0))
}

/// `(l1 + 2 l2 + 2 l3 + l4) / 6` from four evaluations and three half-step jumps.
pub fn rk4_estimate(
    x_t: &[Token],
    t: f64,
    h: f64,
    model: &dyn PosteriorModel,
    scheduler: &Scheduler,
    streams: &mut PositionStreams,
) -> Result<Array2<f64>> {
    single(TeacherKind::Rk4, x_t, t, h, model, scheduler, streams)
}

/// `(l1 + l2) / 2` from two evaluations and one half-step jump.
pub fn rk2_estimate(
    x_t: &[Token],
    t: f64,
    h: f64,
    model: &dyn PosteriorModel,
    scheduler: &Scheduler,
    streams: &mut PositionStreams,
) -> Result<Array2<f64>> {
    single(TeacherKind::Rk2, x_t, t, h, model, scheduler, streams)
}
