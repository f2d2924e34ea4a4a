//! Pretraining and step-aware fine-tuning of the neural denoiser.

use std::fmt::Write as _;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::NeuralDenoiser;
use crate::error::{config, Error, Result};
use crate::kinetics::{ScaleMode, Scheduler, TimeInterval};
use crate::objective::{dfm_loss_grad, kl_distill_grad, sample_h, BlendConfig, PolicyKind, StepPolicy};
use crate::path_data::{sample_conditional_xt, sample_source, Dataset, Sequence, SourceSpec};
use crate::rng::{stream_rng, PositionStreams};
use crate::shortcut_teacher::{teacher_estimate_batch, EmaRegistry, TeacherConfig, DEFAULT_EMA_DECAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default = "uniform_policy")]
    pub policy: StepPolicy,
    #[serde(default)]
    pub blend: BlendConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub scheduler: Scheduler,
    #[serde(default = "uniform_source")]
    pub source: SourceSpec,
    /// Scale applied to the path loss. `None` picks instantaneous for
    /// pretraining and cumulative for fine-tuning.
    #[serde(default)]
    pub scale_mode: Option<ScaleMode>,
    /// Gradient L2 norm ceiling; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
}

fn uniform_policy() -> StepPolicy {
    StepPolicy::new(PolicyKind::Pu)
}

fn default_ema() -> f64 {
    DEFAULT_EMA_DECAY
}

fn uniform_source() -> SourceSpec {
    SourceSpec::uniform()
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl TrainConfig {
    pub fn new(phase: Phase, batch_size: usize, steps: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            phase,
            batch_size,
            steps,
            learning_rate,
            seed,
            policy: uniform_policy(),
            blend: BlendConfig::default(),
            teacher: TeacherConfig::default(),
            ema_decay: default_ema(),
            scheduler: Scheduler::default(),
            source: uniform_source(),
            scale_mode: None,
            grad_clip: default_clip(),
        }
    }

    pub fn scale_mode(&self) -> ScaleMode {
        self.scale_mode.unwrap_or(match self.phase {
            Phase::Pretrain => ScaleMode::Instantaneous,
            Phase::Finetune => ScaleMode::Cumulative,
        })
    }

    pub fn check(&self, phase: Phase) -> Result<()> {
        if self.phase != phase {
            return Err(config(format!("loop expects phase {phase:?}, config has {:?}", self.phase)));
        }
        if self.batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(config(format!("learning rate {} must be finite and nonnegative", self.learning_rate)));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(config(format!("gradient clip {c} must be positive")));
            }
        }
        self.blend.check()?;
        Scheduler::new(self.scheduler.kind, self.scheduler.clamp_epsilon)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Dfm,
    Distill,
    Mixed,
}

/// Batch-mean loss of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub branch: Branch,
    /// Mean step size over the batch.
    pub h: f64,
}

pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut out = String::from("step,loss,branch,h\n");
    for r in curve {
        let branch = match r.branch {
            Branch::Dfm => "dfm",
            Branch::Distill => "distill",
            Branch::Mixed => "mixed",
        };
        writeln!(out, "{},{},{},{}", r.step, r.loss, branch, r.h).expect("string write");
    }
    out
}

struct Example {
    x1: Sequence,
    x_t: Sequence,
    t: f64,
    h: f64,
}

fn draw_example<D: Dataset, R: Rng>(
    data: &D,
    cfg: &TrainConfig,
    t: f64,
    h: f64,
    rng: &mut R,
) -> Result<Example> {
    let vocab = data.vocab();
    let x1 = data.sample(rng);
    let x0 = sample_source(cfg.source, &vocab, x1.len(), rng)?;
    let x_t = sample_conditional_xt(&x0, &x1, t, &cfg.scheduler, rng)?;
    Ok(Example { x1, x_t, t, h })
}

fn path_scale(cfg: &TrainConfig, t: f64, h: f64) -> Result<f64> {
    cfg.scheduler.scale(cfg.scale_mode(), t, h)
}

/// Row `b` of a `B x (L * V)` logit matrix as an `L x V` view.
fn sample_view(logits: &Array2<f64>, b: usize, len: usize) -> ArrayView2<'_, f64> {
    let v = logits.ncols() / len;
    logits.row(b).into_shape_with_order((len, v)).expect("contiguous row")
}

fn guard(step: usize, loss: f64, grad: &[f64]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence { step, detail: format!("loss is {loss}") });
    }
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence { step, detail: format!("gradient entry {k} is {}", grad[k]) });
    }
    Ok(())
}

fn sgd(model: &mut NeuralDenoiser, grad: &mut [f64], cfg: &TrainConfig) {
    if let Some(clip) = cfg.grad_clip {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            let f = clip / norm;
            grad.iter_mut().for_each(|g| *g *= f);
        }
    }
    let lr = cfg.learning_rate;
    for (p, g) in model.params_mut().iter_mut().zip(grad.iter()) {
        *p -= lr * g;
    }
}

/// Path-loss gradient for the examples at `idx`, accumulated into `dlogits`
/// with weight `1 / batch`. Returns the summed loss.
fn path_terms(
    ex: &[Example],
    idx: &[usize],
    logits: &Array2<f64>,
    dlogits: &mut Array2<f64>,
    cfg: &TrainConfig,
    len: usize,
) -> Result<f64> {
    let n = ex.len() as f64;
    let mut total = 0.0;
    for &b in idx {
        let e = &ex[b];
        let scale = path_scale(cfg, e.t, e.h)?;
        let (loss, g) = dfm_loss_grad(sample_view(logits, b, len), &e.x_t, &e.x1, scale)?;
        total += loss;
        let flat = g.into_shape_with_order(logits.ncols()).expect("contiguous grad");
        dlogits.row_mut(b).scaled_add(1.0 / n, &flat);
    }
    Ok(total)
}

/// Plain DFM pretraining: `t ~ U[0, 1 - eps)`, step size drawn from the
/// policy only as a conditioning input.
pub fn pretrain_loop<D: Dataset>(
    cfg: &TrainConfig,
    data: &D,
    model: &mut NeuralDenoiser,
) -> Result<Vec<LossRecord>> {
    cfg.check(Phase::Pretrain)?;
    let len = model.spec().seq_len;
    let t_max = cfg.scheduler.clamp_boundary();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = stream_rng(cfg.seed, step as u64);
        let mut ex = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let t = rng.random::<f64>() * t_max;
            let h = sample_h(&cfg.policy, step, &mut rng);
            ex.push(draw_example(data, cfg, t, h, &mut rng)?);
        }
        let zs: Vec<&[_]> = ex.iter().map(|e| &e.x_t[..]).collect();
        let ts: Vec<f64> = ex.iter().map(|e| e.t).collect();
        let hs: Vec<f64> = ex.iter().map(|e| e.h).collect();
        let (logits, cache) = model.forward_batch(&zs, &ts, &hs)?;
        let mut dlogits = Array2::zeros(logits.raw_dim());
        let idx: Vec<usize> = (0..ex.len()).collect();
        let loss = path_terms(&ex, &idx, &logits, &mut dlogits, cfg, len)? / ex.len() as f64;
        let mut grad = model.backward(&cache, &dlogits)?;
        guard(step, loss, &grad)?;
        sgd(model, &mut grad, cfg);
        curve.push(LossRecord { step, loss, branch: Branch::Dfm, h: hs.iter().sum::<f64>() / hs.len() as f64 });
    }
    Ok(curve)
}

/// Step-aware fine-tuning: `h` from the policy, `t ~ U[0, 1 - h]`; path loss
/// when `h < tau`, otherwise KL to the shortcut teacher built from the EMA
/// shadow (or the current student when `use_ema` is off). The shadow is
/// updated after every optimizer step.
pub fn finetune_loop<D: Dataset>(
    cfg: &TrainConfig,
    data: &D,
    model: &mut NeuralDenoiser,
    ema: &mut EmaRegistry,
) -> Result<Vec<LossRecord>> {
    cfg.check(Phase::Finetune)?;
    if ema.shadow().len() != model.params().len() {
        return Err(config("EMA shadow does not match the student's parameter count"));
    }
    let len = model.spec().seq_len;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = stream_rng(cfg.seed, step as u64);
        let mut ex = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let h = sample_h(&cfg.policy, step, &mut rng);
            let t = rng.random::<f64>() * (1.0 - h);
            ex.push(draw_example(data, cfg, t, h, &mut rng)?);
        }
        let zs: Vec<&[_]> = ex.iter().map(|e| &e.x_t[..]).collect();
        let ts: Vec<f64> = ex.iter().map(|e| e.t).collect();
        let hs: Vec<f64> = ex.iter().map(|e| e.h).collect();
        let (logits, cache) = model.forward_batch(&zs, &ts, &hs)?;
        let mut dlogits = Array2::zeros(logits.raw_dim());

        let (path, distill): (Vec<usize>, Vec<usize>) = (0..ex.len()).partition(|&b| cfg.blend.uses_path_loss(hs[b]));
        let mut total = path_terms(&ex, &path, &logits, &mut dlogits, cfg, len)?;
        if !distill.is_empty() {
            let teacher_logits = teacher_logits(cfg, model, ema, &ex, &distill, step)?;
            let n = ex.len() as f64;
            for (k, &b) in distill.iter().enumerate() {
                let (loss, g) = kl_distill_grad(
                    teacher_logits.slice(s![k, .., ..]),
                    sample_view(&logits, b, len),
                    cfg.blend.temperature,
                )?;
                total += loss;
                let flat = g.into_shape_with_order(logits.ncols()).expect("contiguous grad");
                dlogits.row_mut(b).scaled_add(1.0 / n, &flat);
            }
        }
        let loss = total / ex.len() as f64;
        let mut grad = model.backward(&cache, &dlogits)?;
        guard(step, loss, &grad)?;
        sgd(model, &mut grad, cfg);
        ema.update(model.params())?;
        let branch = match (path.is_empty(), distill.is_empty()) {
            (false, true) => Branch::Dfm,
            (true, false) => Branch::Distill,
            _ => Branch::Mixed,
        };
        curve.push(LossRecord { step, loss, branch, h: hs.iter().sum::<f64>() / hs.len() as f64 });
    }
    Ok(curve)
}

fn teacher_logits(
    cfg: &TrainConfig,
    student: &NeuralDenoiser,
    ema: &EmaRegistry,
    ex: &[Example],
    idx: &[usize],
    step: usize,
) -> Result<Array3<f64>> {
    let snapshot;
    let teacher = if cfg.teacher.use_ema {
        snapshot = NeuralDenoiser::from_params(student.spec().clone(), ema.shadow().to_vec())?;
        &snapshot
    } else {
        student
    };
    let xs: Vec<&[_]> = idx.iter().map(|&b| &ex[b].x_t[..]).collect();
    let ts: Vec<f64> = idx.iter().map(|&b| ex[b].t).collect();
    let hs: Vec<f64> = idx.iter().map(|&b| ex[b].h).collect();
    for (&t, &h) in ts.iter().zip(&hs) {
        TimeInterval::new(t, h)?;
    }
    let len = student.spec().seq_len;
    let mut streams: Vec<PositionStreams> =
        idx.iter().map(|&b| PositionStreams::new(cfg.teacher.example_seed(step as u64, b as u64), len)).collect();
    teacher_estimate_batch(cfg.teacher.kind, &xs, &ts, &hs, teacher, &cfg.scheduler, &mut streams)
}
