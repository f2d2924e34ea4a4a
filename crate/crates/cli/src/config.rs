//! Run configuration: one TOML file, every key optional, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stepflow::denoiser::NeuralDenoiserSpec;
use stepflow::kinetics::{ScaleMode, Scheduler, SchedulerKind, DEFAULT_CLAMP_EPSILON};
use stepflow::objective::{BlendConfig, PolicyKind, StepPolicy, STEP_GRID};
use stepflow::path_data::{SourceKind, SourceSpec, Vocab};
use stepflow::shortcut_teacher::{TeacherConfig, TeacherKind};
use stepflow::trainer_eval::{Phase, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Checkerboard,
    Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    #[default]
    Csv,
    Pgm,
}

/// Every field has a default; see `README.md` for the full table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Schema version, currently 1.
    pub version: u32,
    pub seed: u64,
    pub scheduler: SchedulerKind,
    pub clamp_epsilon: f64,
    pub source: SourceKind,
    pub dataset: DatasetKind,
    /// Plain text, one document per line. Required for the corpus dataset.
    pub corpus: Option<PathBuf>,
    /// Cap on the byte vocabulary, reserved ids included.
    pub max_vocab: usize,
    /// Block length for the corpus; the checkerboard is always 2.
    pub seq_len: usize,
    pub scale_mode: ScaleMode,
    /// Sampling grid budget S.
    pub steps: usize,
    pub samples: usize,
    pub policy: PolicyKind,
    pub tau: f64,
    pub temperature: f64,
    pub teacher: TeacherKind,
    pub use_ema: bool,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub finetune_steps: usize,
    pub learning_rate: f64,
    /// Gradient norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub hidden: usize,
    pub depth: usize,
    pub frequencies: usize,
    pub cond_dim: usize,
    /// Written by `train`, read by `finetune`, `sample`, `recover` and `eval`.
    pub checkpoint: PathBuf,
    /// Written by `finetune`.
    pub finetuned: PathBuf,
    pub output_dir: PathBuf,
    /// Fraction of positions replaced before recovery.
    pub corruption: f64,
    pub freeze_context: bool,
    pub eval_budgets: Vec<usize>,
    pub eval_chains: usize,
    /// Chains run by the `checkerboard` command.
    pub chains: usize,
    /// Frames emitted by the `checkerboard` command (at most one per step).
    pub frames: usize,
    pub frame_format: FrameFormat,
    /// `two_state`, `sixteen_state`, or a path to an exact-denoiser JSON fixture.
    pub fixture: String,
    pub oracle_chains: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            scheduler: SchedulerKind::Linear,
            clamp_epsilon: DEFAULT_CLAMP_EPSILON,
            source: SourceKind::Uniform,
            dataset: DatasetKind::Checkerboard,
            corpus: None,
            max_vocab: 96,
            seq_len: 128,
            scale_mode: ScaleMode::Cumulative,
            steps: 8,
            samples: 1,
            policy: PolicyKind::Pu,
            tau: STEP_GRID[1],
            temperature: 1.0,
            teacher: TeacherKind::Rk4,
            use_ema: true,
            ema_decay: 0.999,
            batch_size: 64,
            train_steps: 2000,
            finetune_steps: 1000,
            learning_rate: 0.1,
            grad_clip: 1.0,
            hidden: 128,
            depth: 2,
            frequencies: 8,
            cond_dim: 64,
            checkpoint: PathBuf::from("out/pretrained.ckpt"),
            finetuned: PathBuf::from("out/finetuned.ckpt"),
            output_dir: PathBuf::from("out"),
            corruption: 0.5,
            freeze_context: true,
            eval_budgets: vec![1, 2, 4, 8, 16, 32, 64],
            eval_chains: 512,
            chains: 4096,
            frames: 100,
            frame_format: FrameFormat::Csv,
            fixture: "two_state".into(),
            oracle_chains: 100_000,
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                bail!("override {item:?} is not of the form key=value");
            };
            table.insert(key.trim().to_string(), override_value(value.trim()));
        }
        let cfg: RunConfig = table.try_into().context("invalid configuration")?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("config version {} is not supported (expected {CONFIG_VERSION})", self.version);
        }
        self.scheduler()?;
        if self.steps == 0 || self.samples == 0 || self.batch_size == 0 || self.seq_len == 0 {
            bail!("steps, samples, batch_size and seq_len must be positive");
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            bail!("corruption {} outside [0, 1]", self.corruption);
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            bail!("ema_decay {} outside [0, 1)", self.ema_decay);
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            bail!("grad_clip {} must be finite and nonnegative", self.grad_clip);
        }
        if self.eval_budgets.is_empty() || self.eval_budgets.contains(&0) {
            bail!("eval_budgets must be a non-empty list of positive budgets");
        }
        self.blend().check()?;
        Ok(())
    }

    pub fn scheduler(&self) -> Result<Scheduler> {
        Ok(Scheduler::new(self.scheduler, self.clamp_epsilon)?)
    }

    pub fn source_spec(&self) -> SourceSpec {
        SourceSpec { kind: self.source }
    }

    pub fn blend(&self) -> BlendConfig {
        BlendConfig { tau: self.tau, temperature: self.temperature }
    }

    pub fn network(&self, vocab: Vocab, seq_len: usize) -> NeuralDenoiserSpec {
        NeuralDenoiserSpec {
            hidden: self.hidden,
            depth: self.depth,
            frequencies: self.frequencies,
            cond_dim: self.cond_dim,
            ..NeuralDenoiserSpec::new(vocab, seq_len)
        }
    }

    pub fn train_config(&self, phase: Phase) -> Result<TrainConfig> {
        let steps = match phase {
            Phase::Pretrain => self.train_steps,
            Phase::Finetune => self.finetune_steps,
        };
        let mut cfg = TrainConfig::new(phase, self.batch_size, steps, self.learning_rate, self.seed);
        cfg.policy = StepPolicy::new(self.policy);
        cfg.blend = self.blend();
        cfg.teacher = TeacherConfig { kind: self.teacher, use_ema: self.use_ema, teacher_seed: self.seed };
        cfg.ema_decay = self.ema_decay;
        cfg.scheduler = self.scheduler()?;
        cfg.source = self.source_spec();
        cfg.grad_clip = (self.grad_clip > 0.0).then_some(self.grad_clip);
        Ok(cfg)
    }
}
