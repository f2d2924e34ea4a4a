use std::collections::BTreeSet;
use std::fmt::Write as _;

use anyhow::Result;
use ndarray::Array2;
use stepflow::ctmc_sampler::{sample_chains, Chain, StepGrid};
use stepflow::denoiser::{log_probs_as_logits, ExactBayes, ExactBayesSpec, PosteriorModel};
use stepflow::path_data::{checkerboard_csv, sample_source, CheckerboardSpec, Sequence, SourceKind, Token, Vocab};
use stepflow::rng::{derive_seed, stream_rng};

use super::sample::sampler_config;
use crate::artifacts::{frame_bytes, occupancy, write_atomic};
use crate::config::{FrameFormat, RunConfig};

/// Exact denoiser that maps a fully unmasked state to itself under the mask
/// source. Two positions can unmask in one step to a pair outside the
/// support; under the mask source such tokens never move again, so the
/// chain keeps them rather than failing on zero evidence.
pub struct SettledExact {
    exact: ExactBayes,
}

impl SettledExact {
    pub fn new(spec: ExactBayesSpec) -> Result<Self> {
        Ok(Self { exact: ExactBayes::new(spec)? })
    }
}

impl PosteriorModel for SettledExact {
    fn vocab(&self) -> Vocab {
        self.exact.vocab()
    }

    fn logits(&self, z: &[Token], t: f64, h: f64) -> stepflow::Result<Array2<f64>> {
        let vocab = self.exact.vocab();
        if vocab.mask_id.is_some() && self.exact.spec().source.kind == SourceKind::Mask && !z.iter().any(|&a| vocab.is_mask(a)) {
            let mut p = Array2::zeros((z.len(), vocab.size));
            for (i, &a) in z.iter().enumerate() {
                p[[i, a as usize]] = 1.0;
            }
            return Ok(log_probs_as_logits(&p));
        }
        self.exact.logits(z, t, h)
    }
}

/// Steps after which a frame is written: frame 0 is the source, then up to
/// `frames` evenly spaced steps ending at the last one.
fn frame_steps(budget: usize, frames: usize) -> BTreeSet<usize> {
    let f = frames.min(budget);
    let mut out: BTreeSet<usize> = (1..=f).map(|k| (k * budget).div_ceil(f)).collect();
    out.insert(0);
    out
}

struct FrameRow {
    step: usize,
    t: f64,
    valid: f64,
    jumps: f64,
    unmasked: f64,
}

pub fn cmd_checkerboard(cfg: &RunConfig) -> Result<String> {
    let board = CheckerboardSpec::default();
    let vocab = board.vocab(cfg.source);
    let model = SettledExact::new(ExactBayesSpec {
        support: board.support(),
        source: cfg.source_spec(),
        scheduler: cfg.scheduler()?,
        vocab,
    })?;
    let chains = (0..cfg.chains as u64)
        .map(|k| {
            Ok(Chain {
                init: sample_source(cfg.source_spec(), &vocab, 2, &mut stream_rng(cfg.seed, k))?,
                seed: derive_seed(cfg.seed, k),
                frozen: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let init: Vec<Sequence> = chains.iter().map(|c| c.init.clone()).collect();
    let wanted = frame_steps(cfg.steps, cfg.frames);
    let ext = match cfg.frame_format {
        FrameFormat::Csv => "csv",
        FrameFormat::Pgm => "pgm",
    };
    let frames_dir = cfg.output_dir.join("frames");
    let n = init.len().max(1) as f64;
    let positions = 2.0 * n;

    let summarize = |step: usize, t: f64, states: &[Sequence], jumps: usize| FrameRow {
        step,
        t,
        valid: states.iter().filter(|s| board.is_valid(s)).count() as f64 / n,
        jumps: jumps as f64 / positions,
        unmasked: states.iter().flat_map(|s| s.iter()).filter(|&&a| !vocab.is_mask(a)).count() as f64 / positions,
    };
    let mut rows = vec![summarize(0, 0.0, &init, 0)];
    write_atomic(&frames_dir.join(format!("frame_0000.{ext}")), &frame_bytes(&occupancy(&init, board.grid), cfg.frame_format))?;

    let mut previous = init.clone();
    let mut jumps = 0usize;
    let mut failure: Option<anyhow::Error> = None;
    let mut observer = |step: usize, t: f64, states: &[Sequence]| {
        jumps += states.iter().zip(&previous).map(|(a, b)| a.iter().zip(b.iter()).filter(|(x, y)| x != y).count()).sum::<usize>();
        previous = states.to_vec();
        if wanted.contains(&step) && failure.is_none() {
            rows.push(summarize(step, t, states, jumps));
            let path = frames_dir.join(format!("frame_{step:04}.{ext}"));
            if let Err(e) = write_atomic(&path, &frame_bytes(&occupancy(states, board.grid), cfg.frame_format)) {
                failure = Some(e);
            }
        }
    };
    let recs = sample_chains(&model, StepGrid::new(cfg.steps)?, &sampler_config(cfg)?, chains, false, Some(&mut observer))?;
    if let Some(e) = failure {
        return Err(e);
    }

    let mut summary = String::from("step,t,valid_fraction,mean_jumps,unmasked_fraction\n");
    for r in &rows {
        writeln!(summary, "{},{},{},{},{}", r.step, r.t, r.valid, r.jumps, r.unmasked).expect("string write");
    }
    write_atomic(&cfg.output_dir.join("checkerboard_summary.csv"), summary.as_bytes())?;
    let finals: Vec<Sequence> = recs.into_iter().map(|r| r.final_state).collect();
    write_atomic(&cfg.output_dir.join("checkerboard_samples.csv"), checkerboard_csv(&finals).as_bytes())?;
    let last = rows.last().expect("frame 0 exists");
    Ok(format!(
        "{} chains, S = {}: final valid fraction {:.4}, mean jumps {:.4}, unmasked {:.4}; {} frames",
        cfg.chains,
        cfg.steps,
        last.valid,
        last.jumps,
        last.unmasked,
        rows.len()
    ))
}
