//! Jump-process sampling on a uniform step grid, and corruption recovery.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::PosteriorModel;
use crate::error::{config, validation, Error, Result};
use crate::kinetics::{ScaleMode, Scheduler};
use crate::path_data::{sample_source, Sequence, SourceSpec, Token};
use crate::rng::{derive_seed, stream_rng, PositionStreams};

/// `S` equal steps covering `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid {
    budget: usize,
}

impl StepGrid {
    pub fn new(budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(config("step budget must be positive"));
        }
        Ok(Self { budget })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn time(&self, s: usize) -> f64 {
        s as f64 / self.budget as f64
    }

    pub fn step(&self) -> f64 {
        1.0 / self.budget as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.budget).map(|s| self.time(s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub scheduler: Scheduler,
    pub scale_mode: ScaleMode,
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { scheduler: Scheduler::default(), scale_mode: ScaleMode::Cumulative, temperature: 1.0 }
    }
}

impl SamplerConfig {
    pub fn new(scheduler: Scheduler, scale_mode: ScaleMode) -> Self {
        Self { scheduler, scale_mode, temperature: 1.0 }
    }

    fn check(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// What happened along one sampled path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// `S + 1` states when recording was requested, otherwise empty.
    pub states: Vec<Sequence>,
    pub final_state: Sequence,
    /// Per position, the last step (1-based) that changed it, 0 if none did.
    pub last_change: Vec<usize>,
    /// Per position, how many steps changed it.
    pub changes: Vec<usize>,
    pub nfe: usize,
}

/// Average number of changes per position.
pub fn mean_jumps(record: &TrajectoryRecord) -> f64 {
    if record.changes.is_empty() {
        return 0.0;
    }
    record.changes.iter().sum::<usize>() as f64 / record.changes.len() as f64
}

/// Applies one jump to every non-frozen position given its posterior rows.
///
/// Position `i` leaves its token with probability `1 - exp(-h * scale * (1 - p_i(current)))`
/// and on leaving draws from the remaining entries of its row, renormalized.
/// `changed[i]` is set for positions that moved.
pub fn jump_positions(
    state: &mut [Token],
    posterior: ArrayView2<f64>,
    scale: f64,
    h: f64,
    streams: &mut PositionStreams,
    frozen: Option<&[bool]>,
    changed: &mut [bool],
) -> Result<()> {
    if posterior.nrows() != state.len() || streams.len() != state.len() || changed.len() != state.len() {
        return Err(validation("state, posterior rows, streams and change flags must align"));
    }
    for (i, row) in posterior.axis_iter(Axis(0)).enumerate() {
        changed[i] = false;
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let current = state[i] as usize;
        let stay = row[current];
        let lambda = scale * (1.0 - stay).max(0.0);
        if lambda <= 0.0 {
            continue;
        }
        let rng = streams.position(i);
        let p_jump = -(-h * lambda).exp_m1();
        if rng.random::<f64>() >= p_jump {
            continue;
        }
        let rest: f64 = row.iter().enumerate().filter(|&(a, _)| a != current).map(|(_, p)| p).sum();
        if !(rest > 0.0 && rest.is_finite()) {
            return Err(Error::NumericalGuard(format!(
                "position {i}: jump drawn but off-diagonal mass is {rest}"
            )));
        }
        let mut target = rng.random::<f64>() * rest;
        let mut pick = None;
        for (a, &p) in row.iter().enumerate() {
            if a == current || p <= 0.0 {
                continue;
            }
            pick = Some(a);
            target -= p;
            if target < 0.0 {
                break;
            }
        }
        state[i] = pick.expect("positive off-diagonal mass") as Token;
        changed[i] = true;
    }
    Ok(())
}

/// Exact law of [`jump_positions`] without freezing: row `i` is the
/// distribution of the token at position `i` after the step.
pub fn step_transition(current: &[Token], posterior: ArrayView2<f64>, scale: f64, h: f64) -> Result<Array2<f64>> {
    if posterior.nrows() != current.len() {
        return Err(validation("state and posterior rows must align"));
    }
    let mut out = Array2::zeros(posterior.raw_dim());
    for (i, row) in posterior.axis_iter(Axis(0)).enumerate() {
        let c = current[i] as usize;
        let leave = 1.0 - row[c];
        let p_jump = -(-h * scale * leave.max(0.0)).exp_m1();
        out[[i, c]] = 1.0 - p_jump;
        if leave > 0.0 && p_jump > 0.0 {
            let rest: f64 = row.iter().enumerate().filter(|&(a, _)| a != c).map(|(_, p)| p).sum();
            for (a, &p) in row.iter().enumerate() {
                if a != c {
                    out[[i, a]] = p_jump * p / rest;
                }
            }
        }
    }
    Ok(out)
}

fn step_scale(cfg: &SamplerConfig, t: f64, h: f64) -> Result<f64> {
    cfg.scheduler.scale(cfg.scale_mode, t, h)
}

/// One step of the jump process from `state` at time `t` with step `h`.
/// Uses exactly one posterior evaluation.
pub fn jump_step(
    state: &[Token],
    t: f64,
    h: f64,
    model: &dyn PosteriorModel,
    cfg: &SamplerConfig,
    streams: &mut PositionStreams,
    frozen: Option<&[bool]>,
) -> Result<Sequence> {
    cfg.check()?;
    let scale = step_scale(cfg, t, h)?;
    let post = model.posterior(state, t, h, cfg.temperature)?;
    let mut next = state.to_vec();
    let mut changed = vec![false; state.len()];
    jump_positions(&mut next, post.view(), scale, h, streams, frozen, &mut changed)?;
    Ok(Sequence(next))
}

/// One chain to run: its initial state, seed and optionally frozen positions.
#[derive(Debug, Clone)]
pub struct Chain {
    pub init: Sequence,
    pub seed: u64,
    pub frozen: Option<Vec<bool>>,
}

/// Called after every step with the 1-based step index, the time reached
/// and the current states.
pub type StepObserver<'a> = dyn FnMut(usize, f64, &[Sequence]) + 'a;

/// Runs many chains in lockstep, evaluating the model once per chain per
/// step through a single batched call. Each chain's randomness depends only
/// on its own seed, so results do not depend on how chains are batched.
pub fn sample_chains(
    model: &dyn PosteriorModel,
    grid: StepGrid,
    cfg: &SamplerConfig,
    chains: Vec<Chain>,
    record_states: bool,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<Vec<TrajectoryRecord>> {
    cfg.check()?;
    let vocab = model.vocab();
    let Some(len) = chains.first().map(|c| c.init.len()) else {
        return Ok(Vec::new());
    };
    for c in &chains {
        if c.init.len() != len {
            return Err(validation("chains must share one sequence length"));
        }
        vocab.check(&c.init)?;
        if c.frozen.as_ref().is_some_and(|f| f.len() != len) {
            return Err(validation("frozen mask length differs from the sequence length"));
        }
    }
    let n = chains.len();
    let mut streams: Vec<PositionStreams> = chains.iter().map(|c| PositionStreams::new(c.seed, len)).collect();
    let frozen: Vec<Option<Vec<bool>>> = chains.iter().map(|c| c.frozen.clone()).collect();
    let mut states: Vec<Sequence> = chains.into_iter().map(|c| c.init).collect();
    let mut records: Vec<TrajectoryRecord> = states
        .iter()
        .map(|s| TrajectoryRecord {
            states: if record_states { vec![s.clone()] } else { Vec::new() },
            final_state: Sequence::default(),
            last_change: vec![0; len],
            changes: vec![0; len],
            nfe: 0,
        })
        .collect();
    let h = grid.step();
    let mut changed = vec![false; len];
    for s in 0..grid.budget() {
        let t = grid.time(s);
        let scale = step_scale(cfg, t, h)?;
        let refs: Vec<&[Token]> = states.iter().map(|s| &s[..]).collect();
        let post = model.posterior_batch(&refs, &vec![t; n], &vec![h; n], cfg.temperature)?;
        drop(refs);
        for (b, state) in states.iter_mut().enumerate() {
            let rec = &mut records[b];
            rec.nfe += 1;
            jump_positions(
                state,
                post.index_axis(Axis(0), b),
                scale,
                h,
                &mut streams[b],
                frozen[b].as_deref(),
                &mut changed,
            )?;
            for (i, &c) in changed.iter().enumerate() {
                if c {
                    rec.last_change[i] = s + 1;
                    rec.changes[i] += 1;
                }
            }
            if record_states {
                rec.states.push(state.clone());
            }
        }
        if let Some(obs) = observer.as_mut() {
            obs(s + 1, grid.time(s + 1), &states);
        }
    }
    for (rec, state) in records.iter_mut().zip(states) {
        rec.final_state = state;
    }
    Ok(records)
}

/// Samples one sequence of length `len` from the source and runs the full grid.
pub fn run_sampler(
    source: SourceSpec,
    len: usize,
    model: &dyn PosteriorModel,
    grid: StepGrid,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<(Sequence, TrajectoryRecord)> {
    let vocab = model.vocab();
    let init = sample_source(source, &vocab, len, &mut stream_rng(seed, 0))?;
    let mut out = sample_chains(model, grid, cfg, vec![Chain { init, seed: derive_seed(seed, 1), frozen: None }], true, None)?;
    let rec = out.pop().expect("one chain");
    Ok((rec.final_state.clone(), rec))
}

/// Runs the sampler from a corrupted sequence entered at `t = 0`. With
/// `freeze_context`, unchanged positions are held fixed throughout.
#[allow(clippy::too_many_arguments)]
pub fn recover(
    corrupted: &[Token],
    changed_mask: &[bool],
    model: &dyn PosteriorModel,
    grid: StepGrid,
    cfg: &SamplerConfig,
    seed: u64,
    freeze_context: bool,
) -> Result<TrajectoryRecord> {
    if changed_mask.len() != corrupted.len() {
        return Err(validation("changed mask length differs from the sequence length"));
    }
    let frozen = freeze_context.then(|| changed_mask.iter().map(|c| !c).collect());
    let chain = Chain { init: Sequence(corrupted.to_vec()), seed, frozen };
    Ok(sample_chains(model, grid, cfg, vec![chain], true, None)?.pop().expect("one chain"))
}

/// Long-format CSV: `step,position,token,changed`, one row per position per step.
pub fn trajectory_csv(record: &TrajectoryRecord) -> Result<String> {
    if record.states.is_empty() {
        return Err(validation("trajectory was run without recording states"));
    }
    let mut out = String::from("step,position,token,changed\n");
    for (s, state) in record.states.iter().enumerate() {
        for (i, &tok) in state.iter().enumerate() {
            let changed = s > 0 && record.states[s - 1][i] != tok;
            writeln!(out, "{s},{i},{tok},{}", u8::from(changed)).expect("string write");
        }
    }
    Ok(out)
}
