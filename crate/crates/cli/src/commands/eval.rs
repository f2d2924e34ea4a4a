use std::sync::Mutex;

use anyhow::Result;
use ndarray::{Array2, Array3};
use stepflow::ctmc_sampler::{mean_jumps, recover, sample_chains, Chain, StepGrid};
use stepflow::denoiser::PosteriorModel;
use stepflow::kinetics::ScaleMode;
use stepflow::path_data::{corrupt, sample_source, Sequence, Token, Vocab};
use stepflow::rng::{derive_seed, stream_rng};
use stepflow::trainer_eval::{
    entropy_metric, metrics_csv, nll_eval, token_accuracy, ExplicitReference, MetricsRow, SequenceReference,
    TrigramReference,
};

use super::sample::sampler_config;
use super::{data_for, load_model, Data};
use crate::artifacts::write_atomic;
use crate::config::RunConfig;

const EVAL_SALT: u64 = 0x6576_616c;

/// Passes evaluations through and keeps the running mean entropy of every
/// posterior row it returns.
struct EntropyTap<'a> {
    inner: &'a dyn PosteriorModel,
    acc: Mutex<(f64, usize)>,
}

impl<'a> EntropyTap<'a> {
    fn new(inner: &'a dyn PosteriorModel) -> Self {
        Self { inner, acc: Mutex::new((0.0, 0)) }
    }

    fn mean(&self) -> f64 {
        let (sum, n) = *self.acc.lock().expect("entropy accumulator");
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

impl PosteriorModel for EntropyTap<'_> {
    fn vocab(&self) -> Vocab {
        self.inner.vocab()
    }

    fn logits(&self, z: &[Token], t: f64, h: f64) -> stepflow::Result<Array2<f64>> {
        self.inner.logits(z, t, h)
    }

    fn posterior_batch(&self, zs: &[&[Token]], t: &[f64], h: &[f64], temperature: f64) -> stepflow::Result<Array3<f64>> {
        let post = self.inner.posterior_batch(zs, t, h, temperature)?;
        let (b, l, v) = post.dim();
        let rows = post.view().into_shape_with_order((b * l, v)).expect("contiguous posterior");
        let mut acc = self.acc.lock().expect("entropy accumulator");
        acc.0 += entropy_metric(rows) * (b * l) as f64;
        acc.1 += b * l;
        Ok(post)
    }
}

fn mode_label(mode: ScaleMode) -> &'static str {
    match mode {
        ScaleMode::Instantaneous => "instantaneous",
        ScaleMode::Cumulative => "cumulative",
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let loaded = load_model(&cfg.checkpoint)?;
    let data = data_for(cfg, &loaded)?;
    let model = &loaded.model;
    let vocab = data.vocab();
    let len = data.seq_len();
    let sc = sampler_config(cfg)?;
    let reference: Box<dyn SequenceReference> = match &data {
        Data::Board(d) => Box::new(ExplicitReference::new(&d.spec.support(), vocab.data_size(), 1e-4)?),
        Data::Text(c) => Box::new(TrigramReference::fit(&c.blocks, vocab.size)),
    };

    let mut rows = Vec::new();
    for &budget in &cfg.eval_budgets {
        let grid = StepGrid::new(budget)?;
        // Chain k starts from the same noise at every budget.
        let chains = (0..cfg.eval_chains as u64)
            .map(|k| {
                Ok(Chain {
                    init: sample_source(cfg.source_spec(), &vocab, len, &mut stream_rng(cfg.seed, k))?,
                    seed: derive_seed(cfg.seed ^ EVAL_SALT, k),
                    frozen: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tap = EntropyTap::new(model);
        let recs = sample_chains(&tap, grid, &sc, chains, false, None)?;
        let samples: Vec<Sequence> = recs.iter().map(|r| r.final_state.clone()).collect();
        let jumps = recs.iter().map(mean_jumps).sum::<f64>() / recs.len().max(1) as f64;
        let valid = match &data {
            Data::Board(d) => Some(samples.iter().filter(|s| d.spec.is_valid(s)).count() as f64 / samples.len() as f64),
            Data::Text(_) => None,
        };

        let (mut predicted, mut truth, mut changed) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..cfg.eval_chains as u64 {
            let clean = data.sample(&mut stream_rng(cfg.seed ^ EVAL_SALT, k));
            let (noisy, mask) = corrupt(&clean, cfg.corruption, &vocab, &mut stream_rng(cfg.seed ^ EVAL_SALT, k + (1 << 32)))?;
            let rec = recover(&noisy, &mask, model, grid, &sc, derive_seed(cfg.seed, k), cfg.freeze_context)?;
            predicted.extend_from_slice(&rec.final_state);
            truth.extend_from_slice(&clean);
            changed.extend_from_slice(&mask);
        }
        rows.push(MetricsRow {
            label: mode_label(cfg.scale_mode).into(),
            steps: budget,
            entropy_nats: tap.mean(),
            token_accuracy: Some(token_accuracy(&predicted, &truth, &changed)?),
            nll_nats_per_token: Some(nll_eval(&samples, reference.as_ref())?),
            mean_jumps: jumps,
            tv: None,
            valid_fraction: valid,
        });
    }
    write_atomic(&cfg.output_dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    let best = rows
        .iter()
        .filter_map(|r| r.nll_nats_per_token.map(|n| (r.steps, n)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    Ok(format!("evaluated {} budgets; lowest nll {:.4} nats/token at S = {}", rows.len(), best.1, best.0))
}
