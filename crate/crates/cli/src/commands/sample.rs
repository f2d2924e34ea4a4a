use std::fmt::Write as _;

use anyhow::Result;
use serde_json::json;
use stepflow::ctmc_sampler::{mean_jumps, recover, sample_chains, trajectory_csv, Chain, SamplerConfig, StepGrid};
use stepflow::path_data::{corrupt, sample_source};
use stepflow::rng::{derive_seed, stream_rng};
use stepflow::trainer_eval::token_accuracy;

use super::{data_for, load_model};
use crate::artifacts::{write_atomic, TimelineArtifact};
use crate::config::RunConfig;

/// Salts keep the source draw, the jump streams and the corruption draw apart.
const JUMP_SALT: u64 = 0x6a75_6d70;
const CORRUPT_SALT: u64 = 0x636f_7272;

pub fn sampler_config(cfg: &RunConfig) -> Result<SamplerConfig> {
    let mut sc = SamplerConfig::new(cfg.scheduler()?, cfg.scale_mode);
    sc.temperature = cfg.temperature;
    Ok(sc)
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<String> {
    let loaded = load_model(&cfg.checkpoint)?;
    let model = &loaded.model;
    let (vocab, len) = (model.spec().vocab, model.spec().seq_len);
    let chains = (0..cfg.samples as u64)
        .map(|k| {
            Ok(Chain {
                init: sample_source(cfg.source_spec(), &vocab, len, &mut stream_rng(cfg.seed, k))?,
                seed: derive_seed(cfg.seed ^ JUMP_SALT, k),
                frozen: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let recs = sample_chains(model, StepGrid::new(cfg.steps)?, &sampler_config(cfg)?, chains, true, None)?;

    let mut text = String::new();
    let mut summary = String::from("sample,nfe,mean_jumps\n");
    let mut timelines = Vec::with_capacity(recs.len());
    for (k, r) in recs.iter().enumerate() {
        let tokens = &r.final_state;
        writeln!(text, "{}", loaded.decoder.text(tokens, vocab).replace('\n', "\\n")).expect("string write");
        writeln!(summary, "{k},{},{}", r.nfe, mean_jumps(r)).expect("string write");
        timelines.push(TimelineArtifact::new(
            tokens.to_vec(),
            loaded.decoder.pieces(tokens, vocab),
            &r.last_change,
            cfg.steps,
        )?);
    }
    let out = &cfg.output_dir;
    write_atomic(&out.join("samples.txt"), text.as_bytes())?;
    write_atomic(&out.join("sample_summary.csv"), summary.as_bytes())?;
    write_atomic(&out.join("timeline.json"), serde_json::to_string_pretty(&timelines)?.as_bytes())?;
    write_atomic(&out.join("trajectory.csv"), trajectory_csv(&recs[0])?.as_bytes())?;
    let nfe: Vec<usize> = recs.iter().map(|r| r.nfe).collect();
    Ok(format!("sampled {} sequence(s) of length {len} with S = {}; nfe = {}", recs.len(), cfg.steps, nfe[0]))
}

pub fn cmd_recover(cfg: &RunConfig) -> Result<String> {
    let loaded = load_model(&cfg.checkpoint)?;
    let data = data_for(cfg, &loaded)?;
    let model = &loaded.model;
    let vocab = data.vocab();
    let sc = sampler_config(cfg)?;
    let grid = StepGrid::new(cfg.steps)?;

    let mut table = String::from("index,changed,accuracy,nfe\n");
    let mut lines = String::new();
    let mut timelines = Vec::new();
    let mut total = 0.0;
    for k in 0..cfg.samples as u64 {
        let clean = data.sample(&mut stream_rng(cfg.seed, k));
        let (corrupted, changed) = corrupt(&clean, cfg.corruption, &vocab, &mut stream_rng(cfg.seed ^ CORRUPT_SALT, k))?;
        let rec = recover(&corrupted, &changed, model, grid, &sc, derive_seed(cfg.seed ^ JUMP_SALT, k), cfg.freeze_context)?;
        let acc = token_accuracy(&rec.final_state, &clean, &changed)?;
        total += acc;
        writeln!(table, "{k},{},{acc},{}", changed.iter().filter(|&&c| c).count(), rec.nfe).expect("string write");
        let row = json!({
            "clean": loaded.decoder.text(&clean, vocab),
            "corrupted": loaded.decoder.text(&corrupted, vocab),
            "recovered": loaded.decoder.text(&rec.final_state, vocab),
        });
        writeln!(lines, "{row}").expect("string write");
        timelines.push(TimelineArtifact::new(
            rec.final_state.to_vec(),
            loaded.decoder.pieces(&rec.final_state, vocab),
            &rec.last_change,
            cfg.steps,
        )?);
    }
    let out = &cfg.output_dir;
    write_atomic(&out.join("recover.csv"), table.as_bytes())?;
    write_atomic(&out.join("recovered.jsonl"), lines.as_bytes())?;
    write_atomic(&out.join("timeline.json"), serde_json::to_string_pretty(&timelines)?.as_bytes())?;
    Ok(format!(
        "recovered {} sequence(s), mean accuracy on changed tokens {:.4} (freeze_context = {})",
        cfg.samples,
        total / cfg.samples as f64,
        cfg.freeze_context
    ))
}
