//! Command-line front end for the stepflow engine.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use artifacts::{render_timeline, write_atomic, TimelineArtifact};
use commands::AcceptanceFailure;
use config::RunConfig;

/// Subcommands that run from a resolved config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Checkerboard,
    Train,
    Finetune,
    Sample,
    Recover,
    Eval,
    OracleCheck,
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<String> {
    match command {
        Command::Checkerboard => commands::cmd_checkerboard(cfg),
        Command::Train => commands::cmd_train(cfg),
        Command::Finetune => commands::cmd_finetune(cfg),
        Command::Sample => commands::cmd_sample(cfg),
        Command::Recover => commands::cmd_recover(cfg),
        Command::Eval => commands::cmd_eval(cfg),
        Command::OracleCheck => commands::cmd_oracle_check(cfg),
    }
}

pub fn render_timeline_file(input: &Path, output: &Path) -> Result<String> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let artifacts: Vec<TimelineArtifact> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
    let html = render_timeline(&artifacts)?;
    write_atomic(output, html.as_bytes())?;
    Ok(format!("rendered {} timeline(s) to {}", artifacts.len(), output.display()))
}

/// Exit code for a failed run: 3 for a failed acceptance battery, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<AcceptanceFailure>().is_some() {
        3
    } else {
        2
    }
}

/// Converts the shortcut flags into `--set` overrides, which are applied last.
pub fn shortcut_overrides(seed: Option<u64>, checkpoint: Option<PathBuf>, output_dir: Option<PathBuf>) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(s) = seed {
        out.push(format!("seed={s}"));
    }
    if let Some(p) = checkpoint {
        out.push(format!("checkpoint={}", toml::Value::String(p.display().to_string())));
    }
    if let Some(p) = output_dir {
        out.push(format!("output_dir={}", toml::Value::String(p.display().to_string())));
    }
    out
}
