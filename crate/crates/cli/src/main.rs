use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stepflow_cli::config::RunConfig;
use stepflow_cli::{exit_code, render_timeline_file, run, shortcut_overrides, Command};

#[derive(Parser)]
#[command(name = "stepflow", version, about = "Discrete flow matching: training, sampling and evaluation")]
struct Cli {
    /// TOML run config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set steps=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Sample the checkerboard with the exact denoiser and write occupancy frames.
    Checkerboard,
    /// Pretrain a network with the path loss.
    Train,
    /// Fine-tune a pretrained checkpoint with the shortcut blend.
    Finetune,
    /// Draw sequences from a checkpoint.
    Sample,
    /// Corrupt data sequences and recover them.
    Recover,
    /// Sweep step budgets and write metrics.csv.
    Eval,
    /// Run the oracle battery against a fixture.
    OracleCheck,
    /// Render timeline.json into a standalone HTML page.
    RenderTimeline {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Sub::RenderTimeline { input, output } => render_timeline_file(&input, &output),
        sub => {
            let command = match sub {
                Sub::Checkerboard => Command::Checkerboard,
                Sub::Train => Command::Train,
                Sub::Finetune => Command::Finetune,
                Sub::Sample => Command::Sample,
                Sub::Recover => Command::Recover,
                Sub::Eval => Command::Eval,
                Sub::OracleCheck => Command::OracleCheck,
                Sub::RenderTimeline { .. } => unreachable!(),
            };
            let mut sets = cli.set;
            sets.extend(shortcut_overrides(cli.seed, cli.checkpoint, cli.output_dir));
            RunConfig::load(cli.config.as_deref(), &sets).and_then(|cfg| run(command, &cfg))
        }
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
