use std::path::PathBuf;
use std::process::ExitCode;

use ca_core::evaluation::parse_alpha_range;
use ca_core::experiment::{
    cmd_eval, cmd_gen, cmd_report, cmd_train, cmd_traverse, ExperimentConfig, SeparatorChoice, TraverseOptions,
};
use ca_core::{CaError, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ca", version, about = "Common/salient separation experiments on synthetic worlds")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint for eval/traverse; defaults to the run's checkpoint.casp.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Run directory; overrides the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// PCA component to traverse.
    #[arg(long, default_value_t = 0)]
    direction: usize,
    /// Traversal grid as start:end:step.
    #[arg(long, default_value = "-2:2:1", allow_hyphen_values = true)]
    alphas: String,
    /// Score the ground-truth projection separator instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
    /// Train: sample datasets inline when `ca gen` has not been run.
    #[arg(long)]
    generate: bool,
}

#[derive(Subcommand, ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Command {
    Gen,
    Train,
    Eval,
    Traverse,
    Report,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CA_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CaError::Config(format!("CA_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CaError::Config(format!("cannot size the thread pool: {e}")))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| CaError::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let choice = SeparatorChoice { checkpoint: cli.checkpoint.clone(), oracle: cli.oracle };
    match cli.command {
        Command::Gen => {
            let m = cmd_gen(&load_config(cli)?)?;
            println!("wrote {}", m.outputs.join(", "));
        }
        Command::Train => {
            let m = cmd_train(&load_config(cli)?, cli.generate)?;
            println!("wrote {}", m.outputs.join(", "));
        }
        Command::Eval => {
            let (report, _) = cmd_eval(&load_config(cli)?, &choice)?;
            for row in &report.separation {
                println!("{}: delta {:.3}", row.attribute, row.delta.value);
            }
            println!("knn-mi {:.4} nats, swap ratio {:.4}", report.mi.knn_nats, report.swap.ratio());
        }
        Command::Traverse => {
            let opts = TraverseOptions {
                separator: choice,
                direction: cli.direction,
                alphas: parse_alpha_range(&cli.alphas)?,
                ..TraverseOptions::default()
            };
            let m = cmd_traverse(&load_config(cli)?, &opts)?;
            println!("wrote {}", m.outputs.join(", "));
        }
        Command::Report => {
            let dir = match (&cli.out, &cli.config) {
                (Some(d), _) => d.clone(),
                (None, Some(_)) => load_config(cli)?.out_dir,
                (None, None) => return Err(CaError::Config("report needs --out or --config".into())),
            };
            println!("wrote {}", cmd_report(&dir)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
