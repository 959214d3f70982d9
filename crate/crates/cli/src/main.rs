use clap::{Args, Parser, Subcommand};
use minn::harness::{self, ExperimentConfig, ExperimentKind, Row, RunOutput};
use minn::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

/// Experiment runner for metasurface-integrated neural networks.
#[derive(Parser)]
#[command(name = "minn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a link end to end and write metrics and a checkpoint.
    Train(Common),
    /// Evaluate a trained checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load; defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test SNR in dB; defaults to the channel SNR.
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<f64>,
    },
    /// Run the extreme-learning-machine benchmark.
    Elm(Common),
    /// Train two links and align their encoders with a digital and a metasurface map.
    Align(Common),
    /// Run every point of the config's `[sweep]` grid.
    Sweep(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| e.in_stage("config"))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn report(run: &RunOutput) {
    println!("{}", Row::HEADER.join("\t"));
    for r in &run.rows {
        println!("{}", r.fields().join("\t"));
    }
    println!("metrics: {}", run.metrics_path.display());
    println!("manifest: {}", run.manifest_path.display());
    if let Some(p) = &run.checkpoint_path {
        println!("checkpoint: {}", p.display());
    }
}

fn with_kind(mut cfg: ExperimentConfig, kind: ExperimentKind) -> ExperimentConfig {
    cfg.kind = kind;
    cfg
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            if !cfg.kind.trains_link() {
                let msg = format!("`train` needs a link-training kind, config has `{}`", cfg.kind.name());
                return Err(Error::Config(msg).in_stage("config"));
            }
            report(&harness::run_experiment(&cfg)?);
        }
        Command::Eval { common, checkpoint, snr_db } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output.join("model.ckpt"));
            let ev = harness::evaluate_checkpoint(&cfg, &ckpt, snr_db)?;
            println!("accuracy\ttx_power");
            println!("{}\t{}", ev.accuracy, ev.tx_power);
        }
        Command::Elm(c) => report(&harness::run_experiment(&with_kind(load(&c)?, ExperimentKind::ElmBenchmark))?),
        Command::Align(c) => report(&harness::run_experiment(&with_kind(load(&c)?, ExperimentKind::Alignment))?),
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let out = harness::sweep(&cfg, &cfg.sweep)?;
            println!("runs: {}", out.runs);
            println!("table: {}", out.csv_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e = match e {
                e @ Error::Stage { .. } => e,
                e => e.in_stage("run"),
            };
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
