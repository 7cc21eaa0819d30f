use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use concept_core::gradcheck::suite;
use concept_core::pipeline::{self, load_checkpoint, load_data, run_eval, run_train, synth_gen};
use concept_core::{Protocol, RunConfig};

/// Episodic-memory concept learner.
#[derive(Parser)]
#[command(name = "concept", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config, writing checkpoints and a log.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the held-out classes.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
    },
    /// Print parameter shapes and the memory after one greedy episode.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Draw the episode from this config's evaluation data.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check every differentiable operation against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Materialize a synthetic dataset as CSV.
    SynthGen {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Mann,
    Nway,
    Zeroshot,
    Tradeoff,
    LabelTransfer,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Mann => Protocol::Mann,
            ProtocolArg::Nway => Protocol::Nway,
            ProtocolArg::Zeroshot => Protocol::Zeroshot,
            ProtocolArg::Tradeoff => Protocol::Tradeoff,
            ProtocolArg::LabelTransfer => Protocol::LabelTransfer,
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("config {}", path.display()))
}

fn train(config: &Path) -> Result<()> {
    let config = load_config(config)?;
    let start = Instant::now();
    let outcome = run_train(&config)?;
    println!("stage\tepisodes\tmean_return\tperfect_rate");
    for s in &outcome.log.stages {
        println!("{}\t{}\t{:.3}\t{:.3}", s.stage, s.episodes, s.mean_return, s.perfect_rate);
    }
    println!(
        "wrote {} ({} checkpoints) in {:.1}s",
        outcome.model_path.display(),
        outcome.checkpoints.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn eval(config: &Path, checkpoint: &Path, protocol: ProtocolArg) -> Result<()> {
    let config = load_config(config)?;
    let outcome = run_eval(&config, checkpoint, protocol.into())?;
    print!("{}", outcome.table);
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn inspect(checkpoint: &Path, config: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let data = match config {
        Some(path) => {
            let mut config = load_config(path)?;
            config.model = model.config.clone();
            Some(load_data(&config)?.eval)
        }
        None => None,
    };
    print!("{}", pipeline::inspect(&model, data.as_ref())?);
    Ok(())
}

fn gradcheck(seeds: usize, tolerance: f64) -> Result<()> {
    let start = Instant::now();
    let results = suite(seeds, tolerance)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!("{status}  {:<18} max rel. err {:.2e} (seed {})", r.op, r.max_rel_err, r.worst_seed);
    }
    println!(
        "{} ops, {seeds} seeds, tolerance {tolerance:e}, {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        bail!("{failed} operation(s) failed the gradient check");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => train(&config),
        Command::Eval {
            config,
            checkpoint,
            protocol,
        } => eval(&config, &checkpoint, protocol),
        Command::Inspect { checkpoint, config } => inspect(&checkpoint, config.as_deref()),
        Command::Gradcheck { seeds, tolerance } => gradcheck(seeds, tolerance),
        Command::SynthGen { spec, output } => {
            let meta = synth_gen(&spec, &output)?;
            println!(
                "wrote {} classes of dimension {} to {} (separability {:.3})",
                meta.spec.n_classes,
                meta.spec.dimension,
                output.display(),
                meta.separability
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
