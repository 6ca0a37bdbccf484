use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybrid_dynamics::models::MethodKind;
use hybrid_dynamics::pipeline::{self, ExperimentConfig, OUTPUT_ENV};
use hybrid_dynamics::Result;

/// Identify hybrid robot dynamics models from motion data.
#[derive(Parser)]
#[command(name = "hdyn", version)]
struct Cli {
    /// Experiment config JSON; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory (takes precedence over HDYN_OUTPUT).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test rollouts.
    Simulate,
    /// Build the feature dataset from the rollouts.
    Build,
    /// Train one method, or all configured methods.
    Train {
        #[arg(long, short)]
        method: String,
    },
    /// Score trained models on both splits.
    Evaluate,
    /// Write report.json and report.txt.
    Report,
    /// Build the dataset from an external trajectory directory.
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        map: PathBuf,
    },
    /// simulate, build, train all, report.
    Run,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.output {
        cfg.output = out.clone();
    } else if let Some(out) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
        cfg.output = PathBuf::from(out);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Simulate => {
            let paths = pipeline::cmd_simulate(&cfg)?;
            println!("wrote {} rollouts to {}", paths.len(), cfg.rollout_dir().display());
        }
        Command::Build => {
            let ds = pipeline::cmd_build(&cfg)?;
            println!(
                "dataset {} ({} train rows, {} test rows) in {}",
                ds.meta.provenance,
                ds.train.x.rows(),
                ds.test.x.rows(),
                cfg.dataset_dir().display()
            );
        }
        Command::Train { method } => {
            let kind = match method.as_str() {
                "all" => None,
                m => Some(m.parse::<MethodKind>()?),
            };
            for m in pipeline::cmd_train(&cfg, kind)? {
                println!("trained {} -> {}", m.kind(), cfg.model_path(m.kind()).display());
            }
        }
        Command::Evaluate => {
            pipeline::cmd_evaluate(&cfg)?;
            println!("wrote {}", cfg.output.join("evaluation.json").display());
        }
        Command::Report => {
            let report = pipeline::cmd_report(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::Ingest { dir, map } => {
            let ds = pipeline::cmd_ingest(&cfg, dir, map)?;
            println!(
                "ingested {} train / {} test trajectories into {}",
                ds.meta.train_sources.len(),
                ds.meta.test_sources.len(),
                cfg.dataset_dir().display()
            );
        }
        Command::Run => {
            let report = pipeline::run_all(&cfg)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
