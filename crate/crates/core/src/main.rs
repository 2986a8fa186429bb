use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semfed::dataio::generate_synthetic;
use semfed::error::Error;
use semfed::experiment::{
    compare_runs, prepare, run_experiment_config, write_dataset, ExperimentConfig,
};
use semfed::federation::load_checkpoint;
use semfed::trainer::{gradient_check, GradCheckSizes};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_GRAD_CHECK: u8 = 3;

/// Maximum relative error `grad-check` accepts.
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "semfed", version, about = "Federated semantic adapter simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Experiment config (JSON). Defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Round count override.
    #[arg(long)]
    rounds: Option<u64>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(r) = self.rounds {
            cfg.federation.rounds = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as feature files.
    GenData {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Run an experiment and write metrics.csv, summary.json, config-echo.json.
    Run {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Score a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 4)]
        semantic: usize,
        #[arg(long, default_value_t = 6)]
        samples: usize,
        /// Added to every analytic gradient entry (negative control).
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
    /// Merge several runs' metrics into one long-format CSV.
    Compare {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::InvalidArgument(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::GenData { opts } => {
            let cfg = opts.resolve()?;
            let dir = cfg
                .output_dir
                .clone()
                .ok_or_else(|| Error::Config("gen-data needs --out".into()))?;
            let data = generate_synthetic(&cfg.dataset.synthetic)?;
            write_dataset(&data.dataset, &dir)?;
            println!("wrote dataset to {}", dir.display());
        }
        Command::Run { opts } => {
            let cfg = opts.resolve()?;
            let dir = cfg
                .output_dir
                .clone()
                .ok_or_else(|| Error::Config("run needs --out or output_dir".into()))?;
            let out = run_experiment_config(&cfg, Some(&dir))?;
            let f = &out.summary.final_metrics;
            println!(
                "{}: final rsum {:.2} (best {:.2} at round {}), pruned {}",
                cfg.mode.name(),
                f.rsum,
                out.summary.best_metrics.rsum,
                out.summary.best_metrics.round,
                f.pruned_total
            );
            for (group, g) in &out.summary.groups {
                println!("  {group}: final rsum {:.2}, best {:.2}", g.final_rsum, g.best_rsum);
            }
        }
        Command::Eval { opts, checkpoint } => {
            let cfg = opts.resolve()?;
            let prepared = prepare(&cfg)?;
            let (model, round) = load_checkpoint(&prepared.state.model, &checkpoint)?;
            let b = prepared.eval.evaluate(&model, cfg.eval.batch_size)?;
            println!("{}", serde_json::json!({ "round": round, "rsum": b.rsum(), "recalls": b }));
        }
        Command::GradCheck {
            seed,
            hidden,
            semantic,
            samples,
            perturb,
        } => {
            let sizes = GradCheckSizes {
                hidden,
                semantic,
                samples,
                ..GradCheckSizes::default()
            };
            let report = gradient_check(seed, &sizes, perturb)?;
            for (name, err) in &report.blocks {
                println!("{name:<40} {err:.3e}");
            }
            println!("max relative error {:.3e}", report.max_rel_error);
            if !(report.max_rel_error <= GRAD_CHECK_TOLERANCE) {
                eprintln!("gradient check failed (tolerance {GRAD_CHECK_TOLERANCE:e})");
                return Ok(EXIT_GRAD_CHECK);
            }
        }
        Command::Compare { out, runs } => {
            let rows = compare_runs(&runs, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
