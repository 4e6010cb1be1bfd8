use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use gift_core::gradcheck::{check_loss_gradient, gradcheck_losses};
use gift_core::harness::{
    emit_gdumb, emit_report, gdumb_incremental, grid_sweep, parse_axis, run_experiment, ExperimentConfig,
};
use gift_core::theory::{bound_sweep, write_bound_reports};

#[derive(Parser)]
#[command(name = "gift", version, about = "Label refinement and cosine-loss training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its report.
    Run {
        config: PathBuf,
        /// Extra `key=value` overrides.
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Cartesian product of the given axes.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2,...`; repeat for more axes.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class-incremental run with a class-balanced memory.
    Gdumb {
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare InfoNCE with its upper bounds on random batches.
    CheckBounds {
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every loss gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &Path, sets: &[String]) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            bail!("--set `{s}` is not key=value");
        };
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, sets, out } => {
            let cfg = load(&config, &sets)?;
            let rec = run_experiment(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            let files = emit_report(std::slice::from_ref(&rec), &dir)?;
            println!(
                "{} {}: {:.2} ± {:.2} % -> {}",
                rec.loss,
                rec.optimizer,
                100.0 * rec.mean,
                100.0 * rec.std,
                files.results.display()
            );
        }
        Command::Sweep { config, axes, sets, out } => {
            let cfg = load(&config, &sets)?;
            let axes = axes.iter().map(|a| parse_axis(a)).collect::<Result<Vec<_>, _>>()?;
            let records = grid_sweep(&cfg, &axes)?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            let files = emit_report(&records, &dir)?;
            print!("{}", std::fs::read_to_string(&files.summary).context("reading summary")?);
        }
        Command::Gdumb { config, steps, sets, out } => {
            let cfg = load(&config, &sets)?;
            let rec = gdumb_incremental(&cfg, steps)?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            let path = emit_gdumb(std::slice::from_ref(&rec), &dir)?;
            for s in &rec.steps {
                println!(
                    "step {} classes {} memory {}: {:.2} ± {:.2} %",
                    s.step,
                    s.classes_seen,
                    s.memory_size,
                    100.0 * s.mean,
                    100.0 * s.std
                );
            }
            println!("-> {}", path.display());
        }
        Command::CheckBounds { k, tau, trials, dim, seed, out } => {
            let reports = bound_sweep(k, dim, tau, trials, seed)?;
            let worst = reports.iter().map(|r| r.gap_jensen).fold(f64::INFINITY, f64::min);
            let mean_gap = reports.iter().map(|r| r.gap_approx).sum::<f64>() / reports.len().max(1) as f64;
            println!("K={k} tau={tau} trials={trials}: min Jensen gap {worst:.3e}, mean approx gap {mean_gap:.4}");
            if let Some(path) = out {
                write_bound_reports(&path, &reports)?;
            }
            if worst < -1e-9 {
                println!("Jensen bound violated");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Gradcheck { instances, seed } => {
            let mut ok = true;
            for loss in gradcheck_losses() {
                let err = check_loss_gradient(&loss, instances, 8, 10, seed)?;
                let pass = err < 1e-4;
                ok &= pass;
                let name = match &loss {
                    gift_core::losses::LossId::Kl { temperature } => format!("kl(T={temperature})"),
                    other => other.to_string(),
                };
                println!("{} {name:<12} max rel err {err:.2e}", if pass { "PASS" } else { "FAIL" });
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
