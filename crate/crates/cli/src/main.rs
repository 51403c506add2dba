use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use eigdesign_cli::{
    cmd_consistency, cmd_eig_curve, cmd_estimate, cmd_tune, cmd_work_study, write_consistency, write_eig_curve,
    write_estimate, write_tune, write_work_study, CliError, ConfigError, RunConfig,
};
use eigdesign_core::EstimatorKind;

#[derive(Parser)]
#[command(name = "eigdesign", version, about = "Expected information gain estimation and tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `[output] dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured estimator: dlmc, mcla or dlmcis.
    #[arg(long, global = true)]
    estimator: Option<EstimatorKind>,
    /// MCLA: split the whole tolerance to the statistical error.
    #[arg(long, global = true)]
    force_kappa1: bool,
    /// Replicates per tolerance.
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Tune and run one estimate.
    Estimate,
    /// Error against the oracle over the tolerance list.
    Consistency,
    /// Work and time against tolerance with fitted slopes.
    WorkStudy,
    /// Estimates over the design grid.
    EigCurve,
    /// Pilot constants and optimal settings only.
    Tune,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| ConfigError::missing("--config"))?;
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: None,
        field: "--config".into(),
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.estimator {
        cfg.estimator = e;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(r) = cli.replicates {
        cfg.replicates = Some(r);
    }
    cfg.force_kappa1 |= cli.force_kappa1;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    let dir = cfg.out_dir.clone();
    match cli.command {
        Command::Estimate => {
            let r = cmd_estimate(&cfg)?;
            write_estimate(&dir, &r)?;
            println!(
                "{} = {:.6} +- {:.2e} nats (N = {}, M = {})",
                cfg.estimator, r.estimate.value, r.estimate.std_error, r.setting.n, r.setting.m
            );
        }
        Command::Tune => {
            let r = cmd_tune(&cfg)?;
            write_tune(&dir, &r)?;
            for e in &r.settings {
                let s = &e.result.setting;
                if e.result.feasible {
                    println!("TOL {:e}: N = {}, M = {}, kappa = {:.4}", e.tol, s.n, s.m, s.kappa);
                } else {
                    println!("TOL {:e}: infeasible", e.tol);
                }
            }
            if let Some(e) = r.infeasible().first() {
                return Err(CliError::Infeasible(e.result.message.clone().unwrap_or_default()));
            }
        }
        Command::Consistency => {
            let r = cmd_consistency(&cfg, cfg.replicates.unwrap_or(20))?;
            write_consistency(&dir, &r)?;
            for row in &r.summary {
                match row.coverage {
                    Some(c) => println!("TOL {:e}: coverage {:.3} (target {:.3})", row.tol, c, row.target),
                    None => println!("TOL {:e}: no replicates", row.tol),
                }
            }
        }
        Command::WorkStudy => {
            let r = cmd_work_study(&cfg, cfg.replicates.unwrap_or(1))?;
            write_work_study(&dir, &r)?;
            match r.slopes.work_slope {
                Some(s) => println!("work slope {s:.3} over {} tolerances", r.slopes.tols.len()),
                None => println!("work slope {}", r.slopes.status),
            }
        }
        Command::EigCurve => {
            let pts = cmd_eig_curve(&cfg, false)?;
            write_eig_curve(&dir, &pts)?;
            let failed = pts.iter().filter(|p| p.error.is_some()).count();
            println!("{} design points, {failed} failed", pts.len());
        }
    }
    Ok(())
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().context("configuring the worker pool")?;
    }
    match execute(&cli) {
        Ok(()) => Ok(ExitCode::SUCCESS),
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::from(e.exit_code() as u8))
        }
    }
}
