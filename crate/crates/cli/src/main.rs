use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use m2d::config::PipelineConfig;
use m2d::runner::{run_estimate, run_eval, run_refine_command, run_synth};

/// Exit code for unusable configuration or arguments.
const EXIT_CONFIG: u8 = 2;
/// Exit code for a non-finite loss during refinement.
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "m2d", version, about = "Two-frame surround-view depth estimation")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Named ablation; repeat or comma-separate for several.
    #[arg(long, global = true, value_delimiter = ',')]
    ablation: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a two-frame synthetic dataset.
    Synth,
    /// Estimate depth for every camera.
    Estimate,
    /// Estimate, then refine depth (and pose) against the self-supervised losses.
    Refine,
    /// Score predicted depth maps against ground truth.
    Eval {
        /// Directory with predicted depth.
        pred: PathBuf,
        /// Directory with ground-truth depth.
        gt: PathBuf,
    },
}

fn config_error(msg: String) -> anyhow::Error {
    m2d::Error::Config(msg).into()
}

fn set_threads() -> Result<()> {
    let Ok(v) = std::env::var("M2D_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_error(format!("M2D_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.ablations.extend(cli.ablation.iter().cloned());
    Ok(cfg.resolve()?)
}

fn run(cli: Cli) -> Result<()> {
    set_threads()?;
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth => {
            let s = run_synth(&cfg)?;
            println!(
                "wrote {} images, {} depth maps, {} pose file for {} cameras",
                s.images, s.depth_maps, s.pose_files, s.cameras
            );
        }
        Command::Estimate => {
            let r = run_estimate(&cfg)?.report;
            match &r.metrics {
                Some(m) => println!(
                    "Abs.Rel {:.4}  RMSE {:.3}  d<1.25 {:.4}  ({} pixels)",
                    m.mean.abs_rel, m.mean.rmse, m.mean.delta_1, m.mean.n_valid
                ),
                None => println!("estimated {} cameras (no ground truth)", r.confident_fraction.len()),
            }
        }
        Command::Refine => {
            let r = run_refine_command(&cfg)?.report;
            let total = r.loss.map_or(f64::NAN, |l| l.total);
            println!(
                "loss {:.6} -> {:.6} in {} iterations",
                r.initial_total, total, r.iterations
            );
        }
        Command::Eval { pred, gt } => {
            let report = run_eval(pred, gt, &cfg.eval, cfg.out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<m2d::Error>() {
        Some(m2d::Error::Config(_)) => EXIT_CONFIG,
        Some(m2d::Error::Divergence(_)) => EXIT_DIVERGENCE,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let e = |err: m2d::Error| anyhow::Error::from(err);
        assert_eq!(exit_code(&e(m2d::Error::Config("x".into()))), EXIT_CONFIG);
        assert_eq!(exit_code(&e(m2d::Error::Divergence("x".into()))), EXIT_DIVERGENCE);
        assert_eq!(exit_code(&e(m2d::Error::Contract("x".into()))), 1);
        let wrapped = e(m2d::Error::Divergence("x".into())).context("refining");
        assert_eq!(exit_code(&wrapped), EXIT_DIVERGENCE);
    }
}
