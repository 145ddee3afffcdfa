use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use beltrot::harness::{format_bin_table, ExperimentConfig, Method, Workspace, RANDOM_BATCH};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "beltrot", version, about = "Rotate boxes of unknown mass distribution on two conveyor belts")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "artifacts")]
    out: PathBuf,
    /// Worker threads for data generation and benchmarks.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the control-to-force map and print the per-channel bins.
    Calibrate,
    /// Generate (or reuse) the estimator dataset.
    GenData,
    /// Train the mass-distribution estimator.
    TrainEstimator,
    /// Train the black-box baseline on distribution A.
    TrainBaseline,
    /// Run one episode and export its trace.
    RunEpisode {
        /// physics or baseline.
        #[arg(long, default_value = "physics", value_parser = parse_method)]
        method: Method,
        /// A, B, C, D, uniform or random:<k>.
        #[arg(long, default_value = "uniform")]
        distribution: String,
        /// Episode index mixed into the controller seed.
        #[arg(long, default_value_t = 0)]
        episode: u64,
    },
    /// Run the roster and random batch and write the report files.
    Bench,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: beltrot::Error| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    rayon_threads(cli.workers);
    let ws = Workspace::new(cfg, &cli.out)?;
    println!("{}", ws.cfg.header());
    match cli.command {
        Command::Calibrate => {
            let (map, data) = ws.calibrate()?;
            println!(
                "{} samples from {} transitions in {} episodes",
                data.samples.len(),
                data.transitions,
                data.episodes
            );
            print!("{}", format_bin_table(&map));
            println!("wrote {}", ws.path(&ws.cfg.paths.force_map).display());
        }
        Command::GenData => {
            let d = ws.dataset()?;
            let verb = if d.cached { "reused" } else { "wrote" };
            println!(
                "{verb} {} ({} boxes, {} transitions)",
                d.path.display(),
                d.dataset.len(),
                d.dataset.transitions()
            );
        }
        Command::TrainEstimator => {
            let (_, report, data) = ws.train_estimator()?;
            let first = report.epochs.first().map_or(f64::NAN, |e| e.train_loss);
            let last = report.epochs.last().map_or(f64::NAN, |e| e.train_loss);
            println!(
                "dataset {} ({}), {} transitions consumed",
                data.path.display(),
                if data.cached { "cached" } else { "generated" },
                report.transitions
            );
            println!("train loss {first:.4} -> {last:.4}; held-out median IoU {:.3}", report.final_val_median_iou);
            println!("wrote {}", ws.path(&ws.cfg.paths.estimator).display());
        }
        Command::TrainBaseline => {
            let (_, report) = ws.train_baseline()?;
            let first = report.epochs.first().map_or(f64::NAN, |e| e.2);
            let last = report.epochs.last().map_or(f64::NAN, |e| e.2);
            println!(
                "{} training transitions; validation loss {first:.4} -> {last:.4}",
                report.train_items + report.val_items
            );
            println!("wrote {}", ws.path(&ws.cfg.paths.baseline).display());
        }
        Command::RunEpisode {
            method,
            distribution,
            episode,
        } => {
            let (res, path) = ws.run_single(method, &distribution, episode)?;
            println!(
                "{method} on {distribution}: {} after {} steps (max balance error {:.4} m{})",
                res.outcome,
                res.steps,
                res.max_balance_error,
                res.reason.map(|r| format!(", {r}")).unwrap_or_default()
            );
            println!("wrote {}", path.display());
        }
        Command::Bench => {
            let report = ws.bench(cli.workers)?;
            print!("{}", report.table(true));
            if let Some(c) = report.cell(Method::PhysicsPrior, RANDOM_BATCH) {
                println!(
                    "random batch: {}/{} successes ({:.2}%; reference 83.33%)",
                    c.successes,
                    c.episodes,
                    100.0 * c.success_ratio
                );
            }
            println!("wrote bench files to {}", ws.out.display());
        }
        Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}

/// Sizes the global pool used by data generation; the bench builds its own.
fn rayon_threads(workers: usize) {
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build_global() {
        log::warn!("thread pool already configured: {e}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
