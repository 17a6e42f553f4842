//! `rkd`: run recursive distillation experiments from a TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rkd_core::eval::EnsembleRule;
use rkd_core::experiment::{
    compare_strategies, emit_results, generate_data, load_config, run_experiment, ExperimentConfig,
};
use rkd_core::tsa::{builtin_strategies, builtin_strategy, BASELINE_STRATEGY};
use rkd_core::{Result, RkdError};

/// Overrides `run.output_dir` from the config.
const OUTPUT_ENV: &str = "RKD_OUTPUT_DIR";

#[derive(Parser)]
#[command(
    name = "rkd",
    version,
    about = "Recursive multi-teacher multi-student distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured seed and write result CSVs.
    Run {
        config: PathBuf,
        /// Print progress to stderr.
        #[arg(short, long)]
        verbose: bool,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// List the built-in TSA strategies.
    Strategies,
    /// Write the synthetic seasons and transfer set as CSV files.
    GenData {
        config: PathBuf,
        /// Seed of the generated sequence (default: first configured seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the config's strategy against the baseline on identical seeds.
    Compare { config: PathBuf },
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.run.output_dir.clone())
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(config: &Path, verbose: bool) -> Result<()> {
    let cfg = load_config(config)?;
    if verbose {
        eprintln!(
            "strategy {} | K={} | seeds {:?}",
            cfg.strategy()?,
            cfg.rkd.k,
            cfg.run.seeds
        );
    }
    let runs = run_experiment(&cfg)?;
    print_written(&emit_results(&runs, &cfg, output_dir(&cfg))?);
    Ok(())
}

fn validate(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    println!(
        "ok: {} seasons, K={}, strategy {}, seeds {:?}",
        cfg.num_seasons(),
        cfg.rkd.k,
        cfg.strategy()?,
        cfg.run.seeds
    );
    Ok(())
}

fn strategies() {
    println!("{:>3}  strategy", "#");
    for (n, s) in builtin_strategies() {
        let note = if n == BASELINE_STRATEGY {
            "  (baseline)"
        } else {
            ""
        };
        println!("{n:>3}  {s}{note}");
    }
}

fn gen_data(config: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.run.seeds[0]);
    print_written(&generate_data(&cfg, seed, output_dir(&cfg))?);
    Ok(())
}

fn compare(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let strategies = [cfg.strategy()?, builtin_strategy(BASELINE_STRATEGY)?];
    let cmp = compare_strategies(&cfg, &strategies)?;
    let out = output_dir(&cfg);
    std::fs::create_dir_all(&out).map_err(|e| RkdError::Io {
        path: out.clone(),
        source: e,
    })?;
    let path = out.join("comparison.csv");
    std::fs::write(&path, cmp.to_csv()?).map_err(|e| RkdError::Io {
        path: path.clone(),
        source: e,
    })?;
    let from = 4.min(cfg.num_seasons().saturating_sub(1)).max(1);
    for (i, (s, _)) in cmp.entries.iter().enumerate() {
        println!(
            "{s}: mean top-1 (averaging, seasons >= {from}) = {:.4}",
            cmp.mean_accuracy(i, EnsembleRule::Averaging, 1, from)
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, verbose } => run(&config, verbose),
        Command::Validate { config } => validate(&config),
        Command::Strategies => {
            strategies();
            Ok(())
        }
        Command::GenData { config, seed } => gen_data(&config, seed),
        Command::Compare { config } => compare(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
