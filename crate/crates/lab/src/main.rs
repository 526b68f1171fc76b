use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ifso_lab::config::ExperimentConfig;
use ifso_lab::experiment::{run_experiment, run_pretrain};
use ifso_lab::report::{merge, summarize};
use ifso_lab::sweep::{hybrid_grid, hybrid_grid_csv, prune_grid, prune_grid_csv};
use ifso_lab::verify::{run_suite, Suite};
use ifso_lab::{write_file, LabError};

#[derive(Parser)]
#[command(name = "ifso", version, about = "Second-order channel pruning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed and every seed derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Prune,
    Hybrid,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and pretrain the model.
    Train(Common),
    /// Full pipeline: pretrain, prune, fine-tune.
    Prune(Common),
    /// Run an oracle suite: prop1, scores, bounds or fig1-sweep.
    Verify {
        suite: String,
        #[command(flatten)]
        common: Common,
    },
    /// Seeded grids over prune fractions and scorers, or hybrid switch points.
    Sweep {
        #[arg(long, value_enum, default_value = "both")]
        grid: Grid,
        #[command(flatten)]
        common: Common,
    },
    /// Merge a CSV from several run directories and summarize it.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// CSV file name inside each run directory.
        #[arg(long, default_value = "final_metrics.csv")]
        file: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), LabError> {
    let path = common.config.as_ref().ok_or_else(|| LabError::Invalid("missing required flag --config <path>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    let out = cfg.out_dir.clone();
    Ok((cfg, out))
}

fn report(dirs: &[PathBuf], file: &str, out: Option<&Path>) -> Result<(), LabError> {
    let merged = merge(dirs, file)?;
    let summary = summarize(&merged);
    match out {
        Some(dir) => {
            write_file(dir, &format!("merged_{file}"), merged.to_csv())?;
            write_file(dir, &format!("summary_{file}"), summary.to_csv())?;
            println!("wrote merged_{file} and summary_{file} to {}", dir.display());
        }
        None => print!("{}", merged.to_csv()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = load(&common)?;
            run_pretrain(&cfg, &out)?;
            println!("pretrained {} into {}", cfg.arch, out.display());
        }
        Command::Prune(common) => {
            let (cfg, out) = load(&common)?;
            let outcome = run_experiment(&cfg, &out)?;
            for m in &outcome.metrics {
                println!("{:<10} loss {:.6} acc {:.4} flops {}", m.stage, m.loss, m.accuracy, m.flops);
            }
        }
        Command::Verify { suite, common } => {
            let suite: Suite = suite.parse()?;
            let (cfg, out) = load(&common)?;
            let result = run_suite(&cfg, suite, &out)?;
            println!("{}: {} ({})", suite.name(), if result.passed { "pass" } else { "FAIL" }, result.summary);
            if !result.passed {
                return Err(LabError::CheckFailed(format!("{} ({})", suite.name(), result.summary)));
            }
        }
        Command::Sweep { grid, common } => {
            let (cfg, out) = load(&common)?;
            write_file(&out, "config.json", cfg.canonical_json()?)?;
            if matches!(grid, Grid::Prune | Grid::Both) {
                write_file(&out, "sweep_prune.csv", prune_grid_csv(&prune_grid(&cfg)?))?;
            }
            if matches!(grid, Grid::Hybrid | Grid::Both) {
                write_file(&out, "sweep_hybrid.csv", hybrid_grid_csv(&hybrid_grid(&cfg)?))?;
            }
            println!("sweep written to {}", out.display());
        }
        Command::Report { dirs, file, out } => report(&dirs, &file, out.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
