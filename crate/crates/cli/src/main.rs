use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chnr::data::save_features;
use chnr::hashing::Variant;
use chnr::retrieval::EvalReport;
use chnr_cli::experiment::{self, Progress, SavedModel, CONFIG_FILE, RESULTS_FILE};
use chnr_cli::summary::{pivot, read_results, render};
use chnr_cli::{CliError, ExperimentSpec, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "chnr",
    version,
    about = "Noise-robust unsupervised cross-modal hashing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment spec (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (for `sweep`, replaces the seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a prepared synthetic dataset (split, clean subset, injected noise) as a feature file.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Noise rate to inject; defaults to training.noise_rate.
        #[arg(long)]
        noise_rate: Option<f64>,
    },
    /// Train and evaluate one run of the spec's training settings.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        noise_rate: Option<f64>,
    },
    /// Run the full seed × noise-rate × variant grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Re-evaluate a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model written by `train`; its directory's resolved config is used when --config is absent.
        #[arg(long)]
        model: PathBuf,
    },
    /// Pivot a results CSV into per-direction tables.
    Summarize {
        #[command(flatten)]
        common: Common,
        /// Results CSV, or a sweep directory containing one.
        results: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn out_dir(common: &Common, fallback: &str) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, noise_rate } => {
            let mut spec = ExperimentSpec::load_or_default(common.config.as_deref())?;
            if let Some(r) = noise_rate {
                spec.training.noise_rate = r;
            }
            if let Some(s) = common.seed {
                spec.training.seed = s;
            }
            spec.validate()?;
            let out = out_dir(&common, "data");
            let path = out.join("features.cmrf");
            if path.exists() && !common.force {
                return Err(CliError::Exists(out));
            }
            fs::create_dir_all(&out).map_err(CliError::io(&out))?;
            let ds = spec.prepare_run(
                &spec.base_dataset()?,
                spec.training.noise_rate,
                spec.training.seed,
            )?;
            save_features(&ds, &path)?;
            println!(
                "wrote {} ({} records, {} clean, {} noisy)",
                path.display(),
                ds.len(),
                ds.clean_count(),
                ds.noisy_count()
            );
        }
        Command::Train {
            common,
            variant,
            noise_rate,
        } => {
            let mut spec = ExperimentSpec::load_or_default(common.config.as_deref())?;
            if let Some(v) = variant {
                spec.training.variant = v;
            }
            if let Some(r) = noise_rate {
                spec.training.noise_rate = r;
            }
            if let Some(s) = common.seed {
                spec.training.seed = s;
            }
            let out = out_dir(&common, "run");
            let art = experiment::run_single(&spec, &out, common.force)?;
            print_reports(&art.reports);
            println!("model: {}", art.model.display());
        }
        Command::Sweep { common } => {
            let mut spec = ExperimentSpec::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                spec.sweep.seeds = vec![s];
            }
            let out = out_dir(&common, "sweep");
            let stats = experiment::run_sweep(&spec, &out, common.force, &mut Stderr)?;
            eprintln!(
                "{} trained, {} already complete",
                stats.trained, stats.skipped
            );
            let file = fs::File::open(out.join(RESULTS_FILE))
                .map_err(CliError::io(out.join(RESULTS_FILE)))?;
            print!("{}", render(&pivot(&read_results(file)?)?));
        }
        Command::Eval { common, model } => {
            let config = match common.config.clone() {
                Some(c) => c,
                None => model.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
            };
            let spec = ExperimentSpec::load(&config)?;
            let mut saved = SavedModel::load(&model)?;
            if let Some(s) = common.seed {
                saved.config.seed = s;
            }
            let reports = experiment::evaluate_saved(&spec, &saved)?;
            print_reports(&reports);
            if let Some(out) = &common.out {
                let path = out.join("eval.csv");
                if path.exists() && !common.force {
                    return Err(CliError::Exists(out.clone()));
                }
                fs::create_dir_all(out).map_err(CliError::io(out))?;
                experiment::write_reports(&path, &reports)?;
            }
        }
        Command::Summarize { common, results } => {
            let path = if results.is_dir() {
                results.join(RESULTS_FILE)
            } else {
                results
            };
            let file = fs::File::open(&path).map_err(CliError::io(&path))?;
            let text = render(&pivot(&read_results(file)?)?);
            print!("{text}");
            if let Some(out) = &common.out {
                let dst = out.join("summary.txt");
                if dst.exists() && !common.force {
                    return Err(CliError::Exists(out.clone()));
                }
                fs::create_dir_all(out).map_err(CliError::io(out))?;
                fs::write(&dst, text).map_err(CliError::io(&dst))?;
            }
        }
    }
    Ok(())
}

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        println!(
            "{} {} rate={} seed={} mAP@{}={:.4} P@{}={:.4}",
            r.task.as_str(),
            r.echo.variant,
            r.echo.noise_rate,
            r.echo.seed,
            r.k,
            r.map_at_k,
            r.k,
            r.precision_at_k
        );
    }
}

struct Stderr;

impl Progress for Stderr {
    fn cell_done(&mut self, done: usize, total: usize, reports: &[EvalReport; 2]) {
        let [a, b] = reports;
        eprintln!(
            "[{done}/{total}] {} rate={} seed={} I->T={:.4} T->I={:.4}",
            a.echo.variant, a.echo.noise_rate, a.echo.seed, a.map_at_k, b.map_at_k
        );
    }

    fn cell_skipped(&mut self, variant: Variant, noise_rate: f64, seed: u64) {
        eprintln!("skip {variant} rate={noise_rate} seed={seed} (already in results)");
    }
}
