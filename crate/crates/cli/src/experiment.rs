//! Single runs and full sweeps, with their on-disk artifacts.
//!
//! A sweep directory holds
//!
//! - `resolved_config.toml`: the spec with every default filled in,
//! - `results.csv`: two rows (I->T, T->I) per (seed, noise rate, variant),
//! - `logs/<variant>_r<rate>_s<seed>.csv`: per-epoch training losses.
//!
//! Re-running the same spec against an existing directory resumes it: cells
//! whose two rows are already present are skipped. A directory produced by a
//! different spec is only replaced when forced.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chnr::data::Dataset;
use chnr::hashing::{
    run_training, write_training_log, HashModel, TrainedModel, TrainingConfig, Variant,
};
use chnr::nn::DenseNet;
use chnr::retrieval::{evaluate, EvalReport, RunEcho, REPORT_HEADER};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::spec::ExperimentSpec;
use crate::summary::{read_results, ResultRow};

pub const RESULTS_FILE: &str = "results.csv";
pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const MODEL_FILE: &str = "model.json";
pub const LOG_DIR: &str = "logs";

/// Trained networks plus the settings they were trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub config: TrainingConfig,
    pub model: HashModel,
    pub discriminator: Option<DenseNet>,
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(CliError::io(path))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| CliError::Io {
            path: path.into(),
            source: e.into(),
        })?;
        w.flush().map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| {
            chnr::Error::Data(format!("{}: not a saved model: {e}", path.display())).into()
        })
    }
}

/// Outcome of one (variant, noise rate, seed) cell.
pub struct RunOutput {
    pub trained: TrainedModel,
    pub reports: [EvalReport; 2],
}

/// Trains `cfg` on a prepared dataset and evaluates both directions.
pub fn run_once(cfg: &TrainingConfig, ds: &Dataset, k: usize) -> Result<RunOutput> {
    let trained = run_training(cfg, ds)?;
    let echo = RunEcho {
        variant: cfg.variant,
        noise_rate: cfg.noise_rate,
        seed: cfg.seed,
    };
    let (i2t, t2i) = evaluate(&trained.model, ds, k, echo)?;
    Ok(RunOutput {
        trained,
        reports: [i2t, t2i],
    })
}

pub fn log_name(variant: Variant, noise_rate: f64, seed: u64) -> String {
    format!("{variant}_r{noise_rate}_s{seed}.csv")
}

pub fn write_log(path: &Path, trained: &TrainedModel) -> Result<()> {
    let file = File::create(path).map_err(CliError::io(path))?;
    write_training_log(&trained.log, BufWriter::new(file))?;
    Ok(())
}

/// Writes the header and `reports` as a fresh results file.
pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(REPORT_HEADER).map_err(chnr::Error::from)?;
    for r in reports {
        w.write_record(r.csv_record()).map_err(chnr::Error::from)?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Progress callback for long sweeps.
pub trait Progress {
    fn cell_done(&mut self, _done: usize, _total: usize, _reports: &[EvalReport; 2]) {}
    fn cell_skipped(&mut self, _variant: Variant, _noise_rate: f64, _seed: u64) {}
}

/// Discards every event.
pub struct Quiet;
impl Progress for Quiet {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SweepStats {
    pub trained: usize,
    pub skipped: usize,
}

/// Runs every (seed × noise rate × variant) cell of `spec` into `out`.
pub fn run_sweep(
    spec: &ExperimentSpec,
    out: &Path,
    force: bool,
    progress: &mut dyn Progress,
) -> Result<SweepStats> {
    spec.validate()?;
    let resolved = spec.resolved();
    let results = out.join(RESULTS_FILE);
    let config = out.join(CONFIG_FILE);

    let mut done: Vec<ResultRow> = Vec::new();
    if results.exists() || config.exists() {
        let previous = fs::read_to_string(&config).ok();
        if force {
            clear_outputs(out)?;
        } else if previous.as_deref() != Some(resolved.as_str()) {
            return Err(CliError::Exists(out.to_path_buf()));
        } else if results.exists() {
            let file = File::open(&results).map_err(CliError::io(&results))?;
            done = read_results(file)?;
        }
    }
    fs::create_dir_all(out.join(LOG_DIR)).map_err(CliError::io(out))?;
    fs::write(&config, &resolved).map_err(CliError::io(&config))?;

    // Keep only cells with both directions present.
    let complete = complete_cells(&done);
    let kept: Vec<&ResultRow> = done
        .iter()
        .filter(|r| complete.contains(&(r.variant.clone(), r.noise_rate.to_bits(), r.seed)))
        .collect();
    let mut writer = csv::Writer::from_writer(BufWriter::new(
        File::create(&results).map_err(CliError::io(&results))?,
    ));
    writer
        .write_record(REPORT_HEADER)
        .map_err(chnr::Error::from)?;
    for r in &kept {
        writer
            .write_record([
                r.task.clone(),
                r.variant.clone(),
                r.noise_rate.to_string(),
                r.code_length.to_string(),
                r.seed.to_string(),
                r.k.to_string(),
                r.map_at_k.to_string(),
                r.precision_at_k.to_string(),
            ])
            .map_err(chnr::Error::from)?;
    }
    writer.flush().map_err(CliError::io(&results))?;

    let base = spec.base_dataset()?;
    let total = spec.sweep.seeds.len() * spec.sweep.noise_rates.len() * spec.sweep.variants.len();
    let mut stats = SweepStats::default();
    for &seed in &spec.sweep.seeds {
        for &rate in &spec.sweep.noise_rates {
            let mut prepared: Option<Dataset> = None;
            for &variant in &spec.sweep.variants {
                if complete.contains(&(variant.as_str().to_string(), rate.to_bits(), seed)) {
                    stats.skipped += 1;
                    progress.cell_skipped(variant, rate, seed);
                    continue;
                }
                let ds = match prepared.take() {
                    Some(ds) => ds,
                    None => spec.prepare_run(&base, rate, seed)?,
                };
                let cfg = spec.run_config(variant, rate, seed);
                let run = run_once(&cfg, &ds, spec.sweep.k)?;
                prepared = Some(ds);
                write_log(
                    &out.join(LOG_DIR).join(log_name(variant, rate, seed)),
                    &run.trained,
                )?;
                for r in &run.reports {
                    writer
                        .write_record(r.csv_record())
                        .map_err(chnr::Error::from)?;
                }
                writer.flush().map_err(CliError::io(&results))?;
                stats.trained += 1;
                progress.cell_done(stats.trained + stats.skipped, total, &run.reports);
            }
        }
    }
    Ok(stats)
}

fn complete_cells(rows: &[ResultRow]) -> HashSet<(String, u64, u64)> {
    let mut seen: HashSet<(String, String, u64, u64)> = HashSet::new();
    for r in rows {
        seen.insert((
            r.task.clone(),
            r.variant.clone(),
            r.noise_rate.to_bits(),
            r.seed,
        ));
    }
    rows.iter()
        .map(|r| (r.variant.clone(), r.noise_rate.to_bits(), r.seed))
        .filter(|(v, rate, seed)| {
            ["I->T", "T->I"]
                .iter()
                .all(|t| seen.contains(&(t.to_string(), v.clone(), *rate, *seed)))
        })
        .collect()
}

fn clear_outputs(out: &Path) -> Result<()> {
    for name in [RESULTS_FILE, CONFIG_FILE] {
        let p = out.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(CliError::io(&p))?;
        }
    }
    let logs = out.join(LOG_DIR);
    if logs.exists() {
        fs::remove_dir_all(&logs).map_err(CliError::io(&logs))?;
    }
    Ok(())
}

/// Artifacts of a single `train` run.
pub struct TrainArtifacts {
    pub model: PathBuf,
    pub results: PathBuf,
    pub log: PathBuf,
    pub reports: [EvalReport; 2],
}

/// One training run of `spec.training` (its own variant, noise rate and seed).
pub fn run_single(spec: &ExperimentSpec, out: &Path, force: bool) -> Result<TrainArtifacts> {
    spec.validate()?;
    let model_path = out.join(MODEL_FILE);
    if model_path.exists() && !force {
        return Err(CliError::Exists(out.to_path_buf()));
    }
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    let cfg = &spec.training;
    let ds = spec.prepare_run(&spec.base_dataset()?, cfg.noise_rate, cfg.seed)?;
    let run = run_once(cfg, &ds, spec.sweep.k)?;
    let config = out.join(CONFIG_FILE);
    fs::write(&config, spec.resolved()).map_err(CliError::io(&config))?;
    let log = out.join("training_log.csv");
    write_log(&log, &run.trained)?;
    let results = out.join(RESULTS_FILE);
    write_reports(&results, &run.reports)?;
    let saved = SavedModel {
        config: cfg.clone(),
        model: run.trained.model,
        discriminator: run.trained.discriminator,
    };
    saved.save(&model_path)?;
    Ok(TrainArtifacts {
        model: model_path,
        results,
        log,
        reports: run.reports,
    })
}

/// Re-evaluates a saved model on the dataset its spec describes.
pub fn evaluate_saved(spec: &ExperimentSpec, saved: &SavedModel) -> Result<[EvalReport; 2]> {
    let cfg = &saved.config;
    let ds = spec.prepare_run(&spec.base_dataset()?, cfg.noise_rate, cfg.seed)?;
    let echo = RunEcho {
        variant: cfg.variant,
        noise_rate: cfg.noise_rate,
        seed: cfg.seed,
    };
    let (i2t, t2i) = evaluate(&saved.model, &ds, spec.sweep.k, echo)?;
    Ok([i2t, t2i])
}
