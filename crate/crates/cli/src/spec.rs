//! Experiment spec files.
//!
//! A spec is a TOML document with one table per concern:
//!
//! ```toml
//! [data]
//! ratios = [0.8, 0.1, 0.1]
//! # features = "prepared.cmrf"   # otherwise [data.synthetic] is generated
//!
//! [data.synthetic]
//! num_classes = 10
//! samples_per_class = 200
//!
//! [training]
//! code_length = 64
//! hash_hidden = [512, 512]
//!
//! [sweep]
//! noise_rates = [0.05, 0.10, 0.20, 0.30, 0.40, 0.50]
//! variants = ["CHNR", "CHNR-NW", "CHNR-PTC", "CHNR-WNR"]
//! seeds = [0, 1, 2]
//! k = 20
//! ```
//!
//! Every key is optional and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use chnr::data::{
    generate_synthetic, load_csv, load_features, prepare, Dataset, PrepConfig, Split, SynthConfig,
};
use chnr::hashing::{TrainingConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Noise rates swept when a spec does not list its own.
pub const DEFAULT_NOISE_RATES: [f64; 6] = [0.05, 0.10, 0.20, 0.30, 0.40, 0.50];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub data: DataSpec,
    pub training: TrainingConfig,
    pub sweep: SweepSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Feature file (`.cmrf` binary or `.csv`); takes precedence over `synthetic`.
    pub features: Option<PathBuf>,
    pub synthetic: SynthConfig,
    /// Train / query / retrieval fractions.
    pub ratios: [f64; 3],
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            features: None,
            synthetic: SynthConfig::default(),
            ratios: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub noise_rates: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Retrieval depth for mAP@K.
    pub k: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            noise_rates: DEFAULT_NOISE_RATES.to_vec(),
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            k: 20,
        }
    }
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| CliError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Spec(m) => CliError::Spec(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// `path` if given, otherwise all defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sweep;
        if s.noise_rates.is_empty() {
            return Err(CliError::Spec("sweep.noise_rates must not be empty".into()));
        }
        if let Some((i, r)) = s
            .noise_rates
            .iter()
            .enumerate()
            .find(|(_, r)| !(0.0..=1.0).contains(*r))
        {
            return Err(CliError::Spec(format!(
                "sweep.noise_rates[{i}] = {r} lies outside [0, 1]"
            )));
        }
        if s.variants.is_empty() {
            return Err(CliError::Spec("sweep.variants must not be empty".into()));
        }
        if s.seeds.is_empty() {
            return Err(CliError::Spec("sweep.seeds must not be empty".into()));
        }
        if s.k == 0 {
            return Err(CliError::Spec("sweep.k must be at least 1".into()));
        }
        let r = self.data.ratios;
        if r.iter().any(|v| !(*v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Spec(format!(
                "data.ratios {r:?} must be positive and sum to 1"
            )));
        }
        if self.data.features.is_none() {
            self.data.synthetic.validate()?;
        }
        self.training.validate()?;
        Ok(())
    }

    /// The spec with every default spelled out, as written next to results.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Training settings of one sweep cell.
    pub fn run_config(&self, variant: Variant, noise_rate: f64, seed: u64) -> TrainingConfig {
        TrainingConfig {
            variant,
            noise_rate,
            seed,
            ..self.training.clone()
        }
    }

    /// Raw dataset: the feature file if one is named, otherwise the synthetic set.
    pub fn base_dataset(&self) -> Result<Dataset> {
        match &self.data.features {
            Some(path) => {
                let ds = if path
                    .extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
                {
                    load_csv(path)?
                } else {
                    load_features(path)?
                };
                Ok(ds)
            }
            None => Ok(generate_synthetic(&self.data.synthetic)?),
        }
    }

    /// Split, clean subset and injected noise for one run.
    ///
    /// A dataset that already carries split or clean-subset flags (for example
    /// one written by `gen`) is used unchanged.
    pub fn prepare_run(&self, base: &Dataset, noise_rate: f64, seed: u64) -> Result<Dataset> {
        if is_prepared(base) {
            return Ok(base.clone());
        }
        let [rt, rq, rr] = self.data.ratios;
        let prep = PrepConfig {
            ratios: (rt, rq, rr),
            clean_fraction: self.training.clean_fraction,
            noise_rate,
        };
        Ok(prepare(base.clone(), &prep, prep_seed(seed, noise_rate))?)
    }
}

/// Per-run preparation seed; the same for every variant of a (seed, rate) cell.
pub fn prep_seed(seed: u64, noise_rate: f64) -> u64 {
    chnr::seed::derive(seed, "prepare", noise_rate.to_bits())
}

pub fn is_prepared(ds: &Dataset) -> bool {
    ds.records
        .iter()
        .any(|r| r.split != Split::Train || r.is_clean_subset)
}
