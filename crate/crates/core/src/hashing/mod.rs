//! Hashing module: hash networks, weighted contrastive objectives and the
//! two-phase training schedule.

mod loss;
mod train;

pub use loss::{
    average_weight, cosine_sim, inter_modal_loss, intra_modal_loss, quantization_loss, sim_exp,
    total_contrastive_loss, total_loss, update_binary_code, weighted_ntxent, ContrastiveTerm,
    QuantizationTerm, NORM_GUARD,
};
pub use train::{
    batch_objective, hash_layers, run_training, train_step, write_training_log, EpochLog,
    HashModel, PairWeighting, StepLog, TrainedModel, TRAINING_LOG_HEADER,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{config, Error, Result};
use crate::nn::AdamConfig;

/// Method variant: the full method and its three ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Discriminator weights, thresholded.
    #[serde(rename = "CHNR")]
    Chnr,
    /// Discriminator weights, continuous.
    #[serde(rename = "CHNR-NW")]
    ChnrNw,
    /// Clean-subset pretraining, then unweighted training on everything.
    #[serde(rename = "CHNR-PTC")]
    ChnrPtc,
    /// No noise handling at all.
    #[serde(rename = "CHNR-WNR")]
    ChnrWnr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Chnr,
        Variant::ChnrNw,
        Variant::ChnrPtc,
        Variant::ChnrWnr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Chnr => "CHNR",
            Variant::ChnrNw => "CHNR-NW",
            Variant::ChnrPtc => "CHNR-PTC",
            Variant::ChnrWnr => "CHNR-WNR",
        }
    }

    pub fn uses_discriminator(self) -> bool {
        matches!(self, Variant::Chnr | Variant::ChnrNw)
    }

    pub fn has_meta_phase(self) -> bool {
        !matches!(self, Variant::ChnrWnr)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| config(format!("unknown variant {s:?}")))
    }
}

/// Every hyperparameter of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub code_length: usize,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub batch_size: usize,
    /// Batch size for the clean-subset phase; `None` means `batch_size`.
    pub meta_batch_size: Option<usize>,
    pub meta_epochs: usize,
    pub main_epochs: usize,
    pub noise_rate: f64,
    pub clean_fraction: f64,
    pub variant: Variant,
    /// Also evaluate the inter-modal term on the augmented views (weighted by W').
    pub inter_on_augmented: bool,
    /// Add the text-anchored mirror of the inter-modal term.
    pub symmetric_inter: bool,
    pub hash_lr: f64,
    pub disc_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Widths of the two hidden affine layers of the hash networks.
    pub hash_hidden: Vec<usize>,
    /// Widths of the discriminator's hidden affine layers.
    pub disc_hidden: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            code_length: 64,
            tau: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            alpha: 0.01,
            batch_size: 128,
            meta_batch_size: None,
            meta_epochs: 75,
            main_epochs: 75,
            noise_rate: 0.0,
            clean_fraction: 0.2,
            variant: Variant::Chnr,
            inter_on_augmented: true,
            symmetric_inter: false,
            hash_lr: 1e-4,
            disc_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            hash_hidden: vec![512, 512],
            disc_hidden: vec![512, 256, 128, 64],
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn total_epochs(&self) -> usize {
        self.meta_epochs + self.main_epochs
    }

    pub fn meta_batch(&self) -> usize {
        self.meta_batch_size.unwrap_or(self.batch_size)
    }

    pub fn hash_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.hash_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn disc_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.disc_lr,
            ..self.hash_adam()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_length == 0 {
            return Err(config("training.code_length must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(config("training.tau must be positive"));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha", self.alpha),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config(format!("training.{name} must be finite and >= 0")));
            }
        }
        if self.batch_size < 2 || self.meta_batch() < 2 {
            return Err(config("training batch sizes must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(config("training.noise_rate must lie in [0, 1]"));
        }
        if !(self.clean_fraction > 0.0 && self.clean_fraction < 1.0) {
            return Err(config("training.clean_fraction must lie in (0, 1)"));
        }
        if self.hash_hidden.len() != 2 || self.hash_hidden.contains(&0) {
            return Err(config("training.hash_hidden must list two positive widths"));
        }
        if self.disc_hidden.contains(&0) {
            return Err(config("training.disc_hidden widths must be positive"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(config(
                "training.bn_eps must be > 0 and bn_momentum in [0, 1)",
            ));
        }
        self.hash_adam().validate()?;
        self.disc_adam().validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_protocol() {
        let cfg = TrainingConfig::default();
        assert_eq!(cfg.total_epochs(), 150);
        assert_eq!((cfg.meta_epochs, cfg.main_epochs), (75, 75));
        assert_eq!(cfg.alpha, 0.01);
        assert_eq!((cfg.lambda1, cfg.lambda2), (1.0, 1.0));
        assert_eq!(cfg.code_length, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("CHNR-XYZ".parse::<Variant>().is_err());
    }
}
