use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

/// Gaussian jitter followed by per-row coordinate dropout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityAugment {
    pub sigma: f64,
    /// Fraction of coordinates zeroed in every row.
    pub drop: f64,
}

impl Default for ModalityAugment {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            drop: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub image: ModalityAugment,
    pub text: ModalityAugment,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("image", self.image), ("text", self.text)] {
            if !(m.sigma >= 0.0) || !m.sigma.is_finite() {
                return Err(config(format!(
                    "augment.{name}.sigma must be finite and >= 0"
                )));
            }
            if !(0.0..=1.0).contains(&m.drop) {
                return Err(config(format!("augment.{name}.drop must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn for_modality(&self, kind: Modality) -> ModalityAugment {
        match kind {
            Modality::Image => self.image,
            Modality::Text => self.text,
        }
    }
}

/// Feature-space view generation: `x + N(0, sigma^2)` elementwise, then
/// `round(drop * d)` random coordinates of every row set to zero.
pub fn augment(
    features: ArrayView2<f64>,
    kind: Modality,
    cfg: &AugmentConfig,
    seed: u64,
) -> Array2<f64> {
    let params = cfg.for_modality(kind);
    let mut rng = seed::rng(seed);
    let mut out = features.to_owned();
    if params.sigma > 0.0 {
        out.mapv_inplace(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + params.sigma * z
        });
    }
    let d = out.ncols();
    let n_drop = ((params.drop * d as f64).round() as usize).min(d);
    if n_drop > 0 {
        for mut row in out.rows_mut() {
            for j in index::sample(&mut rng, d, n_drop) {
                row[j] = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sigma: f64, drop: f64) -> AugmentConfig {
        let m = ModalityAugment { sigma, drop };
        AugmentConfig { image: m, text: m }
    }

    #[test]
    fn identity_when_disabled() {
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64);
        assert_eq!(augment(x.view(), Modality::Image, &cfg(0.0, 0.0), 1), x);
    }

    #[test]
    fn full_dropout_zeroes_everything() {
        let x = Array2::from_elem((3, 7), 2.5);
        assert!(augment(x.view(), Modality::Text, &cfg(0.3, 1.0), 1)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn jitter_variance_matches_sigma() {
        let x = Array2::zeros((1000, 100));
        let y = augment(x.view(), Modality::Image, &cfg(0.1, 0.0), 42);
        let msq = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        assert!((msq - 0.01).abs() < 0.01 * 0.05, "msq={msq}");
    }

    #[test]
    fn dropout_count_per_row_and_determinism() {
        let x = Array2::ones((20, 10));
        let c = cfg(0.0, 0.3);
        let y = augment(x.view(), Modality::Image, &c, 5);
        for row in y.rows() {
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 3);
        }
        assert_eq!(y, augment(x.view(), Modality::Image, &c, 5));
        assert_ne!(y, augment(x.view(), Modality::Image, &c, 6));
    }
}
