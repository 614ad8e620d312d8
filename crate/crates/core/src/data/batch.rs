use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{augment, AugmentConfig, Dataset, Modality, Split};
use crate::error::{config, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Clean-subset records only.
    Meta,
    /// Every train record.
    Main,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Meta => "meta",
            Phase::Main => "main",
        }
    }
}

/// One training batch: original features and a fresh augmented view of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Record positions in the dataset.
    pub indices: Vec<usize>,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub x_aug: Array2<f64>,
    pub y_aug: Array2<f64>,
    /// Ground-truth injected-noise flags (diagnostics only, never used for training).
    pub noisy: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Gathers the rows at `indices` and draws augmentations from `seed`.
    pub fn gather(ds: &Dataset, indices: Vec<usize>, aug: &AugmentConfig, seed: u64) -> Self {
        let m = indices.len();
        let x = Array2::from_shape_fn((m, ds.d_i), |(r, c)| ds.records[indices[r]].image[c] as f64);
        let y = Array2::from_shape_fn((m, ds.d_t), |(r, c)| ds.records[indices[r]].text[c] as f64);
        let x_aug = augment(
            x.view(),
            Modality::Image,
            aug,
            seed::derive(seed, "aug-image", 0),
        );
        let y_aug = augment(
            y.view(),
            Modality::Text,
            aug,
            seed::derive(seed, "aug-text", 0),
        );
        let noisy = indices
            .iter()
            .map(|&i| ds.records[i].is_injected_noisy)
            .collect();
        Self {
            indices,
            x,
            y,
            x_aug,
            y_aug,
            noisy,
        }
    }
}

/// One epoch of shuffled, augmented batches of exactly `batch_size` rows.
/// The trailing short batch is dropped.
pub fn make_batches(
    ds: &Dataset,
    batch_size: usize,
    phase: Phase,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(config("batch size must be positive"));
    }
    let mut pool: Vec<usize> = ds
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train && (phase == Phase::Main || r.is_clean_subset))
        .map(|(i, _)| i)
        .collect();
    if pool.len() < batch_size {
        return Err(config(format!(
            "{} phase pool has {} records, fewer than batch size {batch_size}",
            phase.as_str(),
            pool.len()
        )));
    }
    pool.shuffle(&mut seed::rng(seed::derive(seed, "batch-order", 0)));
    Ok(pool
        .chunks_exact(batch_size)
        .enumerate()
        .map(|(b, chunk)| {
            Batch::gather(
                ds,
                chunk.to_vec(),
                aug,
                seed::derive(seed, "batch-aug", b as u64),
            )
        })
        .collect())
}
