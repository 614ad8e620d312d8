//! Multi-modal feature datasets.
//!
//! A [`Dataset`] holds one [`FeatureRecord`] per image/text pair. The usual
//! preparation pipeline is
//! [`generate_synthetic`] (or [`load_features`]) → [`split`] →
//! [`select_clean_subset`] → [`inject_noise`], after which [`make_batches`]
//! yields augmented training batches.
//!
//! Feature vectors are stored as `f32`, as on disk; batches are assembled in
//! `f64`.

mod augment;
mod batch;
mod io;

pub use augment::{augment, AugmentConfig, Modality, ModalityAugment};
pub use batch::{make_batches, Batch, Phase};
pub use io::{
    load_csv, load_features, read_features, save_features, write_features, FORMAT_VERSION, MAGIC,
};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Query,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    pub image: Vec<f32>,
    pub text: Vec<f32>,
    pub label: u32,
    pub split: Split,
    pub is_clean_subset: bool,
    pub is_injected_noisy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_i: usize,
    pub d_t: usize,
    pub has_labels: bool,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Positions (not ids) of the records in `split`, in storage order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_len(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.split == Split::Train)
            .count()
    }

    pub fn clean_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_clean_subset).count()
    }

    pub fn noisy_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_injected_noisy).count()
    }

    /// Checks dimensions, finiteness and flag invariants.
    pub fn validate(&self) -> Result<()> {
        if self.d_i == 0 || self.d_t == 0 {
            return Err(config("feature dimensions must be positive"));
        }
        for (pos, r) in self.records.iter().enumerate() {
            if r.image.len() != self.d_i || r.text.len() != self.d_t {
                return Err(crate::Error::Data(format!(
                    "record {pos} has wrong feature dimensions"
                )));
            }
            if r.image.iter().chain(&r.text).any(|v| !v.is_finite()) {
                return Err(crate::Error::Data(format!(
                    "record {pos} has non-finite features"
                )));
            }
            if r.is_clean_subset && r.is_injected_noisy {
                return Err(crate::Error::Data(format!(
                    "record {pos} is both clean-subset and noisy"
                )));
            }
            if (r.is_clean_subset || r.is_injected_noisy) && r.split != Split::Train {
                return Err(crate::Error::Data(format!(
                    "record {pos} is flagged but not in the train split"
                )));
            }
        }
        let clean = self.clean_count();
        if clean > 0 && clean >= self.train_len() {
            return Err(crate::Error::Data(
                "clean subset must be smaller than the train split".into(),
            ));
        }
        Ok(())
    }
}

/// Class-structured synthetic features standing in for encoder outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub d_i: usize,
    pub d_t: usize,
    /// Per-coordinate standard deviation around the class centroid.
    pub class_spread: f64,
    /// Norm of every class centroid.
    pub centroid_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 200,
            d_i: 32,
            d_t: 32,
            class_spread: 0.15,
            centroid_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config("num_classes must be at least 2"));
        }
        if self.samples_per_class == 0 || self.num_classes * self.samples_per_class < 3 {
            return Err(config("synthetic dataset needs at least 3 records"));
        }
        if self.d_i == 0 || self.d_t == 0 {
            return Err(config("feature dimensions must be positive"));
        }
        if !(self.class_spread >= 0.0) || !self.class_spread.is_finite() {
            return Err(config("class_spread must be a finite non-negative number"));
        }
        if !(self.centroid_scale > 0.0) || !self.centroid_scale.is_finite() {
            return Err(config("centroid_scale must be positive"));
        }
        Ok(())
    }
}

fn random_centroid(dim: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm * scale).collect();
        }
    }
}

fn jitter(centroid: &[f64], spread: f64, rng: &mut impl Rng) -> Vec<f32> {
    centroid
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            (c + spread * z) as f32
        })
        .collect()
}

/// Draws one image and one text centroid per class and samples every record
/// around its class centroids. All records start in the train split.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, "synthetic", 0));
    let img_centroids: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| random_centroid(cfg.d_i, cfg.centroid_scale, &mut rng))
        .collect();
    let txt_centroids: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| random_centroid(cfg.d_t, cfg.centroid_scale, &mut rng))
        .collect();
    let mut records = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
    for class in 0..cfg.num_classes {
        for _ in 0..cfg.samples_per_class {
            let image = jitter(&img_centroids[class], cfg.class_spread, &mut rng);
            let text = jitter(&txt_centroids[class], cfg.class_spread, &mut rng);
            records.push(FeatureRecord {
                id: records.len() as u64,
                image,
                text,
                label: class as u32,
                split: Split::Train,
                is_clean_subset: false,
                is_injected_noisy: false,
            });
        }
    }
    Ok(Dataset {
        d_i: cfg.d_i,
        d_t: cfg.d_t,
        has_labels: true,
        records,
    })
}

/// Randomly assigns every record to train / query / retrieval.
///
/// Counts are `round(r_train * N)`, `round(r_query * N)` and the remainder.
pub fn split(mut ds: Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (rt, rq, rr) = ratios;
    if !(rt > 0.0 && rq > 0.0 && rr > 0.0) {
        return Err(config("split ratios must all be positive"));
    }
    if ((rt + rq + rr) - 1.0).abs() > 1e-9 {
        return Err(config(format!(
            "split ratios sum to {}, expected 1",
            rt + rq + rr
        )));
    }
    if ds
        .records
        .iter()
        .any(|r| r.is_clean_subset || r.is_injected_noisy)
    {
        return Err(config(
            "split must be applied before clean-subset selection and noise injection",
        ));
    }
    let n = ds.len();
    let n_train = (rt * n as f64).round() as usize;
    let n_query = (rq * n as f64).round() as usize;
    if n_train == 0 || n_query == 0 || n_train + n_query >= n {
        return Err(config(format!(
            "split of {n} records by ({rt}, {rq}, {rr}) leaves an empty partition"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, "split", 0)));
    for (rank, &pos) in order.iter().enumerate() {
        ds.records[pos].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_query {
            Split::Query
        } else {
            Split::Retrieval
        };
    }
    Ok(ds)
}

/// Marks exactly `floor(fraction * N_train)` uniformly chosen train records
/// as the trusted clean subset. Any previous marking is replaced.
pub fn select_clean_subset(mut ds: Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(config(format!(
            "clean fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if ds.noisy_count() > 0 {
        return Err(config(
            "clean subset must be selected before noise injection",
        ));
    }
    let mut train = ds.indices(Split::Train);
    let count = (fraction * train.len() as f64).floor() as usize;
    if count == 0 {
        return Err(config("clean fraction selects no records"));
    }
    if count >= train.len() {
        return Err(config("clean subset must be smaller than the train split"));
    }
    for r in &mut ds.records {
        r.is_clean_subset = false;
    }
    train.shuffle(&mut seed::rng(seed::derive(seed, "clean-subset", 0)));
    for &pos in &train[..count] {
        ds.records[pos].is_clean_subset = true;
    }
    Ok(ds)
}

/// Uniform random derangement of `0..n` (no index maps to itself), by
/// rejection sampling over uniform shuffles.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(config(format!("no derangement exists for {n} element(s)")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Miscaptions `round(rate * N_train)` non-clean train pairs by deranging
/// their text vectors among themselves.
pub fn inject_noise(mut ds: Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(config(format!("noise rate must lie in [0, 1], got {rate}")));
    }
    let train_len = ds.train_len();
    let count = (rate * train_len as f64).round() as usize;
    if count == 0 {
        return Ok(ds);
    }
    let mut pool: Vec<usize> = ds
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train && !r.is_clean_subset && !r.is_injected_noisy)
        .map(|(i, _)| i)
        .collect();
    if count > pool.len() {
        return Err(config(format!(
            "noise rate {rate} needs {count} noisy pairs but only {} non-clean train pairs exist",
            pool.len()
        )));
    }
    if count == 1 {
        return Err(config(
            "a single noisy pair cannot be miscaptioned by derangement",
        ));
    }
    let mut rng = seed::rng(seed::derive(seed, "inject-noise", 0));
    pool.shuffle(&mut rng);
    let mut chosen = pool[..count].to_vec();
    chosen.sort_unstable();
    let perm = derangement(count, &mut rng)?;
    let texts: Vec<Vec<f32>> = chosen.iter().map(|&p| ds.records[p].text.clone()).collect();
    for (slot, &pos) in chosen.iter().enumerate() {
        let rec = &mut ds.records[pos];
        rec.text = texts[perm[slot]].clone();
        rec.is_injected_noisy = true;
    }
    Ok(ds)
}

/// Settings for [`prepare`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    /// (train, query, retrieval).
    pub ratios: (f64, f64, f64),
    pub clean_fraction: f64,
    pub noise_rate: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            ratios: (0.8, 0.1, 0.1),
            clean_fraction: 0.2,
            noise_rate: 0.0,
        }
    }
}

/// [`split`] → [`select_clean_subset`] → [`inject_noise`], each stage with its
/// own seed derived from `seed`.
pub fn prepare(ds: Dataset, prep: &PrepConfig, seed: u64) -> Result<Dataset> {
    let ds = split(ds, prep.ratios, seed::derive(seed, "prep-split", 0))?;
    let ds = select_clean_subset(ds, prep.clean_fraction, seed::derive(seed, "prep-clean", 0))?;
    inject_noise(ds, prep.noise_rate, seed::derive(seed, "prep-noise", 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(classes: usize, per: usize, spread: f64) -> Dataset {
        generate_synthetic(&SynthConfig {
            num_classes: classes,
            samples_per_class: per,
            d_i: 8,
            d_t: 6,
            class_spread: spread,
            centroid_scale: 1.0,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn zero_spread_gives_centroids() {
        let ds = small(3, 5, 0.0);
        for class in 0..3u32 {
            let recs: Vec<_> = ds.records.iter().filter(|r| r.label == class).collect();
            assert_eq!(recs.len(), 5);
            assert!(recs
                .iter()
                .all(|r| r.image == recs[0].image && r.text == recs[0].text));
            let norm: f64 = recs[0]
                .image
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_centroid_separates_two_classes() {
        let cfg = SynthConfig {
            num_classes: 2,
            samples_per_class: 100,
            class_spread: 0.1,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        // empirical centroids, then brute-force nearest assignment
        let mut centroids = vec![vec![0.0f64; cfg.d_i]; 2];
        for r in &ds.records {
            for (c, &v) in centroids[r.label as usize].iter_mut().zip(&r.image) {
                *c += v as f64 / 100.0;
            }
        }
        let correct = ds
            .records
            .iter()
            .filter(|r| {
                let d: Vec<f64> = centroids
                    .iter()
                    .map(|c| {
                        c.iter()
                            .zip(&r.image)
                            .map(|(a, &b)| (a - b as f64).powi(2))
                            .sum()
                    })
                    .collect();
                let pred = if d[0] <= d[1] { 0 } else { 1 };
                pred == r.label
            })
            .count();
        assert_eq!(correct, 200);
    }

    #[test]
    fn generation_is_deterministic_and_validated() {
        assert_eq!(small(3, 4, 0.2), small(3, 4, 0.2));
        let bad = SynthConfig {
            num_classes: 2,
            samples_per_class: 1,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SynthConfig {
            num_classes: 1,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn split_counts_and_partition() {
        let ds = small(10, 200, 0.1);
        let out = split(ds.clone(), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(out.indices(Split::Train).len(), 1600);
        assert_eq!(out.indices(Split::Query).len(), 200);
        assert_eq!(out.indices(Split::Retrieval).len(), 200);
        assert_eq!(out, split(ds.clone(), (0.8, 0.1, 0.1), 1).unwrap());
        assert_ne!(out, split(ds.clone(), (0.8, 0.1, 0.1), 2).unwrap());
        assert!(split(ds.clone(), (0.8, 0.1, 0.2), 1).is_err());
        assert!(split(small(1 + 1, 2, 0.1), (0.5, 0.1, 0.4), 1).is_err());
    }

    #[test]
    fn clean_subset_counts() {
        let ds = small(10, 100, 0.1);
        let ds = select_clean_subset(ds, 0.2, 3).unwrap();
        assert_eq!(ds.clean_count(), 200);
        assert!(select_clean_subset(ds.clone(), 1.0, 3).is_err());
        assert!(select_clean_subset(ds, 0.0001, 3).is_err());
    }

    #[test]
    fn noise_counts_and_derangement() {
        let ds = select_clean_subset(small(10, 100, 0.1), 0.2, 3).unwrap();
        let before = ds.clone();
        let noisy = inject_noise(ds.clone(), 0.5, 9).unwrap();
        assert_eq!(noisy.noisy_count(), 500);
        for (a, b) in noisy.records.iter().zip(&before.records) {
            assert!(!(a.is_clean_subset && a.is_injected_noisy));
            if a.is_injected_noisy {
                assert_ne!(a.text, b.text);
                assert_eq!(a.image, b.image);
            } else {
                assert_eq!(a, b);
            }
        }
        assert_eq!(inject_noise(ds.clone(), 0.0, 9).unwrap(), ds);
        assert!(inject_noise(ds.clone(), 0.9, 9).is_err());
    }

    #[test]
    fn noise_leaves_query_and_retrieval_untouched() {
        let ds = split(small(10, 50, 0.1), (0.8, 0.1, 0.1), 0).unwrap();
        let ds = select_clean_subset(ds, 0.2, 0).unwrap();
        let noisy = inject_noise(ds.clone(), 0.3, 0).unwrap();
        assert_eq!(noisy.noisy_count(), 120);
        for (a, b) in noisy.records.iter().zip(&ds.records) {
            if a.split != Split::Train {
                assert_eq!(a, b);
            }
        }
        noisy.validate().unwrap();
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = seed::rng(0);
        assert_eq!(derangement(2, &mut rng).unwrap(), vec![1, 0]);
        assert!(derangement(1, &mut rng).is_err());
        for n in 2..30 {
            let p = derangement(n, &mut rng).unwrap();
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
    }
}
