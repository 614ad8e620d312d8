//! Noise detection: a discriminator over joint image/text features, trained
//! on the clean subset against mixed (deliberately mismatched) pairs, then
//! frozen and used to weight every training pair.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, AugmentConfig, Batch, Dataset, Phase};
use crate::error::{config, Error, Result};
use crate::nn::{Adam, DenseNet, Gradients, LayerSpec};
use crate::seed;

/// Probabilities are clamped into `[LOG_CLAMP, 1 - LOG_CLAMP]` before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Weights at or above this value survive thresholding.
pub const KEEP_THRESHOLD: f64 = 0.5;

/// `[x | y]` for one pair.
pub fn concat_joint(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() || y.is_empty() {
        return Err(config("joint features need non-empty image and text parts"));
    }
    let mut z = Vec::with_capacity(x.len() + y.len());
    z.extend_from_slice(x);
    z.extend_from_slice(y);
    Ok(z)
}

/// Row-wise `[X | Y]`.
pub fn joint_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.nrows() != y.nrows() {
        return Err(config(format!(
            "{} image rows vs {} text rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.ncols() == 0 || y.ncols() == 0 {
        return Err(config("joint features need non-empty image and text parts"));
    }
    Ok(concatenate![Axis(1), x, y])
}

/// Feature mixer: pairs every image row with a different row's text via a
/// seeded derangement. Returns the mixed joint features and the permutation
/// (`row j` uses text `perm[j]`).
pub fn mix(x: ArrayView2<f64>, y: ArrayView2<f64>, seed: u64) -> Result<(Array2<f64>, Vec<usize>)> {
    if x.nrows() < 2 {
        return Err(config("mixing needs at least 2 rows"));
    }
    let perm = crate::data::derangement(x.nrows(), &mut seed::rng(seed))?;
    let shuffled = y.select(Axis(0), &perm);
    Ok((joint_matrix(x, shuffled.view())?, perm))
}

/// Anything that scores joint features with keep-probabilities in `[0, 1]`.
pub trait PairScorer {
    fn score(&self, joint: ArrayView2<f64>) -> Result<Vec<f64>>;
}

impl PairScorer for DenseNet {
    fn score(&self, joint: ArrayView2<f64>) -> Result<Vec<f64>> {
        assign_weights(self, joint)
    }
}

/// Discriminator layout: affine layers through `hidden`, ReLU between them,
/// one sigmoid output unit.
pub fn discriminator_layers(joint_dim: usize, hidden: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut dim = joint_dim;
    for &h in hidden {
        specs.push(LayerSpec::Affine {
            in_dim: dim,
            out_dim: h,
        });
        specs.push(LayerSpec::Relu);
        dim = h;
    }
    specs.push(LayerSpec::Affine {
        in_dim: dim,
        out_dim: 1,
    });
    specs.push(LayerSpec::Sigmoid);
    specs
}

/// Binary cross-entropy with clean rows labelled 1 and mixed rows labelled 0.
///
/// `probs` holds `n_clean` clean rows followed by the same number of mixed
/// rows. The sum runs over pairs (one clean and one mixed term each) and is
/// divided by the number of pairs. Returns the loss and `dloss/dprob`.
pub fn discriminator_bce(probs: &[f64], n_clean: usize) -> Result<(f64, Vec<f64>)> {
    if n_clean == 0 || probs.len() != 2 * n_clean {
        return Err(config(
            "expected equal, non-zero numbers of clean and mixed scores",
        ));
    }
    let n = n_clean as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (k, &p) in probs.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::Numeric("non-finite discriminator output".into()));
        }
        let inside = p > LOG_CLAMP && p < 1.0 - LOG_CLAMP;
        let pc = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
        if k < n_clean {
            loss -= pc.ln();
            if inside {
                grad[k] = -1.0 / (n * pc);
            }
        } else {
            loss -= (1.0 - pc).ln();
            if inside {
                grad[k] = 1.0 / (n * (1.0 - pc));
            }
        }
    }
    Ok((loss / n, grad))
}

/// The stacked discriminator input for one clean batch:
/// `[Z_c; Z'_c; mix(X_c, Y_c); mix(X'_c, Y'_c)]`.
pub fn discriminator_inputs(
    x_c: ArrayView2<f64>,
    y_c: ArrayView2<f64>,
    x_c_aug: ArrayView2<f64>,
    y_c_aug: ArrayView2<f64>,
    seed: u64,
) -> Result<Array2<f64>> {
    let z = joint_matrix(x_c, y_c)?;
    let z_aug = joint_matrix(x_c_aug, y_c_aug)?;
    if z.dim() != z_aug.dim() {
        return Err(config(
            "original and augmented clean batches differ in shape",
        ));
    }
    let (mixed, _) = mix(x_c, y_c, seed::derive(seed, "mix", 0))?;
    let (mixed_aug, _) = mix(x_c_aug, y_c_aug, seed::derive(seed, "mix", 1))?;
    Ok(concatenate![Axis(0), z, z_aug, mixed, mixed_aug])
}

/// Discriminator loss on a clean batch and its exact parameter gradients.
pub fn discriminator_loss(
    dn: &DenseNet,
    x_c: ArrayView2<f64>,
    y_c: ArrayView2<f64>,
    x_c_aug: ArrayView2<f64>,
    y_c_aug: ArrayView2<f64>,
    seed: u64,
) -> Result<(f64, Gradients)> {
    let input = discriminator_inputs(x_c, y_c, x_c_aug, y_c_aug, seed)?;
    let (out, cache) = dn.forward_batch(input.view())?;
    let (loss, dprob) =
        discriminator_bce(out.as_slice().expect("standard layout"), input.nrows() / 2)?;
    let dout = Array2::from_shape_vec((dprob.len(), 1), dprob).expect("column vector");
    let (grads, _) = dn.backward(&cache, dout.view())?;
    Ok((loss, grads))
}

/// One Adam step of the discriminator on a clean batch; returns the pre-step loss.
pub fn discriminator_step(
    dn: &mut DenseNet,
    opt: &mut Adam,
    batch: &Batch,
    seed: u64,
) -> Result<f64> {
    let (loss, grads) = discriminator_loss(
        dn,
        batch.x.view(),
        batch.y.view(),
        batch.x_aug.view(),
        batch.y_aug.view(),
        seed,
    )?;
    opt.step(dn, &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

/// Trains the discriminator alone on clean-subset batches; returns the mean
/// loss of every epoch.
pub fn meta_train_discriminator(
    dn: &mut DenseNet,
    opt: &mut Adam,
    ds: &Dataset,
    schedule: &MetaSchedule,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let epoch_seed = seed::derive(schedule.seed, "meta-epoch", epoch as u64);
        let batches = make_batches(
            ds,
            schedule.batch_size,
            Phase::Meta,
            &schedule.augment,
            epoch_seed,
        )?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            total +=
                discriminator_step(dn, opt, batch, seed::derive(epoch_seed, "disc", b as u64))?;
        }
        losses.push(total / batches.len() as f64);
    }
    Ok(losses)
}

/// Keep-probabilities of a frozen discriminator, one per joint-feature row.
pub fn assign_weights(dn: &DenseNet, joint: ArrayView2<f64>) -> Result<Vec<f64>> {
    if dn.out_dim() != 1 {
        return Err(config("discriminator must have a single output"));
    }
    let out = dn.forward_eval(joint)?;
    Ok(out.column(0).iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Elementwise `1` if `w >= 0.5` else `0`.
pub fn threshold_weights(w: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|&v| if v >= KEEP_THRESHOLD { 1.0 } else { 0.0 })
        .collect()
}

/// Continuous and thresholded pair weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeights {
    pub w: Vec<f64>,
    pub w_discrete: Vec<f64>,
}

impl PairWeights {
    pub fn new(w: Vec<f64>) -> Self {
        let w_discrete = threshold_weights(&w);
        Self { w, w_discrete }
    }
}

/// Clean-vs-mixed accuracy at threshold 0.5 on a held-out set of matched pairs.
pub fn discriminator_accuracy(
    dn: &DenseNet,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    seed: u64,
) -> Result<f64> {
    let clean = joint_matrix(x, y)?;
    let (mixed, _) = mix(x, y, seed)?;
    let p_clean = assign_weights(dn, clean.view())?;
    let p_mixed = assign_weights(dn, mixed.view())?;
    let hits = p_clean.iter().filter(|&&p| p >= KEEP_THRESHOLD).count()
        + p_mixed.iter().filter(|&&p| p < KEEP_THRESHOLD).count();
    Ok(hits as f64 / (p_clean.len() + p_mixed.len()) as f64)
}

/// Splits `[X | Y]` rows back into their parts.
pub fn split_joint(z: ArrayView2<f64>, d_i: usize) -> (ArrayView2<f64>, ArrayView2<f64>) {
    (z.slice_move(s![.., ..d_i]), z.slice_move(s![.., d_i..]))
}
