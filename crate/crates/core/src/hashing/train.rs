use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::loss::{
    average_weight, inter_modal_loss, intra_modal_loss, quantization_loss, total_contrastive_loss,
    total_loss, update_binary_code,
};
use super::{TrainingConfig, Variant};
use crate::data::{make_batches, Batch, Dataset, Phase};
use crate::error::Result;
use crate::nn::{Adam, BuildOptions, DenseNet, ForwardCache, LayerSpec};
use crate::noise::{
    discriminator_layers, discriminator_step, joint_matrix, threshold_weights, PairScorer,
    KEEP_THRESHOLD,
};
use crate::seed;

/// Hash network layout: affine, ReLU, affine, batch norm, ReLU, affine, tanh.
pub fn hash_layers(in_dim: usize, hidden: [usize; 2], code_length: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Affine {
            in_dim,
            out_dim: hidden[0],
        },
        LayerSpec::Relu,
        LayerSpec::Affine {
            in_dim: hidden[0],
            out_dim: hidden[1],
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Affine {
            in_dim: hidden[1],
            out_dim: code_length,
        },
        LayerSpec::Tanh,
    ]
}

/// Image hash network `f` and text hash network `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashModel {
    pub f: DenseNet,
    pub g: DenseNet,
}

impl HashModel {
    pub fn new(d_i: usize, d_t: usize, cfg: &TrainingConfig) -> Result<Self> {
        let hidden = [cfg.hash_hidden[0], cfg.hash_hidden[1]];
        let opts = BuildOptions {
            bn_momentum: cfg.bn_momentum,
            bn_eps: cfg.bn_eps,
        };
        let f = DenseNet::build(
            d_i,
            &hash_layers(d_i, hidden, cfg.code_length),
            opts,
            &mut seed::rng(seed::derive(cfg.seed, "init-f", 0)),
        )?;
        let g = DenseNet::build(
            d_t,
            &hash_layers(d_t, hidden, cfg.code_length),
            opts,
            &mut seed::rng(seed::derive(cfg.seed, "init-g", 0)),
        )?;
        Ok(Self { f, g })
    }
}

/// Where per-pair weights come from in a training step.
#[derive(Clone, Copy)]
pub enum PairWeighting<'a> {
    /// Every pair weighs 1.
    Uniform,
    /// Weights from a frozen scorer on `[X|Y]` and `[X'|Y']`, optionally thresholded.
    Scored {
        scorer: &'a dyn PairScorer,
        threshold: bool,
    },
}

/// Loss breakdown of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLog {
    pub l_inter: f64,
    pub l_img: f64,
    pub l_txt: f64,
    pub l_q: f64,
    pub l_total: f64,
    /// Mean of the weights actually applied to the original pairs.
    pub mean_w: f64,
    /// Fraction of original pairs whose score reaches the keep threshold.
    pub frac_kept: f64,
}

struct Objective {
    log: StepLog,
    /// Gradients for `[H_i, H_i', H_t, H_t']`.
    grads: [Array2<f64>; 4],
}

fn pair_weights(weighting: PairWeighting<'_>, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let m = batch.len();
    match weighting {
        PairWeighting::Uniform => Ok((vec![1.0; m], vec![1.0; m], 1.0)),
        PairWeighting::Scored { scorer, threshold } => {
            let w = scorer.score(joint_matrix(batch.x.view(), batch.y.view())?.view())?;
            let w_aug =
                scorer.score(joint_matrix(batch.x_aug.view(), batch.y_aug.view())?.view())?;
            let kept = w.iter().filter(|&&v| v >= KEEP_THRESHOLD).count() as f64 / m as f64;
            if threshold {
                Ok((threshold_weights(&w), threshold_weights(&w_aug), kept))
            } else {
                Ok((w, w_aug, kept))
            }
        }
    }
}

fn objective(
    h: [ArrayView2<f64>; 4],
    w: &[f64],
    w_aug: &[f64],
    frac_kept: f64,
    cfg: &TrainingConfig,
) -> Result<Objective> {
    let mut grads = h.map(|v| Array2::<f64>::zeros(v.raw_dim()));
    let tau = cfg.tau;

    // (anchor view, positive view, weights): originals, then augmented views.
    let mut views: Vec<(usize, usize, &[f64])> = vec![(0, 2, w)];
    if cfg.inter_on_augmented {
        views.push((1, 3, w_aug));
    }
    let scale = 1.0 / views.len() as f64;
    let mut l_inter = 0.0;
    for (img, txt, weights) in views {
        let term = inter_modal_loss(h[img], h[txt], weights, tau)?;
        l_inter += scale * term.loss;
        grads[img].scaled_add(scale, &term.d_anchor);
        grads[txt].scaled_add(scale, &term.d_positive);
        if cfg.symmetric_inter {
            let mirror = inter_modal_loss(h[txt], h[img], weights, tau)?;
            l_inter += scale * mirror.loss;
            grads[txt].scaled_add(scale, &mirror.d_anchor);
            grads[img].scaled_add(scale, &mirror.d_positive);
        }
    }

    let w_hat = average_weight(w)?;
    let img = intra_modal_loss(h[0], h[1], w_hat, tau)?;
    let txt = intra_modal_loss(h[2], h[3], w_hat, tau)?;
    grads[0].scaled_add(cfg.lambda1, &img.d_anchor);
    grads[1].scaled_add(cfg.lambda1, &img.d_positive);
    grads[2].scaled_add(cfg.lambda2, &txt.d_anchor);
    grads[3].scaled_add(cfg.lambda2, &txt.d_positive);

    let codes = update_binary_code(h[0], h[1], h[2], h[3])?;
    let q = quantization_loss(codes.view(), h[0], h[1], h[2], h[3])?;
    for (g, qg) in grads.iter_mut().zip(&q.grads) {
        g.scaled_add(cfg.alpha, qg);
    }

    let l_c = total_contrastive_loss(l_inter, img.loss, txt.loss, cfg.lambda1, cfg.lambda2);
    Ok(Objective {
        log: StepLog {
            l_inter,
            l_img: img.loss,
            l_txt: txt.loss,
            l_q: q.loss,
            l_total: total_loss(l_c, q.loss, cfg.alpha),
            mean_w: w_hat,
            frac_kept,
        },
        grads,
    })
}

/// Loss breakdown of `batch` under the current parameters, without updating anything.
pub fn batch_objective(
    model: &HashModel,
    batch: &Batch,
    weighting: PairWeighting<'_>,
    cfg: &TrainingConfig,
) -> Result<StepLog> {
    let (h_i, _) = model.f.forward_batch(batch.x.view())?;
    let (h_ia, _) = model.f.forward_batch(batch.x_aug.view())?;
    let (h_t, _) = model.g.forward_batch(batch.y.view())?;
    let (h_ta, _) = model.g.forward_batch(batch.y_aug.view())?;
    let (w, w_aug, kept) = pair_weights(weighting, batch)?;
    Ok(objective(
        [h_i.view(), h_ia.view(), h_t.view(), h_ta.view()],
        &w,
        &w_aug,
        kept,
        cfg,
    )?
    .log)
}

fn backprop_pair(
    net: &mut DenseNet,
    opt: &mut Adam,
    caches: [&ForwardCache; 2],
    grads: [&Array2<f64>; 2],
) -> Result<()> {
    let (mut total, _) = net.backward(caches[0], grads[0].view())?;
    let (second, _) = net.backward(caches[1], grads[1].view())?;
    total.accumulate(&second)?;
    opt.step(net, &total)
}

/// One optimizer step of both hash networks on `batch`.
///
/// The binary target code is recomputed from this step's forward passes and
/// held constant in the quantization term.
pub fn train_step(
    model: &mut HashModel,
    opt_f: &mut Adam,
    opt_g: &mut Adam,
    batch: &Batch,
    weighting: PairWeighting<'_>,
    cfg: &TrainingConfig,
) -> Result<StepLog> {
    let (h_i, c_i) = model.f.forward_train(batch.x.view())?;
    let (h_ia, c_ia) = model.f.forward_train(batch.x_aug.view())?;
    let (h_t, c_t) = model.g.forward_train(batch.y.view())?;
    let (h_ta, c_ta) = model.g.forward_train(batch.y_aug.view())?;
    let (w, w_aug, kept) = pair_weights(weighting, batch)?;
    let obj = objective(
        [h_i.view(), h_ia.view(), h_t.view(), h_ta.view()],
        &w,
        &w_aug,
        kept,
        cfg,
    )?;
    let [d_i, d_ia, d_t, d_ta] = &obj.grads;
    backprop_pair(&mut model.f, opt_f, [&c_i, &c_ia], [d_i, d_ia])?;
    backprop_pair(&mut model.g, opt_g, [&c_t, &c_ta], [d_t, d_ta])?;
    Ok(obj.log)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    /// Batch means of the step losses.
    pub step: StepLog,
    /// Mean discriminator loss, when the discriminator trained this epoch.
    pub disc_loss: Option<f64>,
}

#[derive(Default)]
struct EpochAccumulator {
    sum: StepLog,
    disc: f64,
    n: usize,
}

impl EpochAccumulator {
    fn add(&mut self, s: StepLog) {
        self.sum.l_inter += s.l_inter;
        self.sum.l_img += s.l_img;
        self.sum.l_txt += s.l_txt;
        self.sum.l_q += s.l_q;
        self.sum.l_total += s.l_total;
        self.sum.mean_w += s.mean_w;
        self.sum.frac_kept += s.frac_kept;
        self.n += 1;
    }

    fn finish(self, phase: Phase, epoch: usize, with_disc: bool) -> EpochLog {
        let n = self.n.max(1) as f64;
        let s = self.sum;
        EpochLog {
            phase,
            epoch,
            step: StepLog {
                l_inter: s.l_inter / n,
                l_img: s.l_img / n,
                l_txt: s.l_txt / n,
                l_q: s.l_q / n,
                l_total: s.l_total / n,
                mean_w: s.mean_w / n,
                frac_kept: s.frac_kept / n,
            },
            disc_loss: with_disc.then(|| self.disc / n),
        }
    }
}

/// Result of [`run_training`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: HashModel,
    pub discriminator: Option<DenseNet>,
    pub log: Vec<EpochLog>,
}

/// Full two-phase schedule for `cfg.variant` on a prepared dataset.
///
/// - CHNR / CHNR-NW: meta phase trains the discriminator and the hash nets on
///   the clean subset with unit weights; the main phase freezes the
///   discriminator and trains on every train pair with its weights.
/// - CHNR-PTC: meta phase trains the hash nets only; main phase is unweighted.
/// - CHNR-WNR: no meta phase; all epochs are unweighted main-phase epochs.
pub fn run_training(cfg: &TrainingConfig, ds: &Dataset) -> Result<TrainedModel> {
    cfg.validate()?;
    ds.validate()?;
    let mut model = HashModel::new(ds.d_i, ds.d_t, cfg)?;
    let mut opt_f = Adam::new(cfg.hash_adam(), &model.f)?;
    let mut opt_g = Adam::new(cfg.hash_adam(), &model.g)?;
    let mut disc = if cfg.variant.uses_discriminator() {
        let joint = ds.d_i + ds.d_t;
        let dn = DenseNet::build(
            joint,
            &discriminator_layers(joint, &cfg.disc_hidden),
            BuildOptions::default(),
            &mut seed::rng(seed::derive(cfg.seed, "init-disc", 0)),
        )?;
        let opt = Adam::new(cfg.disc_adam(), &dn)?;
        Some((dn, opt))
    } else {
        None
    };
    let (meta_epochs, main_epochs) = if cfg.variant.has_meta_phase() {
        (cfg.meta_epochs, cfg.main_epochs)
    } else {
        (0, cfg.total_epochs())
    };

    let mut log = Vec::with_capacity(meta_epochs + main_epochs);
    for epoch in 0..meta_epochs {
        let epoch_seed = seed::derive(cfg.seed, "meta-epoch", epoch as u64);
        let batches = make_batches(ds, cfg.meta_batch(), Phase::Meta, &cfg.augment, epoch_seed)?;
        let mut acc = EpochAccumulator::default();
        for (b, batch) in batches.iter().enumerate() {
            if let Some((dn, opt)) = disc.as_mut() {
                acc.disc +=
                    discriminator_step(dn, opt, batch, seed::derive(epoch_seed, "disc", b as u64))?;
            }
            acc.add(train_step(
                &mut model,
                &mut opt_f,
                &mut opt_g,
                batch,
                PairWeighting::Uniform,
                cfg,
            )?);
        }
        log.push(acc.finish(Phase::Meta, epoch, disc.is_some()));
    }

    let discriminator = disc.map(|(dn, _)| dn);
    let weighting = match (cfg.variant, discriminator.as_ref()) {
        (Variant::Chnr, Some(dn)) => PairWeighting::Scored {
            scorer: dn,
            threshold: true,
        },
        (Variant::ChnrNw, Some(dn)) => PairWeighting::Scored {
            scorer: dn,
            threshold: false,
        },
        _ => PairWeighting::Uniform,
    };
    for epoch in 0..main_epochs {
        let epoch_seed = seed::derive(cfg.seed, "main-epoch", epoch as u64);
        let batches = make_batches(ds, cfg.batch_size, Phase::Main, &cfg.augment, epoch_seed)?;
        let mut acc = EpochAccumulator::default();
        for batch in &batches {
            acc.add(train_step(
                &mut model, &mut opt_f, &mut opt_g, batch, weighting, cfg,
            )?);
        }
        log.push(acc.finish(Phase::Main, epoch, false));
    }
    Ok(TrainedModel {
        model,
        discriminator,
        log,
    })
}

pub const TRAINING_LOG_HEADER: [&str; 10] = [
    "phase",
    "epoch",
    "l_inter",
    "l_img",
    "l_txt",
    "l_q",
    "l_total",
    "mean_w",
    "frac_kept",
    "l_disc",
];

/// Writes one CSV row per epoch.
pub fn write_training_log<W: Write>(log: &[EpochLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRAINING_LOG_HEADER)?;
    for e in log {
        let s = &e.step;
        out.write_record([
            e.phase.as_str().to_string(),
            e.epoch.to_string(),
            s.l_inter.to_string(),
            s.l_img.to_string(),
            s.l_txt.to_string(),
            s.l_q.to_string(),
            s.l_total.to_string(),
            s.mean_w.to_string(),
            s.frac_kept.to_string(),
            e.disc_loss.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
