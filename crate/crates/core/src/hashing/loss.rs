//! Weighted contrastive, quantization and binary-code arithmetic.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{config, Error, Result};

/// Floor applied to row norms before cosine normalisation.
pub const NORM_GUARD: f64 = 1e-12;

/// `u.v / (|u| |v|)`, clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(config(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 {
        return Err(Error::Numeric(
            "cosine similarity: argument 0 is a zero vector".into(),
        ));
    }
    if nv == 0.0 {
        return Err(Error::Numeric(
            "cosine similarity: argument 1 is a zero vector".into(),
        ));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `exp(cos(u, v) / tau)`.
pub fn sim_exp(u: &[f64], v: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(config(format!("temperature must be positive, got {tau}")));
    }
    Ok((cosine_sim(u, v)? / tau).exp())
}

/// Loss value with gradients for the anchor and positive code matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTerm {
    pub loss: f64,
    pub d_anchor: Array2<f64>,
    pub d_positive: Array2<f64>,
}

fn normalize_rows(h: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = h.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_GUARD));
    let unit = &h / &norms.view().insert_axis(Axis(1));
    (unit, norms)
}

/// Gradient through `u = h / max(|h|, guard)` given `dL/du`.
fn unnormalize_grad(unit: &Array2<f64>, norms: &Array1<f64>, d_unit: Array2<f64>) -> Array2<f64> {
    let mut out = d_unit;
    for ((mut g, u), &n) in out
        .axis_iter_mut(Axis(0))
        .zip(unit.axis_iter(Axis(0)))
        .zip(norms)
    {
        if n > NORM_GUARD {
            let proj = g.dot(&u);
            Zip::from(&mut g)
                .and(&u)
                .for_each(|gi, &ui| *gi = (*gi - ui * proj) / n);
        } else {
            g /= n;
        }
    }
    out
}

/// Weighted NT-Xent with anchors `a` and positives `p`:
///
/// `L = 1/M sum_j -w_j log( S(a_j,p_j) / (sum_{k!=j} S(a_j,a_k) + sum_k S(a_j,p_k)) )`
///
/// with `S(u,v) = exp(cos(u,v)/tau)`.
pub fn weighted_ntxent(
    anchors: ArrayView2<f64>,
    positives: ArrayView2<f64>,
    weights: &[f64],
    tau: f64,
) -> Result<ContrastiveTerm> {
    let m = anchors.nrows();
    if m < 2 {
        return Err(config("contrastive loss needs a batch of at least 2"));
    }
    if anchors.dim() != positives.dim() {
        return Err(config(format!(
            "anchor shape {:?} vs positive shape {:?}",
            anchors.dim(),
            positives.dim()
        )));
    }
    if weights.len() != m {
        return Err(config(format!(
            "{} weights for a batch of {m}",
            weights.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(config(format!("temperature must be positive, got {tau}")));
    }
    let (a_hat, a_norm) = normalize_rows(anchors);
    let (p_hat, p_norm) = normalize_rows(positives);
    let mut s_aa = a_hat.dot(&a_hat.t());
    let mut s_ap = a_hat.dot(&p_hat.t());
    s_aa.mapv_inplace(|v| v / tau);
    s_ap.mapv_inplace(|v| v / tau);

    let mut loss = 0.0;
    // Reuse the similarity buffers for dL/dlogit.
    for j in 0..m {
        let mut max = f64::NEG_INFINITY;
        for k in 0..m {
            if k != j {
                max = max.max(s_aa[[j, k]]);
            }
            max = max.max(s_ap[[j, k]]);
        }
        let positive = s_ap[[j, j]];
        // Overwrite the logits with their shifted exponentials, then normalize.
        let mut denom = 0.0;
        for k in 0..m {
            if k != j {
                let e = (s_aa[[j, k]] - max).exp();
                s_aa[[j, k]] = e;
                denom += e;
            }
            let e = (s_ap[[j, k]] - max).exp();
            s_ap[[j, k]] = e;
            denom += e;
        }
        let lse = max + denom.ln();
        let w = weights[j];
        loss += -w * (positive - lse);
        let c = w / m as f64;
        let scale = c / denom;
        for k in 0..m {
            s_aa[[j, k]] = if k == j { 0.0 } else { scale * s_aa[[j, k]] };
            s_ap[[j, k]] *= scale;
        }
        s_ap[[j, j]] -= c;
    }
    loss /= m as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("contrastive loss is not finite".into()));
    }
    let g_aa = s_aa;
    let g_ap = s_ap;
    let mut d_a_hat = (&g_aa + &g_aa.t()).dot(&a_hat);
    d_a_hat += &g_ap.dot(&p_hat);
    d_a_hat.mapv_inplace(|v| v / tau);
    let mut d_p_hat = g_ap.t().dot(&a_hat);
    d_p_hat.mapv_inplace(|v| v / tau);
    Ok(ContrastiveTerm {
        loss,
        d_anchor: unnormalize_grad(&a_hat, &a_norm, d_a_hat),
        d_positive: unnormalize_grad(&p_hat, &p_norm, d_p_hat),
    })
}

/// Image-anchored inter-modal loss, each anchor weighted by its pair weight.
pub fn inter_modal_loss(
    h_i: ArrayView2<f64>,
    h_t: ArrayView2<f64>,
    w: &[f64],
    tau: f64,
) -> Result<ContrastiveTerm> {
    weighted_ntxent(h_i, h_t, w, tau)
}

/// Intra-modal loss between a view and its augmentation, every anchor
/// weighted by the same scalar.
pub fn intra_modal_loss(
    h: ArrayView2<f64>,
    h_aug: ArrayView2<f64>,
    w_hat: f64,
    tau: f64,
) -> Result<ContrastiveTerm> {
    weighted_ntxent(h, h_aug, &vec![w_hat; h.nrows()], tau)
}

pub fn average_weight(w: &[f64]) -> Result<f64> {
    if w.is_empty() {
        return Err(config("cannot average an empty weight vector"));
    }
    Ok(w.iter().sum::<f64>() / w.len() as f64)
}

pub fn total_contrastive_loss(inter: f64, img: f64, txt: f64, lambda1: f64, lambda2: f64) -> f64 {
    inter + lambda1 * img + lambda2 * txt
}

pub fn total_loss(contrastive: f64, quantization: f64, alpha: f64) -> f64 {
    contrastive + alpha * quantization
}

/// Quantization loss and its gradients with respect to the four code matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationTerm {
    pub loss: f64,
    /// `d/dH` for `[H_i, H_i', H_t, H_t']`.
    pub grads: [Array2<f64>; 4],
}

/// `sum over H in {H_i, H_i', H_t, H_t'} of |B - H|_F^2`, with `B` held constant.
pub fn quantization_loss(
    codes: ArrayView2<f64>,
    h_i: ArrayView2<f64>,
    h_i_aug: ArrayView2<f64>,
    h_t: ArrayView2<f64>,
    h_t_aug: ArrayView2<f64>,
) -> Result<QuantizationTerm> {
    let hs = [h_i, h_i_aug, h_t, h_t_aug];
    if hs.iter().any(|h| h.dim() != codes.dim()) {
        return Err(config("quantization loss inputs differ in shape"));
    }
    let mut loss = 0.0;
    let grads = hs.map(|h| {
        let diff = &h - &codes;
        loss += diff.iter().map(|d| d * d).sum::<f64>();
        diff * 2.0
    });
    Ok(QuantizationTerm { loss, grads })
}

/// `sign(((H_i + H_i')/2 + (H_t + H_t')/2) / 2)` with `sign(0) = +1`.
pub fn update_binary_code(
    h_i: ArrayView2<f64>,
    h_i_aug: ArrayView2<f64>,
    h_t: ArrayView2<f64>,
    h_t_aug: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let dim = h_i.dim();
    if h_i_aug.dim() != dim || h_t.dim() != dim || h_t_aug.dim() != dim {
        return Err(config("binary code update inputs differ in shape"));
    }
    let mut out = Array2::zeros(dim);
    Zip::from(&mut out)
        .and(&h_i)
        .and(&h_i_aug)
        .and(&h_t)
        .and(&h_t_aug)
        .for_each(|b, &a, &a2, &t, &t2| {
            let avg = 0.5 * (0.5 * (a + a2) + 0.5 * (t + t2));
            *b = if avg >= 0.0 { 1.0 } else { -1.0 };
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_relative_error, numeric_matrix_grad};
    use crate::seed;
    use ndarray::array;
    use rand::Rng;

    /// Direct per-pair evaluation, independent of the batched path.
    fn naive_ntxent(a: &Array2<f64>, p: &Array2<f64>, w: &[f64], tau: f64) -> f64 {
        let m = a.nrows();
        let s = |u: ndarray::ArrayView1<f64>, v: ndarray::ArrayView1<f64>| {
            let c = u.dot(&v) / (u.dot(&u).sqrt() * v.dot(&v).sqrt());
            (c / tau).exp()
        };
        let mut total = 0.0;
        for j in 0..m {
            let mut denom = 0.0;
            for k in 0..m {
                if k != j {
                    denom += s(a.row(j), a.row(k));
                }
            }
            for k in 0..m {
                denom += s(a.row(j), p.row(k));
            }
            total += -w[j] * (s(a.row(j), p.row(j)) / denom).ln();
        }
        total / m as f64
    }

    fn random(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[3.0, -4.0], &[3.0, -4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert!(
            matches!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Numeric(m)) if m.contains("argument 0"))
        );
        assert!(
            matches!(cosine_sim(&[1.0, 0.0], &[0.0, 0.0]), Err(Error::Numeric(m)) if m.contains("argument 1"))
        );
    }

    #[test]
    fn sim_exp_examples() {
        let tau = 0.5;
        assert!((sim_exp(&[1.0, 2.0], &[1.0, 2.0], tau).unwrap() - 2f64.exp()).abs() < 1e-12);
        assert_eq!(sim_exp(&[1.0, 0.0], &[0.0, 3.0], tau).unwrap(), 1.0);
        // cos = 0.5 between unit vectors 60 degrees apart
        let v = [0.5, 3f64.sqrt() / 2.0];
        assert!((sim_exp(&[1.0, 0.0], &v, 0.5).unwrap() - std::f64::consts::E).abs() < 1e-12);
        assert!(sim_exp(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn zero_weights_annihilate() {
        let mut rng = seed::rng(1);
        let (a, p) = (random(4, 3, &mut rng), random(4, 3, &mut rng));
        let t = inter_modal_loss(a.view(), p.view(), &[0.0; 4], 0.5).unwrap();
        assert_eq!(t.loss, 0.0);
        assert!(t.d_anchor.iter().chain(&t.d_positive).all(|&g| g == 0.0));
        let t = intra_modal_loss(a.view(), p.view(), 0.0, 0.5).unwrap();
        assert_eq!(t.loss, 0.0);
    }

    #[test]
    fn matches_naive_two_by_two() {
        let a = array![[0.3, -0.8], [0.9, 0.1]];
        let p = array![[0.2, -0.5], [-0.4, 0.7]];
        let t = inter_modal_loss(a.view(), p.view(), &[1.0, 1.0], 0.5).unwrap();
        assert!((t.loss - naive_ntxent(&a, &p, &[1.0, 1.0], 0.5)).abs() < 1e-12);
        let t = intra_modal_loss(a.view(), a.view(), 1.0, 0.5).unwrap();
        assert!((t.loss - naive_ntxent(&a, &a, &[1.0, 1.0], 0.5)).abs() < 1e-12);
    }

    #[test]
    fn row_scaling_invariance() {
        let mut rng = seed::rng(2);
        let (a, p) = (random(5, 4, &mut rng), random(5, 4, &mut rng));
        let w = [1.0, 0.5, 0.0, 1.0, 0.25];
        let base = inter_modal_loss(a.view(), p.view(), &w, 0.5).unwrap().loss;
        for c in [0.5, 2.0, 10.0] {
            let mut a2 = a.clone();
            a2.row_mut(2).mapv_inplace(|v| v * c);
            let mut p2 = p.clone();
            p2.row_mut(0).mapv_inplace(|v| v * c);
            let l = inter_modal_loss(a2.view(), p2.view(), &w, 0.5)
                .unwrap()
                .loss;
            assert!((l - base).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seed::rng(3);
        for &(m, b) in &[(2, 2), (4, 8), (8, 2)] {
            let (a, p) = (random(m, b, &mut rng), random(m, b, &mut rng));
            let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
            let t = weighted_ntxent(a.view(), p.view(), &w, 0.5).unwrap();
            let na = numeric_matrix_grad(
                |x| weighted_ntxent(x.view(), p.view(), &w, 0.5).unwrap().loss,
                &a,
                1e-5,
            );
            let np = numeric_matrix_grad(
                |x| weighted_ntxent(a.view(), x.view(), &w, 0.5).unwrap().loss,
                &p,
                1e-5,
            );
            assert!(
                max_relative_error(t.d_anchor.as_slice().unwrap(), na.as_slice().unwrap()) < 1e-4
            );
            assert!(
                max_relative_error(t.d_positive.as_slice().unwrap(), np.as_slice().unwrap()) < 1e-4
            );
        }
    }

    #[test]
    fn contrastive_errors() {
        let one = array![[1.0, 0.0]];
        assert!(inter_modal_loss(one.view(), one.view(), &[1.0], 0.5).is_err());
        let two = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(inter_modal_loss(two.view(), two.view(), &[1.0], 0.5).is_err());
    }

    #[test]
    fn weight_and_total_helpers() {
        assert_eq!(average_weight(&[1.0; 7]).unwrap(), 1.0);
        assert_eq!(average_weight(&[0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(average_weight(&[0.0; 3]).unwrap(), 0.0);
        assert!(average_weight(&[]).is_err());
        assert_eq!(total_contrastive_loss(1.5, 2.0, 3.0, 0.0, 0.0), 1.5);
        assert_eq!(total_contrastive_loss(1.5, 2.0, 3.0, 1.0, 1.0), 6.5);
        assert_eq!(total_contrastive_loss(0.0, 0.0, 0.0, 1.0, 1.0), 0.0);
        assert_eq!(total_loss(3.0, 5.0, 0.0), 3.0);
        assert!((total_loss(1.0, 2.0, 0.01) - 1.02).abs() < 1e-15);
    }

    #[test]
    fn quantization_examples() {
        let b = array![[1.0, -1.0], [-1.0, 1.0]];
        let q = quantization_loss(b.view(), b.view(), b.view(), b.view(), b.view()).unwrap();
        assert_eq!(q.loss, 0.0);
        let b1 = array![[1.0]];
        let z = array![[0.0]];
        let q = quantization_loss(b1.view(), z.view(), z.view(), z.view(), z.view()).unwrap();
        assert_eq!(q.loss, 4.0);
        assert!(q.grads.iter().all(|g| g[[0, 0]] == -2.0));
        let mut rng = seed::rng(4);
        let h = random(3, 4, &mut rng);
        let bb = h.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let q = quantization_loss(bb.view(), h.view(), h.view(), h.view(), h.view()).unwrap();
        let n = numeric_matrix_grad(
            |x| {
                quantization_loss(bb.view(), x.view(), h.view(), h.view(), h.view())
                    .unwrap()
                    .loss
            },
            &h,
            1e-5,
        );
        assert!(max_relative_error(q.grads[0].as_slice().unwrap(), n.as_slice().unwrap()) < 1e-6);
    }

    #[test]
    fn code_update_examples() {
        let b = update_binary_code(
            array![[0.9]].view(),
            array![[0.7]].view(),
            array![[-0.1]].view(),
            array![[-0.3]].view(),
        )
        .unwrap();
        assert_eq!(b, array![[1.0]]);
        let h = array![[0.2, -0.3, 0.0]];
        assert_eq!(
            update_binary_code(h.view(), h.view(), h.view(), h.view()).unwrap(),
            array![[1.0, -1.0, 1.0]]
        );
    }
}
