//! Central finite-difference oracles for gradient checking.

use ndarray::{Array2, ArrayView2};

use super::{DenseNet, Gradients};
use crate::error::Result;

/// Smallest magnitude used in the relative-error denominator.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `|analytic - numeric| / max(GRAD_FLOOR, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(GRAD_FLOOR)
}

/// Largest [`relative_error`] across paired slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn numeric_matrix_grad(
    f: impl Fn(&Array2<f64>) -> f64,
    at: &Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let mut probe = at.clone();
    let mut out = Array2::zeros(at.raw_dim());
    for idx in 0..at.len() {
        let (r, c) = (idx / at.ncols(), idx % at.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + eps;
        let plus = f(&probe);
        probe[[r, c]] = orig - eps;
        let minus = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (plus - minus) / (2.0 * eps);
    }
    out
}

/// Analytic parameter gradients of `loss(net(probe))` from a batch-statistics
/// forward pass followed by [`DenseNet::backward`].
///
/// `loss` returns the scalar loss and its gradient with respect to the outputs.
pub fn analytic_gradients(
    net: &DenseNet,
    loss: &impl Fn(&Array2<f64>) -> (f64, Array2<f64>),
    probe: ArrayView2<f64>,
) -> Result<Gradients> {
    let (out, cache) = net.forward_batch(probe)?;
    let (_, dout) = loss(&out);
    Ok(net.backward(&cache, dout.view())?.0)
}

/// Central-difference parameter gradients of `loss(net(probe))`.
pub fn numeric_gradients(
    net: &DenseNet,
    loss: &impl Fn(&Array2<f64>) -> (f64, Array2<f64>),
    probe: ArrayView2<f64>,
    eps: f64,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(net);
    let mut work = net.clone();
    let shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let eval = |w: &DenseNet| -> Result<f64> { Ok(loss(&w.forward_batch(probe)?.0).0) };
    for (t, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let orig = work.params()[t][i];
            work.params_mut()[t][i] = orig + eps;
            let plus = eval(&work)?;
            work.params_mut()[t][i] = orig - eps;
            let minus = eval(&work)?;
            work.params_mut()[t][i] = orig;
            grads.tensors_mut()[t][i] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Largest relative error between two gradient sets of the same network.
pub fn compare_gradients(analytic: &Gradients, numeric: &Gradients) -> f64 {
    analytic
        .tensors()
        .iter()
        .zip(numeric.tensors())
        .map(|(a, n)| max_relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Max relative error between backprop and central differences over all
/// parameters of `net` at `probe`.
pub fn finite_diff_check(
    net: &DenseNet,
    loss: impl Fn(&Array2<f64>) -> (f64, Array2<f64>),
    probe: ArrayView2<f64>,
    eps: f64,
) -> Result<f64> {
    let analytic = analytic_gradients(net, &loss, probe)?;
    let numeric = numeric_gradients(net, &loss, probe, eps)?;
    Ok(compare_gradients(&analytic, &numeric))
}
