//! Dense feedforward networks with exact, hand-derived gradients.
//!
//! A [`DenseNet`] is an ordered stack of [`Layer`]s. Training-mode forward
//! passes return a [`ForwardCache`] that [`DenseNet::backward`] consumes to
//! produce parameter gradients and the gradient with respect to the input.
//! Batch normalization is differentiated through the batch statistics, so
//! every output row depends on every input row of the batch.
//!
//! All numerics are `f64`. Matrices are row-major `M x d` (one sample per row).

mod adam;
pub mod gradcheck;

pub use adam::{Adam, AdamConfig};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Error, Result};

/// Layer description used to build a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Affine { in_dim: usize, out_dim: usize },
    Relu,
    Tanh,
    Sigmoid,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// `in_dim x out_dim`, so a batch maps as `X W + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Weight kept on the old running statistic at each update.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum,
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Affine(Affine),
    Relu,
    Tanh,
    Sigmoid,
    BatchNorm(BatchNorm),
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Affine(_) => "affine",
            Layer::Relu => "relu",
            Layer::Tanh => "tanh",
            Layer::Sigmoid => "sigmoid",
            Layer::BatchNorm(_) => "batchnorm",
        }
    }
}

/// Optional knobs for [`DenseNet::build`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            bn_momentum: BatchNorm::DEFAULT_MOMENTUM,
            bn_eps: BatchNorm::DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    in_dim: usize,
    out_dim: usize,
    layers: Vec<Layer>,
}

/// Per-layer intermediates recorded by a training-mode forward pass.
#[derive(Debug, Clone)]
enum LayerCache {
    Affine {
        input: Array2<f64>,
    },
    Relu {
        input: Array2<f64>,
    },
    Tanh {
        output: Array2<f64>,
    },
    Sigmoid {
        output: Array2<f64>,
    },
    BatchNorm {
        x_hat: Array2<f64>,
        inv_std: Array1<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    layers: Vec<LayerCache>,
    /// Batch mean/variance per batch-norm layer, in layer order.
    batch_stats: Vec<(Array1<f64>, Array1<f64>)>,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Batch `(mean, biased variance)` of every batch-norm layer, in layer order.
    pub fn batch_stats(&self) -> &[(Array1<f64>, Array1<f64>)] {
        &self.batch_stats
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    None,
    Affine {
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    BatchNorm {
        gamma: Array1<f64>,
        beta: Array1<f64>,
    },
}

/// Gradients for every trainable tensor of a network, layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Affine(a) => LayerGrad::Affine {
                    weight: Array2::zeros(a.weight.raw_dim()),
                    bias: Array1::zeros(a.bias.raw_dim()),
                },
                Layer::BatchNorm(bn) => LayerGrad::BatchNorm {
                    gamma: Array1::zeros(bn.dim()),
                    beta: Array1::zeros(bn.dim()),
                },
                _ => LayerGrad::None,
            })
            .collect();
        Self { layers }
    }

    /// Flat views of each gradient tensor, in [`DenseNet::params`] order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerGrad::Affine { weight, bias } => {
                    out.push(weight.as_slice().expect("standard layout"));
                    out.push(bias.as_slice().expect("standard layout"));
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push(gamma.as_slice().expect("standard layout"));
                    out.push(beta.as_slice().expect("standard layout"));
                }
                LayerGrad::None => {}
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerGrad::Affine { weight, bias } => {
                    out.push(weight.as_slice_mut().expect("standard layout"));
                    out.push(bias.as_slice_mut().expect("standard layout"));
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push(gamma.as_slice_mut().expect("standard layout"));
                    out.push(beta.as_slice_mut().expect("standard layout"));
                }
                LayerGrad::None => {}
            }
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(usage("gradient sets belong to different networks"));
        }
        let mut dst = self.tensors_mut();
        let src = other.tensors();
        if dst.len() != src.len() {
            return Err(usage("gradient sets belong to different networks"));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            if d.len() != s.len() {
                return Err(usage("gradient tensor shape mismatch"));
            }
            d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

impl DenseNet {
    /// Build a network from layer specs with seeded Glorot-uniform weights,
    /// zero biases and identity batch-norm.
    pub fn build<R: Rng + ?Sized>(
        in_dim: usize,
        specs: &[LayerSpec],
        options: BuildOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 {
            return Err(config("network input dimension must be positive"));
        }
        if !(options.bn_eps > 0.0) || !(0.0..1.0).contains(&options.bn_momentum) {
            return Err(config("batch-norm eps must be > 0 and momentum in [0, 1)"));
        }
        let mut dim = in_dim;
        let mut layers = Vec::with_capacity(specs.len());
        for (k, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Affine { in_dim, out_dim } => {
                    if in_dim != dim {
                        return Err(config(format!(
                            "layer {k}: affine expects input dim {in_dim}, previous layer yields {dim}"
                        )));
                    }
                    if out_dim == 0 {
                        return Err(config(format!(
                            "layer {k}: affine output dim must be positive"
                        )));
                    }
                    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
                    let weight = Array2::from_shape_simple_fn((in_dim, out_dim), || {
                        rng.random_range(-limit..=limit)
                    });
                    dim = out_dim;
                    Layer::Affine(Affine {
                        weight,
                        bias: Array1::zeros(out_dim),
                    })
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Tanh => Layer::Tanh,
                LayerSpec::Sigmoid => Layer::Sigmoid,
                LayerSpec::BatchNorm => {
                    Layer::BatchNorm(BatchNorm::new(dim, options.bn_momentum, options.bn_eps))
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            in_dim,
            out_dim: dim,
            layers,
        })
    }

    /// Assemble a network from explicit layers, checking dimension compatibility.
    pub fn from_layers(in_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut dim = in_dim;
        for (k, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Affine(a) => {
                    if a.weight.nrows() != dim || a.bias.len() != a.weight.ncols() {
                        return Err(config(format!(
                            "layer {k}: affine shape incompatible with input dim {dim}"
                        )));
                    }
                    dim = a.weight.ncols();
                }
                Layer::BatchNorm(bn) => {
                    if bn.dim() != dim
                        || bn.beta.len() != dim
                        || bn.running_mean.len() != dim
                        || bn.running_var.len() != dim
                    {
                        return Err(config(format!(
                            "layer {k}: batch-norm shape incompatible with dim {dim}"
                        )));
                    }
                    if bn.running_var.iter().any(|&v| !(v > 0.0)) {
                        return Err(config(format!(
                            "layer {k}: running variance must be positive"
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(Self {
            in_dim,
            out_dim: dim,
            layers,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Flat views of every trainable tensor, in layer order (weight, bias / gamma, beta).
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Affine(a) => {
                    out.push(a.weight.as_slice().expect("standard layout"));
                    out.push(a.bias.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice().expect("standard layout"));
                    out.push(bn.beta.as_slice().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Affine(a) => {
                    out.push(a.weight.as_slice_mut().expect("standard layout"));
                    out.push(a.bias.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                    out.push(bn.beta.as_slice_mut().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    fn check_input(&self, input: &ArrayView2<f64>, train: bool) -> Result<()> {
        if input.ncols() != self.in_dim {
            return Err(config(format!(
                "input has {} columns, network expects {}",
                input.ncols(),
                self.in_dim
            )));
        }
        if input.nrows() == 0 {
            return Err(config("input batch is empty"));
        }
        if train && input.nrows() < 2 && self.has_batchnorm() {
            return Err(config("training-mode batch norm needs at least 2 rows"));
        }
        if let Some(pos) = input.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite input at row {}, column {}",
                pos / self.in_dim,
                pos % self.in_dim
            )));
        }
        Ok(())
    }

    /// Inference pass using running batch-norm statistics. Mutates nothing.
    pub fn forward_eval(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input, false)?;
        let mut x = input.to_owned();
        for layer in &self.layers {
            x = match layer {
                Layer::Affine(a) => x.dot(&a.weight) + &a.bias,
                Layer::Relu => x.mapv_into(|v| v.max(0.0)),
                Layer::Tanh => x.mapv_into(f64::tanh),
                Layer::Sigmoid => x.mapv_into(sigmoid),
                Layer::BatchNorm(bn) => {
                    let scale = Zip::from(&bn.gamma)
                        .and(&bn.running_var)
                        .map_collect(|&g, &v| g / (v + bn.eps).sqrt());
                    let shift = &bn.beta - &(&bn.running_mean * &scale);
                    x * &scale + &shift
                }
            };
        }
        Ok(x)
    }

    /// Training-mode pass (batch statistics) that leaves running statistics untouched.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&input, true)?;
        let rows = input.nrows();
        let mut x = input.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::new();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Affine(a) => {
                    let out = x.dot(&a.weight) + &a.bias;
                    (out, LayerCache::Affine { input: x })
                }
                Layer::Relu => (x.mapv(|v| v.max(0.0)), LayerCache::Relu { input: x }),
                Layer::Tanh => {
                    let out = x.mapv_into(f64::tanh);
                    (out.clone(), LayerCache::Tanh { output: out })
                }
                Layer::Sigmoid => {
                    let out = x.mapv_into(sigmoid);
                    (out.clone(), LayerCache::Sigmoid { output: out })
                }
                Layer::BatchNorm(bn) => {
                    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                    let centered = x - &mean;
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / rows as f64;
                    let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                    let x_hat = centered * &inv_std;
                    let out = &x_hat * &bn.gamma + &bn.beta;
                    batch_stats.push((mean, var));
                    (out, LayerCache::BatchNorm { x_hat, inv_std })
                }
            };
            caches.push(cache);
            x = next;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok((
            x,
            ForwardCache {
                rows,
                layers: caches,
                batch_stats,
            },
        ))
    }

    /// Training-mode pass; also folds the batch statistics into the running ones.
    pub fn forward_train(&mut self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        let (out, cache) = self.forward_batch(input)?;
        let mut stats = cache.batch_stats.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                let (mean, var) = stats.next().expect("one stat pair per batch-norm layer");
                let m = bn.momentum;
                Zip::from(&mut bn.running_mean)
                    .and(mean)
                    .for_each(|r, &b| *r = m * *r + (1.0 - m) * b);
                Zip::from(&mut bn.running_var)
                    .and(var)
                    .for_each(|r, &b| *r = m * *r + (1.0 - m) * b);
            }
        }
        Ok((out, cache))
    }

    /// Exact gradients of `sum(output * output_grad)` with respect to every
    /// parameter and to the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if cache.layers.len() != self.layers.len() {
            return Err(usage("forward cache does not belong to this network"));
        }
        if output_grad.dim() != (cache.rows, self.out_dim) {
            return Err(usage(format!(
                "output gradient is {:?}, expected ({}, {})",
                output_grad.dim(),
                cache.rows,
                self.out_dim
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = output_grad.to_owned();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let (grad, next) = match (layer, lc) {
                (Layer::Affine(a), LayerCache::Affine { input }) => {
                    if input.ncols() != a.weight.nrows() {
                        return Err(usage("forward cache does not belong to this network"));
                    }
                    let weight = input.t().dot(&g).as_standard_layout().into_owned();
                    let bias = g.sum_axis(Axis(0));
                    let dx = g.dot(&a.weight.t());
                    (LayerGrad::Affine { weight, bias }, dx)
                }
                (Layer::Relu, LayerCache::Relu { input }) => {
                    Zip::from(&mut g).and(input).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    (LayerGrad::None, g)
                }
                (Layer::Tanh, LayerCache::Tanh { output }) => {
                    Zip::from(&mut g)
                        .and(output)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    (LayerGrad::None, g)
                }
                (Layer::Sigmoid, LayerCache::Sigmoid { output }) => {
                    Zip::from(&mut g)
                        .and(output)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    (LayerGrad::None, g)
                }
                (Layer::BatchNorm(bn), LayerCache::BatchNorm { x_hat, inv_std }) => {
                    if x_hat.ncols() != bn.dim() {
                        return Err(usage("forward cache does not belong to this network"));
                    }
                    let m = cache.rows as f64;
                    let beta = g.sum_axis(Axis(0));
                    let gamma = (&g * x_hat).sum_axis(Axis(0));
                    // dx = gamma * inv_std / m * (m*dy - sum(dy) - x_hat * sum(dy*x_hat))
                    let coef = &bn.gamma * inv_std / m;
                    let mut dx = g * m - &beta;
                    dx = dx - &(x_hat * &gamma);
                    dx *= &coef;
                    (LayerGrad::BatchNorm { gamma, beta }, dx)
                }
                (l, _) => {
                    return Err(usage(format!(
                        "forward cache does not match layer kind {}",
                        l.name()
                    )))
                }
            };
            grads.push(grad);
            g = next;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, g))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn identity_net(d: usize) -> DenseNet {
        DenseNet::from_layers(
            d,
            vec![Layer::Affine(Affine {
                weight: Array2::eye(d),
                bias: Array1::zeros(d),
            })],
        )
        .unwrap()
    }

    #[test]
    fn identity_affine_passes_input_through() {
        let net = identity_net(3);
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        assert_eq!(net.forward_eval(x.view()).unwrap(), x);
        assert_eq!(net.forward_batch(x.view()).unwrap().0, x);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = DenseNet::from_layers(3, vec![Layer::Relu]).unwrap();
        let y = net.forward_eval(array![[-1.0, 0.0, 2.0]].view()).unwrap();
        assert_eq!(y, array![[0.0, 0.0, 2.0]]);
    }

    #[test]
    fn ones_affine_then_tanh() {
        let net = DenseNet::from_layers(
            2,
            vec![
                Layer::Affine(Affine {
                    weight: Array2::ones((2, 2)),
                    bias: Array1::zeros(2),
                }),
                Layer::Tanh,
            ],
        )
        .unwrap();
        let y = net.forward_eval(array![[1.0, 1.0]].view()).unwrap();
        assert_abs_diff_eq!(y[[0, 0]], 0.96403, epsilon = 1e-5);
        assert_abs_diff_eq!(y[[0, 1]], 2f64.tanh(), epsilon = 1e-15);
    }

    #[test]
    fn sum_loss_weight_gradient_is_column_sums() {
        let net = identity_net(3);
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let (grads, dx) = net.backward(&cache, Array2::ones((2, 3)).view()).unwrap();
        let LayerGrad::Affine { weight, bias } = &grads.layers[0] else {
            panic!()
        };
        // d/dW_ab sum_j (x W)_jb = sum_j x_ja, identical for every output column b
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(weight[[a, b]], x.column(a).sum());
            }
        }
        assert_eq!(bias, &array![2.0, 2.0, 2.0]);
        assert_eq!(dx, Array2::ones((2, 3)));
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = seed::rng(3);
        let net = DenseNet::build(
            4,
            &[
                LayerSpec::Affine {
                    in_dim: 4,
                    out_dim: 5,
                },
                LayerSpec::Relu,
                LayerSpec::BatchNorm,
                LayerSpec::Affine {
                    in_dim: 5,
                    out_dim: 2,
                },
                LayerSpec::Tanh,
            ],
            BuildOptions::default(),
            &mut rng,
        )
        .unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 0.5);
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let (grads, dx) = net.backward(&cache, Array2::zeros((3, 2)).view()).unwrap();
        assert!(grads.is_zero());
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut rng = seed::rng(0);
        let err = DenseNet::build(
            3,
            &[LayerSpec::Affine {
                in_dim: 4,
                out_dim: 2,
            }],
            BuildOptions::default(),
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let net = identity_net(3);
        assert!(matches!(
            net.forward_eval(Array2::zeros((1, 2)).view()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_input_is_data_error() {
        let net = identity_net(2);
        let x = array![[1.0, f64::NAN]];
        assert!(matches!(net.forward_eval(x.view()), Err(Error::Data(_))));
    }

    #[test]
    fn batchnorm_train_mode_needs_two_rows() {
        let net =
            DenseNet::from_layers(2, vec![Layer::BatchNorm(BatchNorm::new(2, 0.9, 1e-5))]).unwrap();
        assert!(matches!(
            net.forward_batch(array![[1.0, 2.0]].view()),
            Err(Error::Config(_))
        ));
        assert!(net.forward_eval(array![[1.0, 2.0]].view()).is_ok());
    }

    #[test]
    fn mismatched_cache_is_usage_error() {
        let a = identity_net(2);
        let b = DenseNet::from_layers(2, vec![Layer::Relu]).unwrap();
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let (_, cache) = b.forward_batch(x.view()).unwrap();
        assert!(matches!(a.backward(&cache, x.view()), Err(Error::Usage(_))));
    }

    #[test]
    fn batchnorm_eval_matches_train_when_running_stats_frozen() {
        let mut rng = seed::rng(11);
        let mut net = DenseNet::build(
            3,
            &[
                LayerSpec::Affine {
                    in_dim: 3,
                    out_dim: 4,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Tanh,
            ],
            BuildOptions::default(),
            &mut rng,
        )
        .unwrap();
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let (train_out, cache) = net.forward_batch(x.view()).unwrap();
        let (mean, var) = cache.batch_stats[0].clone();
        if let Layer::BatchNorm(bn) = &mut net.layers_mut()[1] {
            bn.running_mean = mean;
            bn.running_var = var;
        }
        let eval_out = net.forward_eval(x.view()).unwrap();
        for (a, b) in train_out.iter().zip(&eval_out) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn eval_mode_mutates_nothing_and_train_updates_running_stats() {
        let mut rng = seed::rng(5);
        let mut net = DenseNet::build(
            2,
            &[
                LayerSpec::Affine {
                    in_dim: 2,
                    out_dim: 2,
                },
                LayerSpec::BatchNorm,
            ],
            BuildOptions::default(),
            &mut rng,
        )
        .unwrap();
        let before = net.clone();
        let x = array![[1.0, 2.0], [3.0, -4.0], [0.5, 0.5]];
        net.forward_eval(x.view()).unwrap();
        assert_eq!(net, before);
        net.forward_train(x.view()).unwrap();
        assert_ne!(net, before);
        if let Layer::BatchNorm(bn) = &net.layers()[1] {
            assert!(bn.running_var.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn build_is_deterministic() {
        let specs = [
            LayerSpec::Affine {
                in_dim: 3,
                out_dim: 8,
            },
            LayerSpec::Relu,
        ];
        let a = DenseNet::build(3, &specs, BuildOptions::default(), &mut seed::rng(9)).unwrap();
        let b = DenseNet::build(3, &specs, BuildOptions::default(), &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 11.0).sqrt();
        let Layer::Affine(aff) = &a.layers()[0] else {
            panic!()
        };
        assert!(aff.weight.iter().all(|w| w.abs() <= limit));
        assert!(aff.bias.iter().all(|&b| b == 0.0));
    }
}
