use chnr::hashing::{inter_modal_loss, intra_modal_loss, quantization_loss, update_binary_code};
use chnr::nn::gradcheck::{finite_diff_check, max_relative_error, numeric_matrix_grad};
use chnr::nn::{BuildOptions, DenseNet, Layer, LayerSpec};
use chnr::noise::{discriminator_layers, discriminator_loss};
use chnr::seed;
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Random stack mixing every layer kind, always starting with an affine map.
fn random_specs(in_dim: usize, depth: usize, rng: &mut impl Rng) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut dim = in_dim;
    for i in 0..depth {
        let out = rng.random_range(2..=5);
        specs.push(LayerSpec::Affine {
            in_dim: dim,
            out_dim: out,
        });
        dim = out;
        match (i + rng.random_range(0..4)) % 4 {
            0 => specs.push(LayerSpec::Relu),
            1 => specs.push(LayerSpec::Tanh),
            2 => specs.push(LayerSpec::Sigmoid),
            _ => {
                specs.push(LayerSpec::BatchNorm);
                specs.push(LayerSpec::Tanh);
            }
        }
    }
    specs
}

/// Moves zero-initialised biases off ReLU kinks.
fn jitter_biases(net: &mut DenseNet, rng: &mut impl Rng) {
    for layer in net.layers_mut() {
        if let Layer::Affine(a) = layer {
            a.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
}

/// Linear probe loss `sum(out * r) / len(r)`.
fn linear_loss(r: Array2<f64>) -> impl Fn(&Array2<f64>) -> (f64, Array2<f64>) {
    let r = &r / r.len() as f64;
    move |out: &Array2<f64>| ((out * &r).sum(), r.clone())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 120, ..ProptestConfig::default() })]

    #[test]
    fn network_gradients_match_finite_differences(s in any::<u64>(), depth in 1usize..4, in_dim in 1usize..5, m in 3usize..7) {
        let mut rng = seed::rng(s);
        let specs = random_specs(in_dim, depth, &mut rng);
        let mut net = DenseNet::build(in_dim, &specs, BuildOptions::default(), &mut rng).unwrap();
        jitter_biases(&mut net, &mut rng);
        // Perturb batch-norm scale/shift away from their identity init.
        for layer in net.layers_mut() {
            if let Layer::BatchNorm(bn) = layer {
                bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
                bn.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
        }
        let x = normal(m, in_dim, &mut rng);
        let r = normal(m, net.out_dim(), &mut rng);
        let err = finite_diff_check(&net, linear_loss(r), x.view(), EPS).unwrap();
        prop_assert!(err < TOL, "rel err {err} for {specs:?}");
    }

    #[test]
    fn input_gradient_matches_finite_differences(s in any::<u64>(), m in 3usize..6) {
        let mut rng = seed::rng(s);
        let specs = [
            LayerSpec::Affine { in_dim: 3, out_dim: 4 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Affine { in_dim: 4, out_dim: 2 },
            LayerSpec::Tanh,
        ];
        let net = DenseNet::build(3, &specs, BuildOptions::default(), &mut rng).unwrap();
        let x = normal(m, 3, &mut rng);
        let r = normal(m, 2, &mut rng);
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let (_, dx) = net.backward(&cache, r.view()).unwrap();
        let numeric = numeric_matrix_grad(|xp| (net.forward_batch(xp.view()).unwrap().0 * &r).sum(), &x, EPS);
        let err = max_relative_error(dx.as_standard_layout().as_slice().unwrap(), numeric.as_slice().unwrap());
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn contrastive_gradients_match_finite_differences(s in any::<u64>(), mi in 0usize..3, bi in 0usize..2) {
        let m = [2, 4, 8][mi];
        let b = [2, 8][bi];
        let mut rng = seed::rng(s);
        let a = normal(m, b, &mut rng);
        let p = normal(m, b, &mut rng);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let w_hat = rng.random_range(0.0..1.0);
        let tau = rng.random_range(0.2..1.0);

        let inter = inter_modal_loss(a.view(), p.view(), &w, tau).unwrap();
        let na = numeric_matrix_grad(|x| inter_modal_loss(x.view(), p.view(), &w, tau).unwrap().loss, &a, EPS);
        let np = numeric_matrix_grad(|x| inter_modal_loss(a.view(), x.view(), &w, tau).unwrap().loss, &p, EPS);
        prop_assert!(max_relative_error(inter.d_anchor.as_slice().unwrap(), na.as_slice().unwrap()) < TOL);
        prop_assert!(max_relative_error(inter.d_positive.as_slice().unwrap(), np.as_slice().unwrap()) < TOL);

        let intra = intra_modal_loss(a.view(), p.view(), w_hat, tau).unwrap();
        let na = numeric_matrix_grad(|x| intra_modal_loss(x.view(), p.view(), w_hat, tau).unwrap().loss, &a, EPS);
        let np = numeric_matrix_grad(|x| intra_modal_loss(a.view(), x.view(), w_hat, tau).unwrap().loss, &p, EPS);
        prop_assert!(max_relative_error(intra.d_anchor.as_slice().unwrap(), na.as_slice().unwrap()) < TOL);
        prop_assert!(max_relative_error(intra.d_positive.as_slice().unwrap(), np.as_slice().unwrap()) < TOL);
    }

    #[test]
    fn quantization_gradients_match_finite_differences(s in any::<u64>(), m in 1usize..4, b in 1usize..5) {
        let mut rng = seed::rng(s);
        let hs: Vec<Array2<f64>> =
            (0..4).map(|_| Array2::from_shape_fn((m, b), |_| rng.random_range(-0.9..0.9))).collect();
        let codes = update_binary_code(hs[0].view(), hs[1].view(), hs[2].view(), hs[3].view()).unwrap();
        let q = quantization_loss(codes.view(), hs[0].view(), hs[1].view(), hs[2].view(), hs[3].view()).unwrap();
        for which in 0..4 {
            let numeric = numeric_matrix_grad(
                |x| {
                    let mut v: Vec<_> = hs.iter().map(|h| h.view()).collect();
                    v[which] = x.view();
                    quantization_loss(codes.view(), v[0], v[1], v[2], v[3]).unwrap().loss
                },
                &hs[which],
                EPS,
            );
            let err = max_relative_error(q.grads[which].as_slice().unwrap(), numeric.as_slice().unwrap());
            prop_assert!(err < 1e-6, "rel err {err}");
        }
    }
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    for trial in 0..50u64 {
        let mut rng = seed::rng(seed::derive(11, "disc-grad", trial));
        let m = [2, 4, 8][trial as usize % 3];
        let (d_i, d_t) = (3, 2);
        let mut dn = DenseNet::build(
            d_i + d_t,
            &discriminator_layers(d_i + d_t, &[8, 6, 5, 4]),
            BuildOptions::default(),
            &mut rng,
        )
        .unwrap();
        jitter_biases(&mut dn, &mut rng);
        let x = normal(m, d_i, &mut rng);
        let y = normal(m, d_t, &mut rng);
        let xa = normal(m, d_i, &mut rng);
        let ya = normal(m, d_t, &mut rng);
        let mix_seed = rng.random();
        let (_, analytic) =
            discriminator_loss(&dn, x.view(), y.view(), xa.view(), ya.view(), mix_seed).unwrap();

        let mut worst = 0.0f64;
        let mut probe = dn.clone();
        let sizes: Vec<usize> = dn.params().iter().map(|p| p.len()).collect();
        for (t, &len) in sizes.iter().enumerate() {
            for i in 0..len {
                let orig = probe.params()[t][i];
                probe.params_mut()[t][i] = orig + EPS;
                let up =
                    discriminator_loss(&probe, x.view(), y.view(), xa.view(), ya.view(), mix_seed)
                        .unwrap()
                        .0;
                probe.params_mut()[t][i] = orig - EPS;
                let down =
                    discriminator_loss(&probe, x.view(), y.view(), xa.view(), ya.view(), mix_seed)
                        .unwrap()
                        .0;
                probe.params_mut()[t][i] = orig;
                let numeric = (up - down) / (2.0 * EPS);
                worst = worst.max(max_relative_error(&[analytic.tensors()[t][i]], &[numeric]));
            }
        }
        assert!(worst < TOL, "trial {trial}: rel err {worst}");
    }
}

#[test]
fn batchnorm_eval_matches_train_with_frozen_statistics() {
    for trial in 0..20u64 {
        let mut rng = seed::rng(seed::derive(5, "bn-freeze", trial));
        let specs = [
            LayerSpec::Affine {
                in_dim: 4,
                out_dim: 6,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Tanh,
        ];
        let mut net = DenseNet::build(4, &specs, BuildOptions::default(), &mut rng).unwrap();
        let x = normal(9, 4, &mut rng);
        let (train_out, _) = net.forward_batch(x.view()).unwrap();

        // Batch statistics of the batch-norm input, computed independently.
        let Layer::Affine(a) = &net.layers()[0] else {
            unreachable!()
        };
        let pre = x.dot(&a.weight) + &a.bias;
        let mean: Array1<f64> = pre.mean_axis(Axis(0)).unwrap();
        let var: Array1<f64> = (&pre - &mean).mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        let Layer::BatchNorm(bn) = &mut net.layers_mut()[1] else {
            unreachable!()
        };
        bn.running_mean = mean;
        bn.running_var = var;

        let eval_out = net.forward_eval(x.view()).unwrap();
        let diff = (&eval_out - &train_out)
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-10, "trial {trial}: max diff {diff}");
    }
}

#[test]
fn forward_is_deterministic_and_eval_mutates_nothing() {
    let mut rng = seed::rng(3);
    let specs = [
        LayerSpec::Affine {
            in_dim: 5,
            out_dim: 4,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
    ];
    let mut net = DenseNet::build(5, &specs, BuildOptions::default(), &mut rng).unwrap();
    let x = normal(6, 5, &mut rng);
    let before = net.clone();
    assert_eq!(
        net.forward_eval(x.view()).unwrap(),
        net.forward_eval(x.view()).unwrap()
    );
    assert_eq!(net, before);
    net.forward_train(x.view()).unwrap();
    assert_ne!(
        net, before,
        "training pass folds batch statistics into the running ones"
    );
}
