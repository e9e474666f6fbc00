//! Central-difference checks for every graph op, in double precision.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use scansr::nn::{
    init_discriminator_weights, init_generator_weights, GraphBuilder, LayerKind, Mode, Network, Tensor, WeightMode,
};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha12Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut().iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    t
}

/// Scalar objective: fixed random projection of the network output.
struct Harness {
    net: Network<f64>,
    inputs: Vec<Tensor<f64>>,
    proj: Vec<f64>,
}

impl Harness {
    fn new(mut net: Network<f64>, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for state in net.layers.iter_mut() {
            if let Some(w) = state.weight.as_mut() {
                for v in w.data_mut().iter_mut() {
                    *v = rng.gen_range(-0.6..0.6);
                }
            }
            if let Some(g) = state.gain.as_mut() {
                for v in g.iter_mut() {
                    *v = rng.gen_range(0.5..1.5);
                }
            }
            if let Some(b) = state.bias.as_mut() {
                for v in b.iter_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
            if let Some(sp) = state.spectral.as_mut() {
                for v in sp.u.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                for v in sp.v.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let nu: f64 = sp.u.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nv: f64 = sp.v.iter().map(|v| v * v).sum::<f64>().sqrt();
                sp.u.iter_mut().for_each(|v| *v /= nu);
                sp.v.iter_mut().for_each(|v| *v /= nv);
            }
            if let Some(bn) = state.bn.as_mut() {
                for v in bn.running_mean.iter_mut() {
                    *v = rng.gen_range(-0.2..0.2);
                }
            }
        }
        let inputs: Vec<Tensor<f64>> =
            net.input_shapes.clone().into_iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let out_shape = *net.node_shapes.last().unwrap();
        let out_len: usize = out_shape.iter().product();
        let proj: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Harness { net, inputs, proj }
    }

    fn objective(&mut self) -> f64 {
        let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
        let trace = self.net.forward(&self.inputs, Mode::Eval, &mut dummy).unwrap();
        trace.output().data().iter().zip(&self.proj).map(|(a, b)| a * b).sum()
    }

    /// Compare analytic and finite-difference gradients for every parameter
    /// and every graph input, on a subsample of indices.
    fn check(&mut self, label: &str) {
        let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
        let trace = self.net.forward(&self.inputs, Mode::Eval, &mut dummy).unwrap();
        let out_shape = trace.output().shape();
        let grad_out = Tensor::from_vec(out_shape, self.proj.clone());
        let grads = self.net.backward(&trace, grad_out).unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(777);
        let mut check_slot = |analytic: &[f64], write: &mut dyn FnMut(&mut Network<f64>, usize, f64), this: &mut Harness, what: &str| {
            let len = analytic.len();
            let count = len.min(12);
            for _ in 0..count {
                let idx = rng.gen_range(0..len);
                let read = |net: &Network<f64>| -> f64 {
                    let _ = net;
                    0.0
                };
                let _ = read;
                // central difference
                write(&mut this.net, idx, H);
                let plus = this.objective();
                write(&mut this.net, idx, -2.0 * H);
                let minus = this.objective();
                write(&mut this.net, idx, H);
                let fd = (plus - minus) / (2.0 * H);
                let a = analytic[idx];
                let denom = fd.abs().max(a.abs()).max(1e-6);
                let rel = (a - fd).abs() / denom;
                assert!(
                    rel < TOL,
                    "{label}/{what}[{idx}]: analytic {a:.8e} vs fd {fd:.8e} (rel {rel:.2e})"
                );
            }
        };

        for li in 0..self.net.spec.layers.len() {
            if let Some(gw) = grads.layers[li].weight.clone() {
                check_slot(
                    gw.data(),
                    &mut |net, idx, delta| {
                        net.layers[li].weight.as_mut().unwrap().data_mut()[idx] += delta;
                    },
                    self,
                    &format!("weight{li}"),
                );
            }
            if let Some(gg) = grads.layers[li].gain.clone() {
                check_slot(
                    &gg,
                    &mut |net, idx, delta| {
                        net.layers[li].gain.as_mut().unwrap()[idx] += delta;
                    },
                    self,
                    &format!("gain{li}"),
                );
            }
            if let Some(gb) = grads.layers[li].bias.clone() {
                check_slot(
                    &gb,
                    &mut |net, idx, delta| {
                        net.layers[li].bias.as_mut().unwrap()[idx] += delta;
                    },
                    self,
                    &format!("bias{li}"),
                );
            }
        }
        for (ii, ig) in grads.inputs.iter().enumerate() {
            let analytic = ig.data().to_vec();
            let len = analytic.len();
            let count = len.min(12);
            for _ in 0..count {
                let idx = rng.gen_range(0..len);
                self.inputs[ii].data_mut()[idx] += H;
                let plus = self.objective();
                self.inputs[ii].data_mut()[idx] -= 2.0 * H;
                let minus = self.objective();
                self.inputs[ii].data_mut()[idx] += H;
                let fd = (plus - minus) / (2.0 * H);
                let a = analytic[idx];
                let denom = fd.abs().max(a.abs()).max(1e-6);
                let rel = (a - fd).abs() / denom;
                assert!(
                    rel < TOL,
                    "{label}/input{ii}[{idx}]: analytic {a:.8e} vs fd {fd:.8e} (rel {rel:.2e})"
                );
            }
        }
    }
}

fn single_layer(kind: LayerKind, in_shape: [usize; 4]) -> Network<f64> {
    let mut b = GraphBuilder::new(1);
    b.push("layer", kind, 0);
    Network::build(b.finish(), &[in_shape]).unwrap()
}

#[test]
fn conv_plain_stride1() {
    let net = single_layer(
        LayerKind::Conv { out_c: 3, k: 3, stride: 1, mode: WeightMode::Plain, bias: true },
        [2, 6, 6, 2],
    );
    Harness::new(net, 1).check("conv_s1");
}

#[test]
fn conv_plain_stride2() {
    let net = single_layer(
        LayerKind::Conv { out_c: 4, k: 3, stride: 2, mode: WeightMode::Plain, bias: true },
        [1, 7, 7, 3],
    );
    Harness::new(net, 2).check("conv_s2");
}

#[test]
fn conv_weight_norm() {
    let net = single_layer(
        LayerKind::Conv { out_c: 3, k: 3, stride: 1, mode: WeightMode::WeightNorm, bias: false },
        [1, 5, 5, 2],
    );
    Harness::new(net, 3).check("conv_wn");
}

#[test]
fn conv_spectral() {
    let net = single_layer(
        LayerKind::Conv { out_c: 3, k: 3, stride: 2, mode: WeightMode::Spectral, bias: true },
        [1, 6, 6, 2],
    );
    Harness::new(net, 4).check("conv_sn");
}

#[test]
fn linear_plain_and_spectral() {
    let net = single_layer(LayerKind::Linear { out_f: 5, mode: WeightMode::Plain, bias: true }, [3, 1, 1, 7]);
    Harness::new(net, 5).check("linear");
    let net = single_layer(LayerKind::Linear { out_f: 4, mode: WeightMode::Spectral, bias: false }, [2, 1, 1, 6]);
    Harness::new(net, 6).check("linear_sn");
}

#[test]
fn resizes() {
    let net = single_layer(LayerKind::BilinearResize { out_h: 9, out_w: 9 }, [1, 5, 5, 2]);
    Harness::new(net, 7).check("bilinear_up");
    let net = single_layer(LayerKind::BilinearResize { out_h: 3, out_w: 3 }, [1, 6, 6, 2]);
    Harness::new(net, 8).check("bilinear_down");
    let net = single_layer(LayerKind::NearestResize { out_h: 8, out_w: 8 }, [1, 4, 4, 2]);
    Harness::new(net, 9).check("nearest_up");
}

#[test]
fn activations() {
    for (seed, kind, label) in [
        (10u64, LayerKind::Relu, "relu"),
        (11, LayerKind::LeakyRelu { slope: 0.2 }, "leaky"),
        (12, LayerKind::Softplus, "softplus"),
    ] {
        let net = single_layer(kind, [2, 4, 4, 3]);
        Harness::new(net, seed).check(label);
    }
}

#[test]
fn mean_only_bn_passes_gradient_through() {
    let net = single_layer(LayerKind::MeanOnlyBn, [2, 4, 4, 3]);
    Harness::new(net, 13).check("bn");
}

#[test]
fn residual_add_routes_both_branches() {
    let mut b = GraphBuilder::new(1);
    let c1 = b.push(
        "c1",
        LayerKind::Conv { out_c: 2, k: 3, stride: 1, mode: WeightMode::Plain, bias: false },
        0,
    );
    let c2 = b.push(
        "c2",
        LayerKind::Conv { out_c: 2, k: 3, stride: 1, mode: WeightMode::Plain, bias: false },
        c1,
    );
    b.push("add", LayerKind::ResidualAdd { other: c1 }, c2);
    let net = Network::build(b.finish(), &[[1, 5, 5, 2]]).unwrap();
    Harness::new(net, 14).check("residual");
}

#[test]
fn random_crop_fixed_origin() {
    let net = single_layer(LayerKind::RandomCrop { size: 3 }, [1, 6, 6, 2]);
    Harness::new(net, 15).check("crop");
}

/// Composed two-layer conv net with norms and activations between.
#[test]
fn composed_two_layer_network() {
    let mut b = GraphBuilder::new(1);
    let c1 = b.push(
        "c1",
        LayerKind::Conv { out_c: 4, k: 3, stride: 2, mode: WeightMode::WeightNorm, bias: false },
        0,
    );
    let n1 = b.push("bn1", LayerKind::MeanOnlyBn, c1);
    let r1 = b.push("relu1", LayerKind::Relu, n1);
    let c2 = b.push(
        "c2",
        LayerKind::Conv { out_c: 2, k: 3, stride: 1, mode: WeightMode::WeightNorm, bias: false },
        r1,
    );
    b.push("up", LayerKind::BilinearResize { out_h: 8, out_w: 8 }, c2);
    let net = Network::build(b.finish(), &[[1, 8, 8, 1]]).unwrap();
    Harness::new(net, 16).check("two_layer");
}

#[test]
fn construction_errors_name_the_layer() {
    let mut b = GraphBuilder::new(1);
    let c1 = b.push(
        "first",
        LayerKind::Conv { out_c: 2, k: 3, stride: 2, mode: WeightMode::Plain, bias: false },
        0,
    );
    b.push("bad_crop", LayerKind::RandomCrop { size: 99 }, c1);
    let err = Network::<f64>::build(b.finish(), &[[1, 8, 8, 1]]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("bad_crop"), "error should name the layer: {msg}");
}

#[test]
fn stride_two_shape_and_leaky_value() {
    let net = single_layer(
        LayerKind::Conv { out_c: 1, k: 3, stride: 2, mode: WeightMode::Plain, bias: false },
        [1, 8, 8, 1],
    );
    assert_eq!(*net.node_shapes.last().unwrap(), [1, 4, 4, 1]);

    let mut lnet = single_layer(LayerKind::LeakyRelu { slope: 0.2 }, [1, 1, 1, 1]);
    let x = Tensor::from_vec([1, 1, 1, 1], vec![-1.0]);
    let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
    let tr = lnet.forward(&[x], Mode::Eval, &mut dummy).unwrap();
    assert_eq!(tr.output().data()[0], -0.2);
}

#[test]
fn identity_graph_returns_input() {
    // A graph with zero layers is degenerate; the closest identity is a
    // residual of zeros, so instead check a 1-layer bn with zero means.
    let mut net = single_layer(LayerKind::MeanOnlyBn, [1, 3, 3, 1]);
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let x = rand_tensor([1, 3, 3, 1], &mut rng);
    let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
    let tr = net.forward(&[x.clone()], Mode::Eval, &mut dummy).unwrap();
    assert_eq!(tr.output().data(), x.data());
}

#[test]
fn generator_init_normalizes_probe_activations() {
    let mut b = GraphBuilder::new(1);
    let c1 = b.push(
        "c1",
        LayerKind::Conv { out_c: 8, k: 3, stride: 1, mode: WeightMode::WeightNorm, bias: false },
        0,
    );
    let n1 = b.push("bn1", LayerKind::MeanOnlyBn, c1);
    let r1 = b.push("r1", LayerKind::Relu, n1);
    let c2 = b.push(
        "c2",
        LayerKind::Conv { out_c: 8, k: 3, stride: 2, mode: WeightMode::WeightNorm, bias: false },
        r1,
    );
    let r2 = b.push("r2", LayerKind::Relu, c2);
    b.push(
        "out",
        LayerKind::Conv { out_c: 1, k: 3, stride: 1, mode: WeightMode::WeightNorm, bias: false },
        r2,
    );
    let mut net: Network<f64> = Network::build(b.finish(), &[[1, 32, 32, 1]]).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    init_generator_weights(&mut net, &mut rng).unwrap();
    for (name, sd) in net.probe_layer_stds(&mut rng).unwrap() {
        assert!(
            (0.5..=2.0).contains(&sd),
            "layer {name} probe std {sd} outside [0.5, 2.0]"
        );
    }
    // No biases anywhere in a generator graph.
    assert!(net.layers.iter().all(|l| l.bias.is_none()));
}

#[test]
fn discriminator_init_statistics() {
    let mut b = GraphBuilder::new(1);
    let c1 = b.push(
        "c1",
        LayerKind::Conv { out_c: 24, k: 5, stride: 2, mode: WeightMode::Spectral, bias: true },
        0,
    );
    let l1 = b.push("l1", LayerKind::LeakyRelu { slope: 0.2 }, c1);
    b.push("head", LayerKind::Linear { out_f: 1, mode: WeightMode::Spectral, bias: true }, l1);
    let mut net: Network<f64> = Network::build(b.finish(), &[[1, 16, 16, 24]]).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(33);
    init_discriminator_weights(&mut net, &mut rng).unwrap();

    let mut all: Vec<f64> = Vec::new();
    for l in &net.layers {
        if let Some(w) = l.weight.as_ref() {
            all.extend(w.data().iter().copied());
        }
        if let Some(bv) = l.bias.as_ref() {
            assert!(bv.iter().all(|&v| v == 0.0), "biases must start at zero");
        }
    }
    assert!(all.len() > 10_000);
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.003, "weight mean {mean}");
    assert!((sd - 0.03).abs() / 0.03 < 0.05, "weight sd {sd}");

    // Determinism under a fixed seed.
    let mut net2 = Network::build(net.spec.clone(), &[[1, 16, 16, 24]]).unwrap();
    let mut rng2 = ChaCha12Rng::seed_from_u64(33);
    init_discriminator_weights(&mut net2, &mut rng2).unwrap();
    assert_eq!(net.layers, net2.layers);
}

/// Frozen batch norm state is bit-identical across further train passes.
#[test]
fn frozen_bn_never_moves() {
    let mut net = single_layer(LayerKind::MeanOnlyBn, [1, 4, 4, 2]);
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let x = rand_tensor([1, 4, 4, 2], &mut rng);
    let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
    net.forward(&[x.clone()], Mode::Train, &mut dummy).unwrap();
    let before = net.layers[0].bn.as_ref().unwrap().running_mean.clone();
    net.set_bn_frozen(true);
    for _ in 0..1000 {
        let y = rand_tensor([1, 4, 4, 2], &mut rng);
        net.forward(&[y], Mode::Train, &mut dummy).unwrap();
    }
    let after = net.layers[0].bn.as_ref().unwrap().running_mean.clone();
    assert_eq!(before, after);
}
