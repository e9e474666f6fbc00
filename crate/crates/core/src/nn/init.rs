//! Weight initialization schemes.

use super::graph::{LayerKind, Mode, Network};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn fill_normal<T: Scalar>(data: &mut [T], sd: f64, rng: &mut impl Rng) {
    let dist = Normal::new(0.0, sd).expect("valid sd");
    for v in data.iter_mut() {
        *v = T::from_f64(dist.sample(rng));
    }
}

/// Generator scheme: draw every weight from N(0, 0.05), then propagate a
/// probe image with values uniform on [-0.8, 0.8] and rescale each
/// parameterized layer so its output standard deviation on the probe is 1
/// (weight-norm layers rescale their gains, plain layers their weights).
pub fn init_generator_weights<T: Scalar>(net: &mut Network<T>, rng: &mut impl Rng) -> Result<()> {
    for state in net.layers.iter_mut() {
        if let Some(w) = state.weight.as_mut() {
            fill_normal(w.data_mut(), 0.05, rng);
        }
        if let Some(g) = state.gain.as_mut() {
            for v in g.iter_mut() {
                *v = T::one();
            }
        }
    }
    let probe: Vec<Tensor<T>> = net
        .input_shapes
        .clone()
        .into_iter()
        .map(|shape| {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut().iter_mut() {
                *v = T::from_f64(rng.gen_range(-0.8..0.8));
            }
            t
        })
        .collect();
    let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
    let parameterized: Vec<usize> = net
        .spec
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Linear { .. }))
        .map(|(i, _)| i)
        .collect();
    for li in parameterized {
        let trace = net.forward(&probe, Mode::Eval, &mut dummy)?;
        let node = net.spec.n_inputs + li;
        let out = &trace.activations[node];
        let n = out.len() as f64;
        let mean: f64 = out.data().iter().map(|v| v.into_f64()).sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|v| (v.into_f64() - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-8);
        let scale = T::from_f64(1.0 / sd);
        let state = &mut net.layers[li];
        if let Some(g) = state.gain.as_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        } else if let Some(w) = state.weight.as_mut() {
            w.scale(scale);
        }
    }
    Ok(())
}

/// Discriminator scheme: weights from N(0, 0.03), biases zero, spectral
/// singular-vector estimates from normalized Gaussian draws.
pub fn init_discriminator_weights<T: Scalar>(net: &mut Network<T>, rng: &mut impl Rng) -> Result<()> {
    for (state, spec) in net.layers.iter_mut().zip(&net.spec.layers) {
        let sd = match spec.kind {
            LayerKind::Conv { .. } | LayerKind::Linear { .. } => 0.03,
            _ => continue,
        };
        if let Some(w) = state.weight.as_mut() {
            fill_normal(w.data_mut(), sd, rng);
        }
        if let Some(b) = state.bias.as_mut() {
            for v in b.iter_mut() {
                *v = T::zero();
            }
        }
        if let Some(sp) = state.spectral.as_mut() {
            fill_normal(&mut sp.u, 1.0, rng);
            fill_normal(&mut sp.v, 1.0, rng);
            norm_vec(&mut sp.u);
            norm_vec(&mut sp.v);
        }
    }
    Ok(())
}

/// Plain scheme for small regression heads: N(0, sd) weights, zero biases.
pub fn init_plain<T: Scalar>(net: &mut Network<T>, sd: f64, rng: &mut impl Rng) {
    for state in net.layers.iter_mut() {
        if let Some(w) = state.weight.as_mut() {
            fill_normal(w.data_mut(), sd, rng);
        }
        if let Some(b) = state.bias.as_mut() {
            for v in b.iter_mut() {
                *v = T::zero();
            }
        }
        if let Some(sp) = state.spectral.as_mut() {
            fill_normal(&mut sp.u, 1.0, rng);
            fill_normal(&mut sp.v, 1.0, rng);
            norm_vec(&mut sp.u);
            norm_vec(&mut sp.v);
        }
    }
}

fn norm_vec<T: Scalar>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).fold(T::zero(), |a, b| a + b).sqrt();
    if n > T::zero() {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
}

impl<T: Scalar> Network<T> {
    /// Scale check used by tests: standard deviation of each parameterized
    /// layer's output on a fresh probe input.
    pub fn probe_layer_stds(&mut self, rng: &mut impl Rng) -> Result<Vec<(String, f64)>> {
        let probe: Vec<Tensor<T>> = self
            .input_shapes
            .clone()
            .into_iter()
            .map(|shape| {
                let mut t = Tensor::zeros(shape);
                for v in t.data_mut().iter_mut() {
                    *v = T::from_f64(rng.gen_range(-0.8..0.8));
                }
                t
            })
            .collect();
        let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
        let trace = self.forward(&probe, Mode::Eval, &mut dummy)?;
        let mut out = Vec::new();
        for (li, layer) in self.spec.layers.iter().enumerate() {
            if !matches!(layer.kind, LayerKind::Conv { .. } | LayerKind::Linear { .. }) {
                continue;
            }
            let act = &trace.activations[self.spec.n_inputs + li];
            let n = act.len() as f64;
            let mean: f64 = act.data().iter().map(|v| v.into_f64()).sum::<f64>() / n;
            let var: f64 = act.data().iter().map(|v| (v.into_f64() - mean).powi(2)).sum::<f64>() / n;
            out.push((layer.name.clone(), var.sqrt()));
        }
        Ok(out)
    }
}
