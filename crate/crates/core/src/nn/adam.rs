//! Adaptive-moment parameter updates for a [`Network`]. Second-moment decay
//! 0.999 and epsilon 1e-8 throughout; learning rate and first-moment decay
//! come from the training schedule per step.

use super::graph::{Gradients, Network};
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    w: Option<(Tensor<T>, Tensor<T>)>,
    g: Option<(Vec<T>, Vec<T>)>,
    b: Option<(Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    layers: Vec<Moments<T>>,
    t: i32,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &Network<T>) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| Moments {
                w: l.weight.as_ref().map(|w| (Tensor::zeros(w.shape()), Tensor::zeros(w.shape()))),
                g: l.gain.as_ref().map(|g| (vec![T::zero(); g.len()], vec![T::zero(); g.len()])),
                b: l.bias.as_ref().map(|b| (vec![T::zero(); b.len()], vec![T::zero(); b.len()])),
            })
            .collect();
        AdamState { layers, t: 0, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn step_count(&self) -> i32 {
        self.t
    }

    /// One update with the given learning rate and first-moment decay.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, lr: f64, beta1: f64) {
        self.t += 1;
        let b1 = T::from_f64(beta1);
        let b2 = T::from_f64(self.beta2);
        let eps = T::from_f64(self.epsilon);
        let bc1 = T::from_f64(1.0 - beta1.powi(self.t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t));
        let lr_t = T::from_f64(lr);
        let one = T::one();

        let update = |param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T]| {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                param[i] = param[i] - lr_t * mh / (vh.sqrt() + eps);
            }
        };

        for ((state, grad), mom) in net.layers.iter_mut().zip(&grads.layers).zip(self.layers.iter_mut()) {
            if let (Some(w), Some(gw), Some((m, v))) = (state.weight.as_mut(), grad.weight.as_ref(), mom.w.as_mut())
            {
                update(w.data_mut(), gw.data(), m.data_mut(), v.data_mut());
            }
            if let (Some(g), Some(gg), Some((m, v))) = (state.gain.as_mut(), grad.gain.as_ref(), mom.g.as_mut()) {
                update(g, gg, m, v);
            }
            if let (Some(b), Some(gb), Some((m, v))) = (state.bias.as_mut(), grad.bias.as_ref(), mom.b.as_mut()) {
                update(b, gb, m, v);
            }
        }
    }
}
