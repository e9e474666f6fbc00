//! Static network graphs: a DAG of layers over node ids, executed by a tape
//! that records what backward needs. Node ids `0..n_inputs` are the graph
//! inputs; layer `i` produces node `n_inputs + i`.

use super::ops;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type NodeId = usize;

/// How a layer's weights are conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightMode {
    Plain,
    /// Per-output-channel direction/gain decomposition w = g * v / |v|.
    WeightNorm,
    /// Divide by the estimated top singular value (one power iteration per
    /// training step).
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv { out_c: usize, k: usize, stride: usize, mode: WeightMode, bias: bool },
    Linear { out_f: usize, mode: WeightMode, bias: bool },
    /// Subtract per-channel running means (decay 0.99), no variance scaling.
    MeanOnlyBn,
    BilinearResize { out_h: usize, out_w: usize },
    NearestResize { out_h: usize, out_w: usize },
    Relu,
    LeakyRelu { slope: f64 },
    Softplus,
    ResidualAdd { other: NodeId },
    RandomCrop { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub n_inputs: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Infer every node's shape, failing with the offending layer's name.
    pub fn infer_shapes(&self, input_shapes: &[[usize; 4]]) -> Result<Vec<[usize; 4]>> {
        if input_shapes.len() != self.n_inputs {
            return Err(Error::Construction(format!(
                "expected {} input shapes, got {}",
                self.n_inputs,
                input_shapes.len()
            )));
        }
        let mut shapes: Vec<[usize; 4]> = input_shapes.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Error::Construction(format!("layer '{}': {}", layer.name, msg));
            if layer.input >= shapes.len() {
                return Err(fail(format!("input node {} not yet defined", layer.input)));
            }
            let s = shapes[layer.input];
            let [n, h, w, c] = s;
            let out = match &layer.kind {
                LayerKind::Conv { out_c, k, stride, .. } => {
                    if *k == 0 || *stride == 0 {
                        return Err(fail("kernel and stride must be positive".into()));
                    }
                    [n, ops::conv_out_side(h, *stride), ops::conv_out_side(w, *stride), *out_c]
                }
                LayerKind::Linear { out_f, .. } => [n, 1, 1, *out_f],
                LayerKind::MeanOnlyBn => s,
                LayerKind::BilinearResize { out_h, out_w } | LayerKind::NearestResize { out_h, out_w } => {
                    [n, *out_h, *out_w, c]
                }
                LayerKind::Relu | LayerKind::LeakyRelu { .. } | LayerKind::Softplus => s,
                LayerKind::ResidualAdd { other } => {
                    if *other >= shapes.len() {
                        return Err(fail(format!("residual input node {other} not yet defined")));
                    }
                    if shapes[*other] != s {
                        return Err(fail(format!(
                            "residual shapes differ: {:?} vs {:?}",
                            s, shapes[*other]
                        )));
                    }
                    s
                }
                LayerKind::RandomCrop { size } => {
                    if *size > h || *size > w {
                        return Err(fail(format!("crop {size} larger than input {h}x{w}")));
                    }
                    [n, *size, *size, c]
                }
            };
            let _ = li;
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Human-readable layer table.
    pub fn describe(&self, input_shapes: &[[usize; 4]]) -> Result<String> {
        let shapes = self.infer_shapes(input_shapes)?;
        let mut out = String::new();
        out.push_str(&format!("{:<4} {:<24} {:<10} {}\n", "node", "layer", "input", "output shape"));
        for (i, shape) in shapes.iter().take(self.n_inputs).enumerate() {
            out.push_str(&format!("{:<4} {:<24} {:<10} {:?}\n", i, "(input)", "-", shape));
        }
        for (li, layer) in self.layers.iter().enumerate() {
            let node = self.n_inputs + li;
            out.push_str(&format!(
                "{:<4} {:<24} {:<10} {:?}\n",
                node,
                layer.name,
                layer.input,
                shapes[node]
            ));
        }
        Ok(out)
    }
}

/// Convenience for composing a [`NetworkSpec`] node by node.
pub struct GraphBuilder {
    spec: NetworkSpec,
}

impl GraphBuilder {
    pub fn new(n_inputs: usize) -> Self {
        GraphBuilder { spec: NetworkSpec { n_inputs, layers: Vec::new() } }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, input: NodeId) -> NodeId {
        self.spec.layers.push(LayerSpec { name: name.into(), kind, input });
        self.spec.n_inputs + self.spec.layers.len() - 1
    }

    pub fn finish(self) -> NetworkSpec {
        self.spec
    }
}

/// Running-mean state for mean-only batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub decay: f64,
    pub frozen: bool,
}

/// Singular-vector estimates for spectral normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

const SIGMA_FLOOR: f64 = 1e-12;

/// Parameters and mutable normalization state for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    /// Conv: (k, k, in_c, out_c). Linear: (1, 1, in_f, out_f).
    pub weight: Option<Tensor<T>>,
    /// Weight-norm gains, one per output channel.
    pub gain: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
    pub bn: Option<BnState<T>>,
    pub spectral: Option<SpectralState<T>>,
}

impl<T> LayerState<T> {
    fn empty() -> Self {
        LayerState { weight: None, gain: None, bias: None, bn: None, spectral: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Updates running means and spectral power iterations; random crops.
    Train,
    /// No state changes; deterministic centered crops.
    Eval,
    /// No state changes, but crops stay random (used when a frozen network
    /// is queried stochastically, e.g. the generator's adversarial term).
    Sample,
}

/// A built network: spec + parameters + per-layer norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub input_shapes: Vec<[usize; 4]>,
    pub node_shapes: Vec<[usize; 4]>,
    pub layers: Vec<LayerState<T>>,
}

/// Saved forward state: node activations plus per-layer extras needed by
/// backward (effective weights, weight-norm column norms, crop origins).
pub struct Trace<T> {
    pub activations: Vec<Tensor<T>>,
    eff_weights: Vec<Option<Tensor<T>>>,
    col_norms: Vec<Option<Vec<T>>>,
    sigmas: Vec<Option<T>>,
    crop_origins: Vec<Option<(usize, usize)>>,
}

impl<T: Scalar> Trace<T> {
    /// Output of the last layer.
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("non-empty graph")
    }

    pub fn node(&self, id: NodeId) -> &Tensor<T> {
        &self.activations[id]
    }
}

/// Per-layer parameter gradients plus gradients w.r.t. the graph inputs.
pub struct Gradients<T> {
    pub layers: Vec<LayerGrads<T>>,
    pub inputs: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub weight: Option<Tensor<T>>,
    pub gain: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

impl<T> LayerGrads<T> {
    fn empty() -> Self {
        LayerGrads { weight: None, gain: None, bias: None }
    }
}

impl<T: Scalar> Network<T> {
    /// Build a network with zeroed parameters; call an init scheme before use.
    pub fn build(spec: NetworkSpec, input_shapes: &[[usize; 4]]) -> Result<Self> {
        let node_shapes = spec.infer_shapes(input_shapes)?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (li, layer) in spec.layers.iter().enumerate() {
            let in_shape = node_shapes[layer.input];
            let mut state = LayerState::empty();
            match &layer.kind {
                LayerKind::Conv { out_c, k, mode, bias, .. } => {
                    state.weight = Some(Tensor::zeros([*k, *k, in_shape[3], *out_c]));
                    if *mode == WeightMode::WeightNorm {
                        state.gain = Some(vec![T::one(); *out_c]);
                    }
                    if *mode == WeightMode::Spectral {
                        state.spectral = Some(SpectralState {
                            u: vec![T::zero(); *out_c],
                            v: vec![T::zero(); k * k * in_shape[3]],
                        });
                    }
                    if *bias {
                        state.bias = Some(vec![T::zero(); *out_c]);
                    }
                }
                LayerKind::Linear { out_f, mode, bias } => {
                    let fi = in_shape[1] * in_shape[2] * in_shape[3];
                    state.weight = Some(Tensor::zeros([1, 1, fi, *out_f]));
                    if *mode == WeightMode::WeightNorm {
                        state.gain = Some(vec![T::one(); *out_f]);
                    }
                    if *mode == WeightMode::Spectral {
                        state.spectral = Some(SpectralState { u: vec![T::zero(); *out_f], v: vec![T::zero(); fi] });
                    }
                    if *bias {
                        state.bias = Some(vec![T::zero(); *out_f]);
                    }
                }
                LayerKind::MeanOnlyBn => {
                    state.bn = Some(BnState {
                        running_mean: vec![T::zero(); in_shape[3]],
                        decay: 0.99,
                        frozen: false,
                    });
                }
                _ => {}
            }
            let _ = li;
            layers.push(state);
        }
        Ok(Network { spec, input_shapes: input_shapes.to_vec(), node_shapes, layers })
    }

    pub fn describe(&self) -> String {
        self.spec.describe(&self.input_shapes).expect("validated at build")
    }

    /// Freeze or unfreeze every mean-only batch norm layer.
    pub fn set_bn_frozen(&mut self, frozen: bool) {
        for layer in self.layers.iter_mut() {
            if let Some(bn) = layer.bn.as_mut() {
                bn.frozen = frozen;
            }
        }
    }

    pub fn bn_frozen(&self) -> bool {
        self.layers.iter().filter_map(|l| l.bn.as_ref()).all(|bn| bn.frozen)
    }

    /// Effective (normalized) weight for one layer, as used by forward.
    /// Returns the tensor plus weight-norm column norms or the spectral
    /// sigma estimate when those modes are active.
    fn effective_weight(&mut self, li: usize, mode: Mode) -> (Tensor<T>, Option<Vec<T>>, Option<T>) {
        let weight_mode = match &self.spec.layers[li].kind {
            LayerKind::Conv { mode, .. } | LayerKind::Linear { mode, .. } => *mode,
            _ => unreachable!("effective_weight on parameterless layer"),
        };
        let state = &mut self.layers[li];
        let w = state.weight.as_ref().expect("parameterized layer");
        match weight_mode {
            WeightMode::Plain => (w.clone(), None, None),
            WeightMode::WeightNorm => {
                let g = state.gain.as_ref().expect("weight-norm gain");
                let oc = w.shape()[3];
                let rest = w.len() / oc;
                let mut norms = vec![T::zero(); oc];
                for (i, &v) in w.data().iter().enumerate() {
                    norms[i % oc] += v * v;
                }
                for nv in norms.iter_mut() {
                    *nv = nv.sqrt().max(T::from_f64(SIGMA_FLOOR));
                }
                let mut eff = w.clone();
                for (i, v) in eff.data_mut().iter_mut().enumerate() {
                    let o = i % oc;
                    *v = *v / norms[o] * g[o];
                }
                let _ = rest;
                (eff, Some(norms), None)
            }
            WeightMode::Spectral => {
                let oc = w.shape()[3];
                let rest = w.len() / oc;
                // Weight data is laid out (..., oc); the matrix view is
                // (oc x rest) with element (o, r) = data[r * oc + o].
                if mode == Mode::Train {
                    let wd = w.data().to_vec();
                    let spectral = state.spectral.as_mut().expect("spectral state");
                    // One power iteration: v <- normalize(W^T u); u <- normalize(W v).
                    let u_old = spectral.u.clone();
                    let mut v_new = vec![T::zero(); rest];
                    for (r, vv) in v_new.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for o in 0..oc {
                            acc += wd[r * oc + o] * u_old[o];
                        }
                        *vv = acc;
                    }
                    normalize(&mut v_new);
                    let mut u_new = vec![T::zero(); oc];
                    for (r, &vv) in v_new.iter().enumerate() {
                        for (o, uu) in u_new.iter_mut().enumerate() {
                            *uu += wd[r * oc + o] * vv;
                        }
                    }
                    normalize(&mut u_new);
                    spectral.u = u_new;
                    spectral.v = v_new;
                }
                let state = &self.layers[li];
                let w = state.weight.as_ref().unwrap();
                let spectral = state.spectral.as_ref().unwrap();
                let mut sigma = T::zero();
                for (r, &vv) in spectral.v.iter().enumerate() {
                    for (o, &uu) in spectral.u.iter().enumerate() {
                        sigma += uu * w.data()[r * oc + o] * vv;
                    }
                }
                let sigma = sigma.max(T::from_f64(SIGMA_FLOOR));
                let mut eff = w.clone();
                let inv = T::one() / sigma;
                for v in eff.data_mut().iter_mut() {
                    *v *= inv;
                }
                (eff, None, Some(sigma))
            }
        }
    }

    /// Run the graph. Train mode updates running means (unless frozen) and
    /// advances spectral power iterations; eval mode touches no state and is
    /// deterministic.
    pub fn forward(&mut self, inputs: &[Tensor<T>], mode: Mode, rng: &mut dyn rand::RngCore) -> Result<Trace<T>> {
        if inputs.len() != self.spec.n_inputs {
            return Err(Error::ShapeMismatch(format!(
                "expected {} inputs, got {}",
                self.spec.n_inputs,
                inputs.len()
            )));
        }
        for (i, (t, s)) in inputs.iter().zip(&self.input_shapes).enumerate() {
            if t.shape() != *s {
                return Err(Error::ShapeMismatch(format!(
                    "input {i}: expected {:?}, got {:?}",
                    s,
                    t.shape()
                )));
            }
        }
        let n_layers = self.spec.layers.len();
        let mut activations: Vec<Tensor<T>> = inputs.to_vec();
        let mut eff_weights = vec![None; n_layers];
        let mut col_norms = vec![None; n_layers];
        let mut sigmas = vec![None; n_layers];
        let mut crop_origins = vec![None; n_layers];
        for li in 0..n_layers {
            let input_id = self.spec.layers[li].input;
            let kind = self.spec.layers[li].kind.clone();
            let x = &activations[input_id];
            let out = match kind {
                LayerKind::Conv { stride, .. } => {
                    let (eff, norms, sigma) = self.effective_weight(li, mode);
                    let bias = self.layers[li].bias.clone();
                    let y = ops::conv_forward(&activations[input_id], &eff, bias.as_deref(), stride);
                    eff_weights[li] = Some(eff);
                    col_norms[li] = norms;
                    sigmas[li] = sigma;
                    y
                }
                LayerKind::Linear { .. } => {
                    let (eff, norms, sigma) = self.effective_weight(li, mode);
                    let bias = self.layers[li].bias.clone();
                    let y = ops::linear_forward(&activations[input_id], &eff, bias.as_deref());
                    eff_weights[li] = Some(eff);
                    col_norms[li] = norms;
                    sigmas[li] = sigma;
                    y
                }
                LayerKind::MeanOnlyBn => {
                    let c = x.c();
                    let count = T::from_f64((x.len() / c) as f64);
                    let bn = self.layers[li].bn.as_mut().expect("bn state");
                    if mode == Mode::Train && !bn.frozen {
                        let mut batch_mean = vec![T::zero(); c];
                        for chunk in x.data().chunks(c) {
                            for (m, &v) in batch_mean.iter_mut().zip(chunk) {
                                *m += v;
                            }
                        }
                        let d = T::from_f64(bn.decay);
                        let one_minus = T::one() - d;
                        for (r, m) in bn.running_mean.iter_mut().zip(&batch_mean) {
                            *r = d * *r + one_minus * (*m / count);
                        }
                    }
                    let means = bn.running_mean.clone();
                    let mut y = x.clone();
                    for chunk in y.data_mut().chunks_mut(c) {
                        for (v, &m) in chunk.iter_mut().zip(&means) {
                            *v -= m;
                        }
                    }
                    y
                }
                LayerKind::BilinearResize { out_h, out_w } => ops::bilinear_resize(x, out_h, out_w),
                LayerKind::NearestResize { out_h, out_w } => ops::nearest_resize(x, out_h, out_w),
                LayerKind::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
                LayerKind::LeakyRelu { slope } => {
                    let s = T::from_f64(slope);
                    x.map(|v| if v > T::zero() { v } else { s * v })
                }
                LayerKind::Softplus => x.map(|v| {
                    // ln(1 + e^x), stably.
                    let z = v.max(T::zero());
                    z + ((v - z).exp() + (-z).exp()).ln()
                }),
                LayerKind::ResidualAdd { other } => {
                    let mut y = x.clone();
                    y.add_assign(&activations[other]);
                    y
                }
                LayerKind::RandomCrop { size } => {
                    let (h, w) = (x.h(), x.w());
                    let (oy, ox) = if mode == Mode::Eval {
                        ((h - size) / 2, (w - size) / 2)
                    } else {
                        (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size))
                    };
                    crop_origins[li] = Some((oy, ox));
                    let mut y = Tensor::zeros([x.n(), size, size, x.c()]);
                    let c = x.c();
                    for b in 0..x.n() {
                        for yy in 0..size {
                            for xx in 0..size {
                                for ch in 0..c {
                                    *y.at_mut(b, yy, xx, ch) = x.at(b, oy + yy, ox + xx, ch);
                                }
                            }
                        }
                    }
                    y
                }
            };
            activations.push(out);
        }
        Ok(Trace { activations, eff_weights, col_norms, sigmas, crop_origins })
    }

    /// Reverse-mode pass from a gradient on the final node. Returns exact
    /// gradients for every parameter and for the graph inputs.
    pub fn backward(&self, trace: &Trace<T>, out_grad: Tensor<T>) -> Result<Gradients<T>> {
        let n_layers = self.spec.layers.len();
        let n_nodes = self.spec.n_inputs + n_layers;
        if trace.activations.len() != n_nodes {
            return Err(Error::State("trace does not match this network".into()));
        }
        let last = trace.activations[n_nodes - 1].shape();
        if out_grad.shape() != last {
            return Err(Error::ShapeMismatch(format!(
                "output grad {:?} vs output {:?}",
                out_grad.shape(),
                last
            )));
        }
        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; n_nodes];
        node_grads[n_nodes - 1] = Some(out_grad);
        let mut layer_grads: Vec<LayerGrads<T>> = (0..n_layers).map(|_| LayerGrads::empty()).collect();

        for li in (0..n_layers).rev() {
            let node = self.spec.n_inputs + li;
            let Some(g) = node_grads[node].take() else { continue };
            let input_id = self.spec.layers[li].input;
            let x = &trace.activations[input_id];
            let kind = &self.spec.layers[li].kind;
            match kind {
                LayerKind::Conv { k, stride, mode, bias, .. } => {
                    let eff = trace.eff_weights[li].as_ref().expect("saved weight");
                    let gin = ops::conv_grad_input(&g, eff, x.shape(), *stride);
                    let geff = ops::conv_grad_weight(x, &g, *k, *stride);
                    let lg = &mut layer_grads[li];
                    if *bias {
                        lg.bias = Some(ops::bias_grad(&g));
                    }
                    self.weight_grads_from_effective(li, *mode, geff, trace, lg);
                    accumulate(&mut node_grads[input_id], gin);
                }
                LayerKind::Linear { mode, bias, .. } => {
                    let eff = trace.eff_weights[li].as_ref().expect("saved weight");
                    let gin = ops::linear_grad_input(&g, eff, x.shape());
                    let geff = ops::linear_grad_weight(x, &g);
                    let lg = &mut layer_grads[li];
                    if *bias {
                        lg.bias = Some(ops::bias_grad(&g));
                    }
                    self.weight_grads_from_effective(li, *mode, geff, trace, lg);
                    accumulate(&mut node_grads[input_id], gin);
                }
                LayerKind::MeanOnlyBn => {
                    // Running means are treated as constants.
                    accumulate(&mut node_grads[input_id], g);
                }
                LayerKind::BilinearResize { .. } => {
                    let gin = ops::bilinear_resize_adjoint(&g, x.shape());
                    accumulate(&mut node_grads[input_id], gin);
                }
                LayerKind::NearestResize { .. } => {
                    let gin = ops::nearest_resize_adjoint(&g, x.shape());
                    accumulate(&mut node_grads[input_id], gin);
                }
                LayerKind::Relu => {
                    let mut gin = g;
                    for (gv, &xv) in gin.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    accumulate(&mut node_grads[input_id], gin);
                }
                LayerKind::LeakyRelu { slope } => {
                    let s = T::from_f64(*slope);
                    let mut gin = g;
                    for (gv, &xv) in gin.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *gv *= s;
                        }
                    }
                    accumulate(&mut node_grads[input_id], gin);
                }
                LayerKind::Softplus => {
                    let mut gin = g;
                    for (gv, &xv) in gin.data_mut().iter_mut().zip(x.data()) {
                        let sig = T::one() / (T::one() + (-xv).exp());
                        *gv *= sig;
                    }
                    accumulate(&mut node_grads[input_id], gin);
                }
                LayerKind::ResidualAdd { other } => {
                    accumulate(&mut node_grads[*other], g.clone());
                    accumulate(&mut node_grads[input_id], g);
                }
                LayerKind::RandomCrop { size } => {
                    let (oy, ox) = trace.crop_origins[li].expect("crop origin recorded");
                    let mut gin = Tensor::zeros(x.shape());
                    let c = x.c();
                    for b in 0..x.n() {
                        for yy in 0..*size {
                            for xx in 0..*size {
                                for ch in 0..c {
                                    *gin.at_mut(b, oy + yy, ox + xx, ch) += g.at(b, yy, xx, ch);
                                }
                            }
                        }
                    }
                    accumulate(&mut node_grads[input_id], gin);
                }
            }
        }

        let inputs = (0..self.spec.n_inputs)
            .map(|i| {
                node_grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.input_shapes[i]))
            })
            .collect();
        Ok(Gradients { layers: layer_grads, inputs })
    }

    /// Translate the gradient w.r.t. the effective (normalized) weight into
    /// gradients w.r.t. the stored parameters.
    fn weight_grads_from_effective(
        &self,
        li: usize,
        mode: WeightMode,
        geff: Tensor<T>,
        trace: &Trace<T>,
        out: &mut LayerGrads<T>,
    ) {
        let state = &self.layers[li];
        match mode {
            WeightMode::Plain => {
                out.weight = Some(geff);
            }
            WeightMode::WeightNorm => {
                let w = state.weight.as_ref().unwrap();
                let g = state.gain.as_ref().unwrap();
                let norms = trace.col_norms[li].as_ref().expect("saved norms");
                let oc = w.shape()[3];
                // Per column o: vhat = v/|v|; d_gain = sum(geff . vhat);
                // d_v = gain/|v| * (geff - (geff . vhat) vhat).
                let mut dots = vec![T::zero(); oc];
                for (i, &ge) in geff.data().iter().enumerate() {
                    let o = i % oc;
                    dots[o] += ge * w.data()[i] / norms[o];
                }
                let mut gw = Tensor::zeros(w.shape());
                for (i, gv) in gw.data_mut().iter_mut().enumerate() {
                    let o = i % oc;
                    let vhat = w.data()[i] / norms[o];
                    *gv = g[o] / norms[o] * (geff.data()[i] - dots[o] * vhat);
                }
                out.weight = Some(gw);
                out.gain = Some(dots);
            }
            WeightMode::Spectral => {
                let w = state.weight.as_ref().unwrap();
                let spectral = state.spectral.as_ref().unwrap();
                let sigma = trace.sigmas[li].expect("saved sigma");
                let oc = w.shape()[3];
                // d_w = (geff - (geff . w_hat) u v^T) / sigma, with u, v constant.
                let mut dot = T::zero();
                for (i, &ge) in geff.data().iter().enumerate() {
                    dot += ge * w.data()[i] / sigma;
                }
                let mut gw = Tensor::zeros(w.shape());
                for (i, gv) in gw.data_mut().iter_mut().enumerate() {
                    let (r, o) = (i / oc, i % oc);
                    *gv = (geff.data()[i] - dot * spectral.u[o] * spectral.v[r]) / sigma;
                }
                out.weight = Some(gw);
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).fold(T::zero(), |a, b| a + b).sqrt();
    let norm = norm.max(T::from_f64(SIGMA_FLOOR));
    for x in v.iter_mut() {
        *x = *x / norm;
    }
}
