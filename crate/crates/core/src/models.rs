//! Declarative builders for the one-stage and two-stage generators, the
//! inner-generator trainer, and the three-scale discriminator set. A single
//! scale parameter lets desk-scale and full-scale instances share one
//! schema.

use crate::error::{Error, Result};
use crate::imaging::{upsample_nearest, Coverage, Micrograph, ValueRange};
use crate::nn::{GraphBuilder, LayerKind, Mode, Network, NetworkSpec, NodeId, Scalar, Tensor, WeightMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorVariant {
    /// Consumes ceil(target/s)-sided inputs directly.
    OneStage,
    /// Consumes inputs nearest-upsampled to the target side.
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub variant: GeneratorVariant,
    pub target_side: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl GeneratorSpec {
    /// Desk-scale defaults: 64 px output, 16 channels, 3 residual blocks.
    pub fn desk(variant: GeneratorVariant) -> Self {
        GeneratorSpec { variant, target_side: 64, base_channels: 16, depth: 3 }
    }

    /// Preset matching the published topology scale: 512 px output, wider
    /// and deeper. Structure (strided encoder, residual core, bilinear
    /// upsampling decoder) is identical to the desk preset.
    pub fn paper_scale(variant: GeneratorVariant) -> Self {
        GeneratorSpec { variant, target_side: 512, base_channels: 64, depth: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_side < 8 || self.target_side % 2 != 0 {
            return Err(Error::Construction(format!(
                "target side {} must be even and at least 8",
                self.target_side
            )));
        }
        if self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Construction("base_channels and depth must be positive".into()));
        }
        Ok(())
    }
}

/// Conv -> running mean-only bn -> ReLU, the standard generator cell.
fn conv_bn_relu(b: &mut GraphBuilder, name: &str, input: NodeId, out_c: usize, stride: usize) -> NodeId {
    let c = b.push(
        format!("{name}_conv"),
        LayerKind::Conv { out_c, k: 3, stride, mode: WeightMode::WeightNorm, bias: false },
        input,
    );
    let n = b.push(format!("{name}_bn"), LayerKind::MeanOnlyBn, c);
    b.push(format!("{name}_relu"), LayerKind::Relu, n)
}

fn residual_block(b: &mut GraphBuilder, name: &str, input: NodeId, channels: usize) -> NodeId {
    let h = conv_bn_relu(b, &format!("{name}_a"), input, channels, 1);
    let c = b.push(
        format!("{name}_b_conv"),
        LayerKind::Conv { out_c: channels, k: 3, stride: 1, mode: WeightMode::WeightNorm, bias: false },
        h,
    );
    let n = b.push(format!("{name}_b_bn"), LayerKind::MeanOnlyBn, c);
    let r = b.push(format!("{name}_b_relu"), LayerKind::Relu, n);
    b.push(format!("{name}_add"), LayerKind::ResidualAdd { other: input }, r)
}

/// Output convolution: weight-normalized, no batch norm, no activation.
fn output_conv(b: &mut GraphBuilder, name: &str, input: NodeId) -> NodeId {
    b.push(
        name.to_string(),
        LayerKind::Conv { out_c: 1, k: 3, stride: 1, mode: WeightMode::WeightNorm, bias: false },
        input,
    )
}

/// Two-stage generator: inner stage building half-resolution features, an
/// auxiliary trainer that decodes them to a half-size image, and an outer
/// stage that merges the features with the raw input and renders the
/// full-resolution output.
pub struct TwoStageGenerator<T> {
    pub spec: GeneratorSpec,
    pub inner: Network<T>,
    pub outer: Network<T>,
    pub trainer: Network<T>,
}

fn inner_spec(spec: &GeneratorSpec) -> NetworkSpec {
    let ch = spec.base_channels;
    let mut b = GraphBuilder::new(1);
    let stem = conv_bn_relu(&mut b, "stem", 0, ch, 1);
    let down = conv_bn_relu(&mut b, "down", stem, ch, 2);
    let mut node = down;
    for i in 0..spec.depth {
        node = residual_block(&mut b, &format!("core{i}"), node, ch);
    }
    b.finish()
}

fn trainer_spec(spec: &GeneratorSpec) -> NetworkSpec {
    let ch = spec.base_channels;
    let mut b = GraphBuilder::new(1);
    let h = conv_bn_relu(&mut b, "dec", 0, ch, 1);
    output_conv(&mut b, "image", h);
    b.finish()
}

fn outer_spec(spec: &GeneratorSpec) -> NetworkSpec {
    let ch = spec.base_channels;
    // Input 0: inner features at half resolution. Input 1: the same image
    // that fed the inner generator, at full resolution.
    let mut b = GraphBuilder::new(2);
    let raw = conv_bn_relu(&mut b, "skip", 1, ch, 2);
    let merged = b.push("merge", LayerKind::ResidualAdd { other: 0 }, raw);
    let mut node = merged;
    for i in 0..spec.depth {
        node = residual_block(&mut b, &format!("core{i}"), node, ch);
    }
    let up = b.push(
        "up",
        LayerKind::BilinearResize { out_h: spec.target_side, out_w: spec.target_side },
        node,
    );
    let post = conv_bn_relu(&mut b, "post", up, ch, 1);
    output_conv(&mut b, "image", post);
    b.finish()
}

pub fn build_two_stage<T: Scalar>(spec: &GeneratorSpec) -> Result<TwoStageGenerator<T>> {
    spec.validate()?;
    if spec.variant != GeneratorVariant::TwoStage {
        return Err(Error::Construction("spec variant is not two_stage".into()));
    }
    let side = spec.target_side;
    let half = side / 2;
    let ch = spec.base_channels;
    let inner = Network::build(inner_spec(spec), &[[1, side, side, 1]])?;
    let trainer = Network::build(trainer_spec(spec), &[[1, half, half, ch]])?;
    let outer = Network::build(outer_spec(spec), &[[1, half, half, ch], [1, side, side, 1]])?;
    Ok(TwoStageGenerator { spec: *spec, inner, outer, trainer })
}

/// Size ladder for the one-stage decoder: successive halvings of the target
/// side, stopping above the input side.
fn one_stage_ladder(input_side: usize, target_side: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut k = 0u32;
    loop {
        let s = target_side.div_ceil(1 << (k + 1));
        if s < input_side {
            break;
        }
        k += 1;
        if k > 16 {
            break;
        }
    }
    for j in (0..=k).rev() {
        sizes.push(target_side.div_ceil(1 << j));
    }
    sizes
}

/// One-stage generator consuming the low-resolution scan directly.
pub struct OneStageGenerator<T> {
    pub spec: GeneratorSpec,
    pub coverage: Coverage,
    pub input_side: usize,
    pub net: Network<T>,
}

/// Pre-activation cell for the one-stage network: rectifier (skipped before
/// the first convolution), then batch normalization, then convolution.
fn pre_act_conv(b: &mut GraphBuilder, name: &str, input: NodeId, out_c: usize, first: bool) -> NodeId {
    let mut node = input;
    if !first {
        node = b.push(format!("{name}_relu"), LayerKind::Relu, node);
    }
    node = b.push(format!("{name}_bn"), LayerKind::MeanOnlyBn, node);
    b.push(
        format!("{name}_conv"),
        LayerKind::Conv { out_c, k: 3, stride: 1, mode: WeightMode::WeightNorm, bias: false },
        node,
    )
}

pub fn build_one_stage<T: Scalar>(spec: &GeneratorSpec, cov: Coverage, batch: usize) -> Result<OneStageGenerator<T>> {
    spec.validate()?;
    if spec.variant != GeneratorVariant::OneStage {
        return Err(Error::Construction("spec variant is not one_stage".into()));
    }
    let input_side = spec.target_side.div_ceil(cov.step());
    let ch = spec.base_channels;
    let mut b = GraphBuilder::new(1);
    let mut node = pre_act_conv(&mut b, "stem", 0, ch, true);
    for i in 0..spec.depth {
        let h = pre_act_conv(&mut b, &format!("enc{i}"), node, ch, false);
        node = b.push(format!("enc{i}_add"), LayerKind::ResidualAdd { other: node }, h);
    }
    for (li, side) in one_stage_ladder(input_side, spec.target_side).into_iter().enumerate() {
        node = b.push(
            format!("up{li}"),
            LayerKind::BilinearResize { out_h: side, out_w: side },
            node,
        );
        node = pre_act_conv(&mut b, &format!("dec{li}"), node, ch, false);
    }
    let pre = b.push("head_relu", LayerKind::Relu, node);
    let pre = b.push("head_bn", LayerKind::MeanOnlyBn, pre);
    b.push(
        "head_conv",
        LayerKind::Conv { out_c: 1, k: 3, stride: 1, mode: WeightMode::WeightNorm, bias: false },
        pre,
    );
    let net = Network::build(b.finish(), &[[batch, input_side, input_side, 1]])?;
    Ok(OneStageGenerator { spec: *spec, coverage: cov, input_side, net })
}

/// Three discriminators examining random crops at increasing sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSetSpec {
    pub crop_sizes: [usize; 3],
    pub base_channels: usize,
}

impl DiscriminatorSetSpec {
    /// Crops 70/140/280 at full scale, scaled proportionally to the target
    /// side.
    pub fn for_target_side(target_side: usize, base_channels: usize) -> Self {
        let scale = |w: usize| ((w * target_side) as f64 / 512.0).round().max(2.0) as usize;
        DiscriminatorSetSpec { crop_sizes: [scale(70), scale(140), scale(280)], base_channels }
    }

    pub fn validate(&self, image_side: usize) -> Result<()> {
        if !(self.crop_sizes[0] < self.crop_sizes[1] && self.crop_sizes[1] < self.crop_sizes[2]) {
            return Err(Error::Construction(format!(
                "crop sizes must strictly increase, got {:?}",
                self.crop_sizes
            )));
        }
        if self.crop_sizes[2] > image_side {
            return Err(Error::invalid(format!(
                "crop {} larger than image side {image_side}",
                self.crop_sizes[2]
            )));
        }
        Ok(())
    }
}

pub struct DiscriminatorSet<T> {
    pub spec: DiscriminatorSetSpec,
    pub members: Vec<Network<T>>,
}

fn discriminator_spec(crop: usize, base: usize) -> NetworkSpec {
    let mut b = GraphBuilder::new(1);
    let mut node = b.push("crop", LayerKind::RandomCrop { size: crop }, 0);
    let mut side = crop;
    let mut ch = base;
    let mut li = 0;
    while side > 4 {
        node = b.push(
            format!("conv{li}"),
            LayerKind::Conv { out_c: ch, k: 3, stride: 2, mode: WeightMode::Spectral, bias: true },
            node,
        );
        node = b.push(format!("lrelu{li}"), LayerKind::LeakyRelu { slope: 0.2 }, node);
        side = side.div_ceil(2);
        ch = (ch * 2).min(4 * base);
        li += 1;
    }
    b.push("score", LayerKind::Linear { out_f: 1, mode: WeightMode::Spectral, bias: true }, node);
    b.finish()
}

pub fn build_discriminators<T: Scalar>(spec: &DiscriminatorSetSpec, image_side: usize) -> Result<DiscriminatorSet<T>> {
    spec.validate(image_side)?;
    let members = spec
        .crop_sizes
        .iter()
        .map(|&w| Network::build(discriminator_spec(w, spec.base_channels), &[[1, image_side, image_side, 1]]))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscriminatorSet { spec: *spec, members })
}

/// Total learnable parameter count of a network.
pub fn param_count<T: Scalar>(net: &Network<T>) -> usize {
    net.layers
        .iter()
        .map(|l| {
            l.weight.as_ref().map_or(0, |w| w.len())
                + l.gain.as_ref().map_or(0, |g| g.len())
                + l.bias.as_ref().map_or(0, |b| b.len())
        })
        .sum()
}

/// Square [0,1] micrograph -> (1, s, s, 1) tensor.
pub fn micrograph_to_tensor<T: Scalar>(m: &Micrograph) -> Tensor<T> {
    let data: Vec<T> = m.values().iter().map(|&v| T::from_f64(v)).collect();
    Tensor::from_vec([1, m.height(), m.width(), 1], data)
}

/// (1, s, s, 1) tensor -> micrograph, clamped into [0, 1].
pub fn tensor_to_micrograph<T: Scalar>(t: &Tensor<T>) -> Micrograph {
    let [n, h, w, c] = t.shape();
    assert_eq!(n, 1);
    assert_eq!(c, 1);
    let vals: Vec<f64> = t.data().iter().map(|v| v.into_f64().clamp(0.0, 1.0)).collect();
    Micrograph::new(h, w, vals, ValueRange::Unit).expect("clamped values")
}

pub enum Generator<T> {
    OneStage(OneStageGenerator<T>),
    TwoStage(TwoStageGenerator<T>),
}

impl<T: Scalar> Generator<T> {
    pub fn target_side(&self) -> usize {
        match self {
            Generator::OneStage(g) => g.spec.target_side,
            Generator::TwoStage(g) => g.spec.target_side,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Generator::OneStage(g) => format!("one-stage generator\n{}", g.net.describe()),
            Generator::TwoStage(g) => format!(
                "two-stage generator\n== inner ==\n{}\n== trainer ==\n{}\n== outer ==\n{}",
                g.inner.describe(),
                g.trainer.describe(),
                g.outer.describe()
            ),
        }
    }
}

/// Run a generator on a low-coverage input in eval mode. Output values are
/// clamped to [0, 1]; with `replace_known` the probing-lattice pixels are
/// overwritten with the input's values.
pub fn infer<T: Scalar>(
    generator: &mut Generator<T>,
    input: &Micrograph,
    cov: Coverage,
    replace_known: bool,
) -> Result<Micrograph> {
    let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
    let (target, mut out) = match generator {
        Generator::TwoStage(g) => {
            let side = g.spec.target_side;
            let up = upsample_nearest(input, side)?;
            let x = micrograph_to_tensor::<T>(&up);
            let inner_trace = g.inner.forward(&[x.clone()], Mode::Eval, &mut dummy)?;
            let feats = inner_trace.output().clone();
            let outer_trace = g.outer.forward(&[feats, x], Mode::Eval, &mut dummy)?;
            (side, tensor_to_micrograph(outer_trace.output()))
        }
        Generator::OneStage(g) => {
            let expect = g.input_side;
            if input.height() != expect || input.width() != expect {
                return Err(Error::invalid(format!(
                    "one-stage input must be {expect}x{expect} for s={}, got {}x{}",
                    g.coverage.step(),
                    input.height(),
                    input.width()
                )));
            }
            if cov.step() != g.coverage.step() {
                return Err(Error::invalid(format!(
                    "generator built for s={}, called with s={}",
                    g.coverage.step(),
                    cov.step()
                )));
            }
            // Batched networks accept batch-1 inference by rebuilding the
            // input shape; the graph itself is batch-size agnostic, so run
            // through a batch-1 clone of the spec when needed.
            let x = micrograph_to_tensor::<T>(input);
            let side = g.spec.target_side;
            if g.net.input_shapes[0][0] == 1 {
                let trace = g.net.forward(&[x], Mode::Eval, &mut dummy)?;
                (side, tensor_to_micrograph(trace.output()))
            } else {
                let mut single = g.net.clone();
                single.input_shapes = vec![[1, expect, expect, 1]];
                single.node_shapes = single.spec.infer_shapes(&[[1, expect, expect, 1]])?;
                let trace = single.forward(&[x], Mode::Eval, &mut dummy)?;
                (side, tensor_to_micrograph(trace.output()))
            }
        }
    };
    if replace_known {
        let s = cov.step();
        let w = out.width();
        for i in 0..input.height() {
            for j in 0..input.width() {
                let (oy, ox) = (i * s, j * s);
                if oy < target && ox < target {
                    out.values_mut()[oy * w + ox] = input.get(i, j);
                }
            }
        }
    }
    Ok(out)
}
