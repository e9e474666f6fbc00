//! Minimal reverse-mode differentiation over a fixed operator set
//! (convolution, dense, resize, activations, residual add, random crop)
//! plus the normalization and initialization schemes the generators and
//! discriminators are built from.

mod adam;
mod graph;
mod init;
mod ops;
mod tensor;

pub use adam::AdamState;
pub use graph::{
    BnState, Gradients, GraphBuilder, LayerGrads, LayerKind, LayerSpec, LayerState, Mode, Network, NetworkSpec,
    NodeId, SpectralState, Trace, WeightMode,
};
pub use init::{init_discriminator_weights, init_generator_weights, init_plain};
pub use tensor::{Scalar, Tensor};
