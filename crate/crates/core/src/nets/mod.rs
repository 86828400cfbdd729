//! Network building blocks and the four pipeline networks.
//!
//! Every layer keeps only [`ParamId`](crate::autograd::ParamId)s; values
//! live in a shared [`VarStore`](crate::autograd::VarStore), so the same
//! structure runs in `f32` for training and `f64` for gradient checks.

mod bundle;
mod layers;
mod models;

pub use bundle::{Manifest, ModelBundle, OptimizerManifest, MANIFEST};
pub use layers::{
    xavier_uniform, Affine, BatchNorm, ConvBlock, Conv2d, Norm, NormKind, SeBlock, SwitchNorm,
    UpConv, NORM_EPS, NORM_MOMENTUM, SE_MIN_HIDDEN, SE_REDUCTION,
};
pub use models::{
    ArchConfig, ContextEncoder, Model, PipelineInputs, PipelineOutputs, UNet, UNetConfig, Variant,
    CONTEXT_CHANNELS, CONTEXT_DIM, PREFIX_C, PREFIX_E, PREFIX_G, PREFIX_S,
};
