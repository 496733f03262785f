//! Feature refinement segmentation network on a small reverse-mode autodiff core.
//!
//! The crate is organised bottom-up: [`tensor`] and [`graph`] provide storage
//! and differentiation, [`layers`] the convolutional building blocks, [`frm`]
//! the multi-stage aggregation + disentangled non-local refinement head,
//! [`baselines`] the pyramid-pooling alternatives, [`model`] the full network,
//! [`losses`] the hybrid cross-entropy + pixel contrastive objective, and
//! [`trainer`], [`profiler`], [`datagen`] the surrounding tooling.

pub mod baselines;
pub mod config;
pub mod datagen;
pub mod error;
pub mod frm;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod profiler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use model::{ContextHeadKind, Mode, ModelConfig, SegModel};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{Element, Shape, Tensor};
