//! Differentiable building blocks and the dual-branch rain segmentation
//! network.

pub mod checkpoint;
pub mod graph;
pub mod ig;
pub mod model;
pub mod optim;
pub mod params;
pub mod predict;
pub mod tensor;
pub mod train;
pub mod variant;

pub use graph::{ConvSpec, Graph, Gradients, Var};
pub use model::{Architecture, Model, ModelConfig, ModelOutput, StageConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use variant::{Objective, Variant};
