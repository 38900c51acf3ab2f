//! Dual-attention vision transformer (spatial window + channel group attention)
//! with the pieces needed to train and benchmark it on a CPU: a small
//! reverse-mode autodiff engine, a data pipeline with mixup and weighted
//! oversampling, AdamW with warmup, and an inference throughput harness.
//!
//! Everything numeric is generic over [`Scalar`]; the `*32`/`*64` aliases
//! below name the two instantiations in use.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use attention::{AttentionParams, ChannelScale, WindowGrid};
pub use autodiff::{Graph, Pad2d, Var};
pub use data::{AugmentPolicy, Dataset, Sample};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, StageConfig};
pub use scalar::Scalar;
pub use tensor::{Init, Tensor};
pub use train::{EvalReport, OptimizerState, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
