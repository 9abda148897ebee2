//! Dual-view image–text alignment for class-imbalanced multi-label image
//! classification.
//!
//! A vision transformer produces a global (class-token) and a local
//! (patch-token) view of every image. Both are scored against class text
//! embeddings by cosine similarity and fused with a weighted top-k mean.
//! Training runs in two stages: the image tower is trained against fixed
//! template prompts under a distribution-balanced loss plus L1 distillation
//! from a frozen teacher, then class-shared hierarchical prompts (one set per
//! view) are tuned against the frozen tower with a semantic-consistency
//! penalty. Evaluation reports per-class AP, head/medium/tail mAP and AP
//! variance.
//!
//! All numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what training, gradient
//! checks and the CLI use.

pub mod alignment;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod prompts;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, TensorError, Var};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Model64 = train::Model<f64>;
pub type Model32 = train::Model<f32>;
pub type ClassStats64 = losses::ClassStats<f64>;
