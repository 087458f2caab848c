//! Few-shot episodic learning with meta-task regularization.
//!
//! The crate bundles a small reverse-mode tensor engine, a Conv-4 encoder
//! with convolutional decoders, an N-way K-shot episode sampler, the
//! prototypical and first-order MAML learners, and an autoencoder
//! reconstruction meta-task that is added to the episode loss.
//!
//! Numeric code is generic over [`Scalar`]; `f64` is the default precision
//! and the aliases below fix it for the common case.

pub mod episodes;
pub mod error;
pub mod gradsuite;
pub mod maml;
pub mod metatask;
pub mod models;
pub mod protonet;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
