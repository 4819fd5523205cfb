//! Cooperative distillation for image captioning under noisy labels.
//!
//! A student captioner trained on a noisy corpus and a teacher trained on a
//! clean corpus update each other in alternation. Each update interpolates
//! between cross-entropy on the sample's own caption and a KL term toward
//! the frozen partner, gated by the semantic coherence between the caption
//! and the partner's greedy decode.
//!
//! Numeric code is generic over [`Scalar`] (`f32`, `f64`); the aliases below
//! fix the `f64` instantiation used for training.

pub mod bridge;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod hash;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod run;
pub mod scalar;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params = model::ModelParams<f64>;
pub type Params32 = model::ModelParams<f32>;
pub type Grads = model::Gradients<f64>;
pub type Features = model::ImageFeatures<f64>;
pub type Softmaxes = model::SoftmaxSequence<f64>;
pub type Sample = losses::StreamSample<f64>;
pub type State = trainer::TrainState<f64>;
