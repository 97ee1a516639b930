//! Triplet metric learning with two-stage hard-sample generation.
//!
//! The numeric core ([`tensor`], [`autodiff`], [`optim`], [`networks`],
//! [`plm`], [`losses`], [`mining`], [`evaluation`]) is generic over
//! [`Scalar`]; the aliases below pin the common `f64` instantiation.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod mining;
pub mod networks;
pub mod optim;
pub mod plm;
pub mod projection;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape = autodiff::Tape<f64>;
pub type Mlp = networks::Mlp<f64>;
pub type ModelBundle = networks::ModelBundle<f64>;
pub type EmbeddingBatch = networks::EmbeddingBatch<f64>;
pub type LossWeights = losses::LossWeights<f64>;
pub type PlmState = plm::PlmState<f64>;
pub type AdamState = optim::AdamState<f64>;
