//! Sequential skip prediction for listening sessions.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the precision for callers that do not need the choice.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod glove;
pub mod net;
pub mod optim;
pub mod scalar;
pub mod tensor_graph;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = tensor_graph::Matrix<f64>;
pub type Graph64 = tensor_graph::Graph<f64>;
pub type PaddedBatch64 = dataset::PaddedBatch<f64>;
pub type EmbeddingTable64 = glove::EmbeddingTable<f64>;
pub type ModelParams64 = net::ModelParams<f64>;
pub type AdamState64 = optim::AdamState<f64>;
pub type Checkpoint64 = optim::Checkpoint<f64>;
pub type Ensemble64 = eval::Ensemble<f64>;

pub type Matrix32 = tensor_graph::Matrix<f32>;
pub type Graph32 = tensor_graph::Graph<f32>;
pub type PaddedBatch32 = dataset::PaddedBatch<f32>;
pub type EmbeddingTable32 = glove::EmbeddingTable<f32>;
pub type ModelParams32 = net::ModelParams<f32>;
pub type AdamState32 = optim::AdamState<f32>;
pub type Checkpoint32 = optim::Checkpoint<f32>;
pub type Ensemble32 = eval::Ensemble<f32>;
