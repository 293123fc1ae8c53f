//! Chord-level graph representation of multitrack symbolic music, together
//! with a hierarchical structure/content variational autoencoder.
//!
//! The numerical code is generic over a [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file pin the `f64` configuration used by
//! the CLI and the service.

pub mod corpus;
pub mod generate;
pub mod graph;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod pca;
pub mod pianoroll;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use graph::{build_graph, ChordGraph, StructureTensor};
pub use pianoroll::{Onset, Pianoroll};
pub use scalar::Scalar;

/// Default model: 64-bit floats throughout.
pub type Model = model::ChordVae<f64>;
pub type Model32 = model::ChordVae<f32>;
pub type Params = tensor::ParamStore<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Trainer = training::Trainer<f64>;
pub type LossBreakdown = training::LossBreakdown<f64>;
pub type EmbeddingProjection = pca::EmbeddingProjection<f64>;
