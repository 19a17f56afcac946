//! Energy-based structured prediction on labeled graphs.
//!
//! The crate is `no_std` (with `alloc`) and holds every numeric piece of the
//! pipeline: a reverse-mode differentiation tape over dense `f64` tensors,
//! the label-graph / input-graph data model, an edge-aware graph network and
//! a gated graph network, the gated-pooling joint energy, Langevin refinement
//! of label graphs, the factorized baseline predictor with its losses, recall
//! metrics, and a seeded synthetic relational task generator.
//!
//! File formats, checkpoints and the command line live in the `ebsg` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod egnn;
pub mod energy;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
