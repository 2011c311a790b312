//! Numerical laboratory for low-resource learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataset`] – teacher-labelled Gaussian data, CSV ingestion and subset views.
//! * [`perceptron`] – unit-norm perceptrons, max-margin training and generalization error.
//! * [`sampler`] – random, hard-margin and biased subset selection.
//! * [`theory`] – Gaussian tail functions, adaptive quadrature and the
//!   max-margin saddle-point solver.
//! * [`mmd`] – unbiased MMD estimation and the distribution-shift bound terms.
//! * [`nnet`] – a one-hidden-layer network with exact gradients and difficulty scores.
//! * [`bench`] – hard/random few-shot benchmark construction and evaluation.
//! * [`harness`] – experiment orchestration, CSV/JSON emission and the CLI.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod mmd;
pub mod nnet;
pub mod perceptron;
pub mod rng;
pub mod sampler;
pub mod theory;

pub use dataset::{LabeledDataset, Strategy, SubsetSelection};
pub use error::{Error, Result};
pub use perceptron::{Perceptron, TrainReport};

/// Crate version recorded in every manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
