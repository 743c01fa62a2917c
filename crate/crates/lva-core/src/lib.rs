//! Closed-form transfer learning for small dense and convolutional networks.
//!
//! The idea: once a network is trained on a source task, adapting its last
//! layer (or last two) to a shifted domain is a linear least-squares problem
//! in disguise. This crate builds that pipeline end to end:
//!
//! - [`linalg`] - dense matrices, QR/SVD least squares, spectral norms
//! - [`net`] - multilayer perceptrons with exact Jacobians and JSON round-trip
//! - [`train`] - deterministic SGD/Adam pretraining and selective finetuning
//! - [`align`] - pairing a target dataset with source samples (nearest
//!   neighbour or entropic optimal transport)
//! - [`lva`] - transferal residues, the closed-form one- and two-layer
//!   updates, and checkers for the accompanying loss bounds
//! - [`convadapt`] - the same last-layer update for convolutional nets via
//!   patch matrices
//! - [`bench`] - reproducible synthetic benchmarks (1-D signal shift,
//!   desk-scale deblurring)
//!
//! Everything is `f64`, single-threaded per run, and deterministic: given the
//! same seed, datasets, training and reports reproduce bit-for-bit.

pub mod align;
pub mod bench;
pub mod convadapt;
pub mod error;
pub mod linalg;
pub mod lva;
pub mod net;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{least_squares, matmul, spectral_norm, LstsqSolution, Matrix};
pub use net::{Activation, Layer, Mlp};
