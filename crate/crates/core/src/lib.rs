//! SoftTriple-family metric learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: dense vector helpers, L2 normalization and its Jacobian,
//!   stable log-sum-exp / softmax / entropy, seeded PRNG streams.
//! * [`losses`]: value-and-gradient implementations of normalized SoftMax,
//!   its smoothed-triplet dual, HardTriple, SoftTriple, ProxyNCA, the L2,1
//!   center regularizer and the batch objective.
//! * [`model`]: a small trainable embedding map with exact backpropagation.
//! * [`checkpoint`]: the text checkpoint format shared by trainer and CLI.
//! * [`trainer`]: Adam with separate model/center learning rates, step decay
//!   and unit-norm projection of centers.
//! * [`data`]: synthetic multi-cluster datasets, CSV ingestion, class splits.
//! * [`eval`]: Recall@k, k-means, NMI and unique-center counting.
//! * [`verify`]: randomized property suites used by `softtriple verify`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
