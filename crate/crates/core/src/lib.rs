//! Semi-supervised image classification driven by entropy bounds.
//!
//! The training objective combines an upper bound on posterior entropy
//! (supervised cross entropy, masked weak-to-strong pseudo-supervision over
//! two strong views, and a CutMix term) with a lower bound on data entropy
//! (a Gaussian-similarity positive-pair contrastive term). [`bounds`] checks
//! the information-theoretic claims behind those terms on enumerable
//! distributions.

pub mod augment;
pub mod bounds;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod rng;
pub mod threshold;
pub mod trainer;

pub use error::{Error, Result};
