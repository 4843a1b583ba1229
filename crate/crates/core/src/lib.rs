//! Measuring and mitigating demographic leakage in self-supervised speaker
//! embeddings.
//!
//! The crate covers the whole pipeline: log-mel feature extraction, a small
//! reverse-mode autodiff engine, SimCLR-style contrastive training,
//! gradient-reversal adversarial debiasing, a causal bottleneck with a
//! covariance penalty, linear and MLP demographic probes, speaker
//! verification metrics, and the experiment driver behind the `dseb` CLI.

pub mod audio;
pub mod autodiff;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod experiment;
pub mod models;
pub mod probes;
pub mod rng;
pub mod verification;

pub use error::{Error, Result};
