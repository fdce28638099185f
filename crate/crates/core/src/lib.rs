//! Lifelong learning with background-attacked associative training and
//! distance-weighted fusion of task-specific models.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`gradcheck`]: a small `f64` tensor type and a
//!   reverse-mode tape with the primitives the models need.
//! * [`nn`], [`optim`]: the two-layer MLP and small CNN, both with a spatial
//!   attention block, parameter snapshots, and SGD.
//! * [`attack`]: background masks, the masked sign-gradient attack and the
//!   two-pass associative training epoch.
//! * [`engine`]: rehearsal memory, the distance matrix between models,
//!   fusion weights, base-model blending and the per-task training loop.
//! * [`data`], [`metrics`], [`runner`]: IDX ingestion and task splits, the
//!   synthetic background dataset, accuracy/BWT/FWT, and the experiment runner.

pub mod attack;
pub mod autograd;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
