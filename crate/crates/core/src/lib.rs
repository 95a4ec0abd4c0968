//! Transductive few-shot adaptation of a toy two-tower encoder.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: dense tensors and a tape-based reverse-mode engine.
//! * [`model`]: the two-tower encoder with LoRA, last-projector and prompt
//!   fine-tuning, plus a linear head for precomputed embeddings.
//! * [`objective`]: support cross-entropy, query mutual information and the
//!   KL anchor to zero-shot predictions.
//! * [`tasks`]: synthetic task generation, episode splitting and the binary
//!   embedding container.
//! * [`harness`]: training loop, evaluation, benchmarks, sweeps and result files.
//!
//! Core types are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the width for the common cases.

pub mod autodiff;
mod error;
pub mod harness;
pub mod model;
pub mod objective;
mod rng;
mod scalar;
pub mod tasks;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type TwoTowerModel64 = model::TwoTowerModel<f64>;
pub type TwoTowerModel32 = model::TwoTowerModel<f32>;
pub type Task64 = tasks::Task<f64>;
pub type Task32 = tasks::Task<f32>;
