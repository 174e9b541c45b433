//! Progressive two-stage fine-tuning for long-tailed next-behavior prediction.
//!
//! The crate is organised around the pipeline's stages:
//!
//! - [`data`]: behavior events, windowed samples, frequency profiles and the
//!   anchor/tail partition, balanced test sets, and a synthetic long-tailed
//!   generator.
//! - [`prompt`]: instruction-prompt rendering, auxiliary-task mixing and
//!   instruction JSONL export.
//! - [`model`]: a compact categorical sequence predictor with hand-derived
//!   SFT and DPO gradients, optimizers and the training loop.
//! - [`select`]: difficulty scoring and per-behavior selection strategies
//!   (difficulty-weighted K-Means++ seeding and its ablations).
//! - [`pipeline`]: anchor tuning, preference-pair construction, balanced
//!   preference tuning and the end-to-end run with its manifest.
//! - [`eval`]: weighted precision/recall and head/medium/tail macro accuracy.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod select;

pub use error::{Error, Result};
