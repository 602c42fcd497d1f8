//! Desk-scale workbench for prompt-based fine-tuning of a frozen 3D
//! vision-transformer segmentation model.
//!
//! The crate is organised around six subsystems:
//!
//! - [`autograd`]: reverse-mode automatic differentiation over dense arrays,
//!   with a finite-difference gradient checker.
//! - [`model`]: the 3D ViT encoder with a UNETR-style skip-connection decoder
//!   and shallow/deep prompt injection.
//! - [`tuning`]: fine-tuning strategies, optimizers, freeze enforcement, and
//!   full/delta checkpoint persistence.
//! - [`synth`]: deterministic synthetic multi-center data generation,
//!   preprocessing, augmentation, and split/fold machinery.
//! - [`eval`]: Dice scoring, fold aggregation, comparison matrices, and
//!   significance tests.
//! - [`pipeline`]: end-to-end experiment orchestration used by the CLI.

pub mod autograd;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tuning;

pub use error::{Error, Result};
