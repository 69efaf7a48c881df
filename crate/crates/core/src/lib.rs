//! Debiasing generative models trained on confounded image data.
//!
//! The crate trains convolutional VAEs whose latent code is partitioned into
//! one block per target factor plus a nuisance block. A small feedback set of
//! match pairs and factor labels drives the blocks apart; adversarial linear
//! probes keep target information out of the complement blocks. A metric suite
//! (FactorVAE score, MIG and its block-constrained variant, DCI, downstream
//! accuracy under covariate shift, consistency / restrictiveness /
//! non-triviality estimators) quantifies the result.

pub mod datasets;
pub mod error;
pub mod evalgen;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
