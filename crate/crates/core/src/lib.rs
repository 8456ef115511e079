//! Self-supervised time-series representation learning and forecasting.
//!
//! The pipeline pretrains a student encoder against a momentum (EMA) teacher
//! on two overlapping crops of each series window: the branches are pulled
//! together with an InfoNCE contrastive loss over temporal and instance
//! negatives, and a soft-label distillation loss over centered teacher
//! outputs, jointly weighted. A closed-form ridge head on frozen student
//! representations produces multi-step forecasts.
//!
//! Modules:
//! - [`numeric`]: dense f64 tensors, reverse-mode gradient tape, SGD,
//!   finite-difference gradient checking
//! - [`data`]: CSV ingestion, chronological splits, z-score normalization,
//!   sliding-window samples, seeded synthetic series
//! - [`augment`]: dual-crop sampling and Bernoulli timestamp masking
//! - [`model`]: projection head, dilated causal conv encoder, teacher/student
//!   state with EMA updates and the center layer
//! - [`loss`]: contrastive (InfoNCE) and distillation losses
//! - [`trainer`]: the pretraining loop and checkpointing
//! - [`forecast`]: representation extraction, ridge regression, metrics,
//!   persistence baseline, two-sample K-S test
//! - [`selftest`]: the self-check suite behind the CLI `selftest` command

pub mod augment;
pub mod data;
pub mod error;
pub mod forecast;
pub mod loss;
pub mod model;
pub mod numeric;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
