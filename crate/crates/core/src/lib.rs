//! Guided DDIM editing.
//!
//! Deterministic DDIM inversion and reversal, representation guidance
//! (a triplet objective on prompt similarity and feature distances) and
//! cycle-consistency coherence guidance, together with the CS/SD/BD
//! evaluation metrics. Two analytic backends ship with the crate so every
//! sampler update can be checked against closed forms without pretrained
//! weights.

pub mod backends;
pub mod coherence;
pub mod ddim;
pub mod error;
pub mod fsio;
pub mod guidance;
pub mod imageio;
pub mod kv;
pub mod metrics;
pub mod pipeline;
pub mod schedule;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
