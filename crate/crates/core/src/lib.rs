// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language-specific feature identification with sparse autoencoders.
//!
//! The crate finds SAE latents that fire consistently on one language but
//! not on random-token text, turns them into steering vectors, compares them
//! with contrastive and PCA/LDA baselines, and measures their effect through
//! steered generation and directional ablation. A planted synthetic world
//! with a known dictionary stands in for a real model.

pub mod activations;
pub mod analysis;
pub mod container;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod features;
pub mod intervention;
pub mod metrics;
pub mod numerics;
pub mod report;
pub mod run;
pub mod sae;
pub mod steering;
pub mod sweep;
pub mod tokens;
pub mod world;

pub use error::{Error, Result};
