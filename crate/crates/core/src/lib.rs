//! Intent-aligned collaborative filtering.
//!
//! A dual-tower recommender that fuses interaction-derived latent intents
//! (prototype attention over LightGCN layers, denoised by learned edge
//! masks) with LLM-derived text intents, trained with pairwise/translation
//! alignment and momentum-distilled interaction-text matching.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod mat;
pub mod momentum;
pub mod objectives;
pub mod rng;
pub mod synthbench;
pub mod trainer;

pub use error::{Error, Result};
