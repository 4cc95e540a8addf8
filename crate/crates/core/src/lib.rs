//! Semantic-embedding forecasting for satellite image sequences.
//!
//! A joint-embedding predictor forecasts the patch embeddings of the next
//! frame; an adapter turns them (plus a coarse copy of the current frame)
//! into cross-attention conditioning for a frozen rectified-flow latent
//! generator that is fine-tuned only through LoRA deltas.

pub mod adapter;
pub mod data;
pub mod error;
pub mod flow;
pub mod image;
pub mod jepa;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rollout;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, Plane};
