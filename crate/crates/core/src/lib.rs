//! Return-aligned decision transformer (RADT) and a decision transformer
//! baseline, built on a small reverse-mode autodiff engine.
//!
//! The crate covers the full experiment lifecycle: toy offline-RL
//! environments, dataset generation with return-to-go bookkeeping, model
//! assembly, AdamW training, and the return-alignment evaluation protocol.

pub mod aligners;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod envs;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
