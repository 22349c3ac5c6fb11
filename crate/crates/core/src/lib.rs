//! Interpretability workbench for one-to-many factual recall on a toy
//! decoder-only transformer.
//!
//! The crate trains a small rotary/RMSNorm/gated-MLP model on a synthetic
//! subject–relation–objects world and then looks inside it: early decoding of
//! attention and MLP outputs, Token Lens attribution of attention to key
//! spans, attention knockout, causal tracing and a head-level
//! promotion/suppression taxonomy.

pub mod error;
pub mod eval;
pub mod heads;
pub mod interventions;
pub mod lens;
pub mod model;
pub mod numerics;
pub mod suite;
pub mod train;
pub mod world;

pub use error::{Error, Result};
