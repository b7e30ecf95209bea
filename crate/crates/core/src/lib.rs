//! Rotation-invariant self-supervised feature learning for oriented 3D point sets.
//!
//! The encoder turns a point set into global-scale tokens described in
//! per-token local reference frames, refines them with localized vector
//! self-attention and pools them into a unit-norm latent vector. Training
//! uses self-distillation between a student and an EMA teacher over
//! multi-crop and cut-mix views.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod sdmm;
pub mod synth;
pub mod tokenizer;
pub mod transformer;

pub use error::{Error, Result};
