//! Occlusion-aware vision-language pipeline at desk scale.
//!
//! A toy CLIP pair and a single-image SDF reconstructor feed a blended
//! visual embedding into a small causal transformer, which answers questions
//! about hand-occluded primitives and can adapt itself per test sample from
//! a contrastive reward.

pub mod clip;
pub mod error;
pub mod fusion;
pub mod geom;
pub mod harness;
pub mod image;
pub mod lm;
pub mod numerics;
pub mod recon;
pub mod synth;
pub mod text;
pub mod tta;

pub use error::{Error, Result};
