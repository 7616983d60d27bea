//! Pose-guided micro-gesture recognition pipeline.
//!
//! A skeleton stream is rasterized into Gaussian heatmap volumes and encoded
//! by a small 3-D conv net; a ViT-style tower produces per-frame visual
//! tokens; pose-guided relevance weights pool the tokens into a semantic
//! query which, after gated fusion, cross-attends over the gated token set
//! to produce the clip representation. Everything runs on an in-crate
//! reverse-mode tensor engine, and a synthetic benchmark plus ablation
//! harness exercise each mechanism.

pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod params;
pub mod pose;
pub mod skeleton;
pub mod synth;
pub mod visual;

pub use error::{Error, Result};
