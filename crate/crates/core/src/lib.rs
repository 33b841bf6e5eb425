//! Multi-modal self-supervised representation learning on synthetic paired
//! image/text data.
//!
//! The crate bundles a small reverse-mode tensor engine, the contrastive and
//! ranking objectives, trainable encoders with co-attention fusion, view
//! augmentation, a synthetic dataset generator, and the pre-training,
//! linear-probe and label-fraction fine-tuning loops.

pub mod augment;
pub mod data;
pub mod encoders;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod invariance;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod train;
pub mod verify;

pub use engine::{Gradients, Graph, Tensor, Var};
pub use error::{Error, Result};
