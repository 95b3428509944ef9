//! Parameter-efficient multimodal fine-tuning on toy dual encoders.
//!
//! Two small transformer towers (image patches and caption tokens) are pretrained
//! contrastively, then adapted to a shifted domain by training only multimodal gated
//! adapters under an adaptive triplet plus contrastive objective. The crate also carries
//! retrieval metrics, embedding-geometry diagnostics and a synthetic paired corpus.

pub mod adapters;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
