//! Desk-scale image captioning, built from first principles.
//!
//! A vision-transformer patch encoder feeds a GPT-2 style decoder
//! through cross-attention; training runs on a hand-written
//! reverse-mode tape with AdamW, and generated captions are scored
//! with BLEU, ROUGE, METEOR, and CIDEr implementations that are
//! cross-checked against brute-force oracles. Everything is seeded
//! and single-threaded, so identical inputs reproduce identical
//! checkpoints byte for byte.

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod guide;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
