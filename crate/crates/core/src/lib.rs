//! Unsupervised cross-modal hashing that stays robust when a fraction of the
//! image/text training pairs are mismatched.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`]: a small dense network engine with hand-derived gradients and Adam.
//! - [`data`]: synthetic / file-backed feature datasets, clean-subset marking,
//!   miscaption injection, feature-space augmentation and batching.
//! - [`noise`]: the noise discriminator, its feature mixer and pair weighting.
//! - [`hashing`]: weighted contrastive and quantization losses, binary code
//!   update and the two-phase training loop with its ablation variants.
//! - [`retrieval`]: packed binary codes, Hamming top-K search and mAP@K.

pub mod data;
pub mod error;
pub mod hashing;
pub mod nn;
pub mod noise;
pub mod retrieval;
pub mod seed;

pub use error::{Error, Result};
