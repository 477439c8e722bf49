//! Detection and exploitation of latent domain structure in labeled,
//! windowed sensor data.
//!
//! The pipeline has three stages:
//!
//! 1. [`nid`] measures how far a dataset is from i.i.d. by comparing
//!    encoder feature statistics across a schedule of clip swaps.
//! 2. [`tde`] mines task-aware latent domains with an EM loop that
//!    alternates k-means over learned embeddings with joint gradient
//!    refinement of the encoder and per-domain task heads.
//! 3. [`oup`] routes each incoming sample to the nearest domain centroid
//!    and runs exactly one task head for the prediction.
//!
//! [`baselines`] provides the reference partitioning strategies and a
//! brute-force optimal-partition search used to sanity-check the miner.

pub mod baselines;
pub mod clustering;
pub mod config;
pub mod dataset;
mod error;
pub mod nid;
pub mod numerics;
pub mod oup;
pub mod rng;
pub mod tde;

pub use error::{Error, Result};
