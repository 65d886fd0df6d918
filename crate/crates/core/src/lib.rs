//! Multi-source few-shot domain adaptation (MSFAN) at desk scale.
//!
//! A shared two-layer extractor feeds per-source cosine classifiers. Training combines a
//! pooled supervised loss with in-domain prototypical contrastive learning over k-means
//! prototypes of per-domain memory banks, source→target prototype entropy minimization,
//! support-set similarity consistency across sources, and classifier-wise mutual
//! information. Inference picks the class of the single most similar classifier weight.

pub mod bank;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod numerics;
pub mod ssl_losses;
pub mod support;
pub mod trainer;

pub use error::{MsfanError, Result};
