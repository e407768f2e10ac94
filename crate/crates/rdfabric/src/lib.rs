//! Unsupervised anomaly detection for fabric and other texture surfaces,
//! built on reverse knowledge distillation: a frozen CNN teacher encodes
//! patches, a trainable bottleneck-plus-decoder student reconstructs the
//! teacher's feature pyramid, and reconstruction error localizes defects.

pub mod error;
pub mod accept;
pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod scoring;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
