//! Person re-identification with attention consistency.
//!
//! A ResNet-style extractor produces feature maps `A` and a pooled vector
//! `f`. Two attention mechanisms are derived from gradients of network
//! scores with respect to `A` and trained for consistency:
//!
//! * identification attention masks each image with its own class
//!   attention and penalises the class score that survives masking;
//! * Siamese attention computes an attention map per branch of a pair from
//!   the same-identity score and asks the two maps of a positive pair to
//!   cover matching body rows.
//!
//! Both mechanisms are differentiable, so the combined objective is trained
//! with second-order gradients.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod losses;
pub mod nn;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
