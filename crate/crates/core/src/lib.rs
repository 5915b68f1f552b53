//! Embedding-level synthetic image attribution.
//!
//! A projection head is trained with a supervised contrastive loss on
//! labeled backbone embeddings; a few labeled exemplars per generator then
//! form a k-NN support set that attributes new images, including images
//! from generators the head never saw. Open-set metrics (CCR, FPR, OSCR,
//! AUC) score the result.

// `!(x > bound)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrastive;
pub mod embedding_store;
pub mod error;
pub mod harness;
pub mod knn;
pub mod metrics;
pub mod rng;
pub mod simd;
pub mod trainer;

pub use error::{Error, Result};
