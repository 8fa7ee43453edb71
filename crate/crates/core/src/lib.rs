//! Weakly supervised slide classification over precomputed patch embeddings.
//!
//! Attention MIL heads trained with bag cross-entropy, attention-selected
//! instance supervision and a queue-based supervised contrastive term whose
//! negatives can be up-weighted for known confusable class pairs.

pub mod bagdata;
pub mod grad;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod stain;
pub mod train;
