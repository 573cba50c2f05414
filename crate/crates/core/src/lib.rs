//! Block-level pruning for convolutional networks.
//!
//! Blocks are scored by the accuracy the network keeps when the block is
//! actually deleted, and removed greedily one at a time. Sequential and
//! re-initialization baselines plus an exhaustive subset search are provided
//! for comparison, on top of a small deterministic CPU training engine.

pub mod bench;
pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, ValidityRule};
