use std::path::PathBuf;

use thiserror::Error;

/// Which pruning rule excludes a block from the valid set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidityRule {
    Stem,
    Head,
    FirstOfStage,
    Bridging,
    Missing,
}

impl std::fmt::Display for ValidityRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ValidityRule::Stem => "the stem block is never pruned",
            ValidityRule::Head => "the classifier head is never pruned",
            ValidityRule::FirstOfStage => "the first block of a stage is never pruned",
            ValidityRule::Bridging => "the block changes tensor shape (bridging block)",
            ValidityRule::Missing => "no block with this index exists in the network",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid block spec: {0}")]
    Spec(String),

    #[error("invalid network: {0}")]
    Build(String),

    #[error("block {index} cannot be pruned: {rule}")]
    Validity { index: usize, rule: ValidityRule },

    #[error("out of range: {0}")]
    Range(String),

    #[error(
        "{path}: file length {actual} bytes is not a multiple of the {record}-byte record size \
         (expected {expected} bytes for {records} whole records)"
    )]
    Format {
        path: PathBuf,
        record: usize,
        actual: usize,
        expected: usize,
        records: usize,
    },

    #[error("{path}: record {record} has label byte {label}, expected 0..{classes}")]
    CorruptRecord {
        path: PathBuf,
        record: usize,
        label: u8,
        classes: usize,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f32 },

    #[error(
        "brute force over {valid} valid blocks needs 2^{valid} = {evaluations} evaluations; \
         at most {limit} valid blocks are supported"
    )]
    Budget {
        valid: usize,
        evaluations: u128,
        limit: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
