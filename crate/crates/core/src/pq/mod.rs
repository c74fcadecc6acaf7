//! Product quantization over the two weight groups.
//!
//! Each group vector of length `d` is split into `M` sub-vectors of length
//! `d / M`; each sub-vector is replaced by the index of its nearest codeword
//! in that position's sub-codebook.

mod codebook;
mod encode;
pub mod kmeans;

pub use codebook::{
    learn_codebooks, learn_group_codebook, CodebookPair, GroupCodebook, SubCodebook,
};
pub use encode::{
    decode_layer, encode, encode_layers, encode_model, reconstruct_model, CodeMatrix, LayerCodes,
};

use crate::pool::{GroupId, PoolError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PqError {
    #[error("{rows} rows cannot train {k} codewords; use a smaller K")]
    TooFewRows { rows: usize, k: usize },
    #[error("only {distinct} distinct rows for {k} codewords; use a smaller K")]
    TooFewDistinct { distinct: usize, k: usize },
    #[error("K must be a power of two, got {0}")]
    KNotPowerOfTwo(usize),
    #[error("vector length {actual} does not match group length {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("no codebook trained for group {0:?}")]
    MissingGroup(GroupId),
    #[error("layer {0} has no codes")]
    MissingCodes(usize),
    #[error("layer {layer_index}: {reason}")]
    BadCodes { layer_index: usize, reason: String },
    #[error(transparent)]
    Pool(#[from] PoolError),
}
