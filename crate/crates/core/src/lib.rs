//! Multi-model weight compression with shared product-quantization codebooks.
//!
//! Several small networks are pooled into two weight groups (3×3 kernels and
//! 1×1/fully-connected weights), one pair of codebooks is learned over both
//! pools, and every model is encoded against that pair. An alternating
//! reassign/finetune loop recovers accuracy, the results are packed into a
//! single bundle, and an int8 runtime reconstructs, runs and swaps models
//! inside a fixed arena.

pub mod bundle;
pub mod dataset;
pub mod harness;
pub mod nn;
pub mod optimizer;
pub mod pool;
pub mod pq;
pub mod quant;
pub mod runtime;
pub mod tensor;

pub use dataset::LabeledDataset;
pub use tensor::Tensor;
