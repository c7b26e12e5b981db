//! Task-vector fusion for fine-tuned model checkpoints.
//!
//! The crate is organised around five pieces:
//!
//! * [`tensor_store`]: a streaming reader/writer for the single-file
//!   `safetensors`-style container (8-byte little-endian header length, JSON
//!   header, contiguous row-major payload).
//! * [`fusion`]: sign-consensus filtering followed by masked-softmax
//!   magnitude weighting, applied element-wise to task vectors
//!   `tau_k = theta_k - theta_base`.
//! * [`sim`]: exact and Monte Carlo error rates of consensus voting versus
//!   plain averaging, with the Hoeffding tail bound.
//! * [`partition`]: tool-aware greedy dataset partitioning with
//!   density-sorted train/test splits and overlap reporting.
//! * [`analysis`]: parameter-space similarity and Z-score summaries.
//!
//! [`validate`] bundles a self-check battery used by the CLI.

pub mod analysis;
pub mod error;
pub mod fixtures;
pub mod fusion;
pub mod partition;
pub mod sim;
pub mod tensor_store;
pub mod validate;

pub use error::{Error, Result};
pub use fusion::{
    consensus_filter, fuse_tensor, importance_weights, merge_checkpoints, task_vector, Branch,
    ConsensusReport, ElementConsensus, FusionConfig, FusionMode, MergeOutcome, MissingTensorPolicy,
    TaskSet, TaskVector, TensorFilter, ZeroSignPolicy,
};
pub use tensor_store::{
    check_compatibility, open_checkpoint, write_checkpoint, Checkpoint, CheckpointWriter,
    CompatibilityProfile, Dtype, NamedTensor, TensorMeta,
};
