//! Attention-based feature interaction CTR model.
//!
//! Two representation branches sit on top of a shared field-embedding layer:
//! multi-head self-attention over the field embeddings, and attention-weighted
//! pairwise element-wise crossings. Their outputs feed a linear (shallow) head
//! and an MLP (deep) head whose logits are summed. FM and DeepFM baselines,
//! multimodal auxiliary losses, AUC/logloss evaluation, an Adam trainer and the
//! on-disk formats live alongside.

mod codec;
pub mod data;
pub mod embedding;
pub mod error;
pub mod interaction;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod persist;
pub mod training;

pub use error::{Error, Result};
