//! Cascaded self-speculative decoding for memory-constrained inference.
//!
//! A shallow prefix of the target, topped by a small adapter, drafts tokens;
//! a deeper resident prefix with a second adapter proposes corrections; the
//! full target, streamed from flash, verifies the resulting tree in one pass.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod distill;
pub mod engine;
pub mod error;
pub mod memsim;
pub mod model;
pub mod sweep;
pub mod tensor;
pub mod tree;

pub use adapter::{AdapterPair, AdapterWeights};
pub use engine::{decode_autoregressive, generate, AcceptancePolicy, DecodeMode, EngineConfig, Session};
pub use error::{Error, Result};
pub use memsim::{MemoryConfig, Stage, TransferLedger};
pub use model::{Boundaries, Model, ModelConfig};
