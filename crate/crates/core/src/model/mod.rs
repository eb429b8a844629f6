//! Layered toy transformer: forward passes over arbitrary layer ranges,
//! tree-masked attention and a rollback-capable KV cache.

pub(crate) mod attention;
pub mod config;
pub mod format;
pub mod kv;
pub mod runtime;
pub mod weights;

pub use config::{Boundaries, ModelConfig, NORM_EPS};
pub use kv::{KvCache, LayerCache, QueryBatch, SlotMeta, SlotTag};
pub use runtime::{HiddenStates, Model, Prefill};
pub use weights::{LayerWeights, Weights};
