//! Cascaded speculative decoding: draft, shallow verify, target verify.

mod oracle;
pub mod policy;
mod session;
mod stats;

pub use oracle::decode_autoregressive;
pub use policy::{accept, entropy, AcceptancePolicy};
pub use session::{generate, CycleHooks, Generation, Session, TokenHook};
pub use stats::{CycleRecord, DecodeStats};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::Boundaries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// Draft, resident shallow verification, streamed deep verification.
    Cats,
    /// Draft, then one full-depth verification of the chain.
    TwoStage,
    /// One token per full forward pass.
    Autoregressive,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [DecodeMode::Cats, DecodeMode::TwoStage, DecodeMode::Autoregressive];

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Cats => "cats",
            DecodeMode::TwoStage => "two-stage",
            DecodeMode::Autoregressive => "autoregressive",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cats" => Ok(DecodeMode::Cats),
            "two-stage" | "two_stage" => Ok(DecodeMode::TwoStage),
            "autoregressive" | "ar" => Ok(DecodeMode::Autoregressive),
            other => Err(invalid(format!("unknown decode mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub mode: DecodeMode,
    /// Drafted tokens per cycle.
    pub gamma: usize,
    pub policy: AcceptancePolicy,
    /// New tokens to produce, counting the one emitted by prefill.
    pub max_new_tokens: usize,
    pub seed: u64,
    pub eos_token: Option<u32>,
    /// Overrides the model's draft / shallow-verifier boundaries.
    pub boundaries: Option<Boundaries>,
    /// Keep a JSON view of every verification tree.
    pub dump_trees: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Cats,
            gamma: 5,
            policy: AcceptancePolicy::Greedy,
            max_new_tokens: 128,
            seed: 0,
            eos_token: None,
            boundaries: None,
            dump_trees: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.mode != DecodeMode::Autoregressive && self.gamma == 0 {
            return Err(invalid("gamma must be at least 1"));
        }
        Ok(())
    }
}
