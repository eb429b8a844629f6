use std::collections::BTreeMap;

use serde::Serialize;

use super::DecodeMode;
use crate::memsim::{bpt_from_ledger, RunCost, Stage, TransferLedger};

/// One decode cycle, written as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRecord {
    pub cycle: usize,
    /// Committed sequence length (prompt included) before the cycle, minus the pending token.
    pub committed_len: usize,
    pub drafts: Vec<u32>,
    /// `(draft index, token)` for every shallow-verifier disagreement.
    pub corrections: Vec<(usize, u32)>,
    /// Tree tokens accepted by the target.
    pub accepted: usize,
    pub used_correction: bool,
    /// Tokens appended to the output this cycle, after EOS / length truncation.
    pub committed: Vec<u32>,
    pub flash_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodeStats {
    pub mode: DecodeMode,
    pub gamma: usize,
    pub l_dm: usize,
    pub l_sv: usize,
    pub cycles: usize,
    pub committed_per_cycle: Vec<usize>,
    pub accepted_total: usize,
    pub corrections_proposed: usize,
    pub corrections_used: usize,
    #[serde(skip)]
    pub ledger: TransferLedger,
    pub flash_bytes: u64,
    /// Flash traffic of the prompt prefill; not part of the per-token accounting.
    pub prefill_flash_bytes: u64,
    pub compute_seconds: BTreeMap<Stage, f64>,
    /// Measured host time; informational only and kept out of serialized stats.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl DecodeStats {
    /// Tokens committed by decode cycles (the prefill token excluded).
    pub fn committed_tokens(&self) -> u64 {
        self.committed_per_cycle.iter().sum::<usize>() as u64
    }

    /// Mean tokens committed per cycle.
    pub fn tau(&self) -> Option<f64> {
        (self.cycles > 0).then(|| self.committed_tokens() as f64 / self.cycles as f64)
    }

    /// Mean accepted tree tokens per cycle.
    pub fn mean_accepted(&self) -> Option<f64> {
        (self.cycles > 0).then(|| self.accepted_total as f64 / self.cycles as f64)
    }

    /// Measured flash bytes per committed token.
    pub fn bpt(&self) -> Option<f64> {
        bpt_from_ledger(&self.ledger, self.committed_tokens()).ok()
    }

    pub fn run_cost(&self) -> RunCost {
        RunCost::new(&self.ledger, &self.compute_seconds, self.committed_tokens())
    }
}
