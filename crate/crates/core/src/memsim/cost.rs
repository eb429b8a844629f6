use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ledger::{Stage, TransferLedger};
use super::residency::LayerCosts;
use crate::error::{invalid, Result};

/// Decoding scheme whose bytes-per-token is being modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BptMode {
    /// Plain autoregressive decoding, every layer streamed per token.
    Baseline,
    /// Drafter plus one full-depth verification.
    TwoStage,
    /// Drafter, resident shallow verifier, deep target verification.
    Cats,
}

/// Streamed bytes per pass type and the mean tokens committed per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    pub gamma: usize,
    /// Bytes streamed by one drafting step.
    pub b_draft: f64,
    /// Bytes streamed by one full-depth verification.
    pub b_verify: f64,
    /// Bytes streamed by the shallow-verifier pass.
    pub b_sv: f64,
    /// Bytes streamed by the deep target pass.
    pub b_target: f64,
    /// Mean committed tokens per cycle (accepted drafts plus the bonus token).
    pub tau: f64,
}

pub const VICUNA_7B_LAYERS: usize = 32;
const VICUNA_7B_D: u64 = 4096;
const VICUNA_7B_FF: u64 = 11008;

/// fp16 bytes of one Vicuna-7B decoder layer: four attention projections,
/// three MLP projections, two norms.
pub fn vicuna_7b_layer_bytes() -> f64 {
    let d = VICUNA_7B_D;
    let params = 4 * d * d + 3 * d * VICUNA_7B_FF + 2 * d;
    (2 * params) as f64
}

impl CostModelParams {
    /// Vicuna-7B sized costs with layers `1..=l_dm` as the drafter and
    /// `1..=l_sv` as the shallow verifier, nothing resident.
    pub fn vicuna_7b(gamma: usize, l_dm: usize, l_sv: usize, tau: f64) -> Self {
        let layer = vicuna_7b_layer_bytes();
        Self {
            gamma,
            b_draft: l_dm as f64 * layer,
            b_verify: VICUNA_7B_LAYERS as f64 * layer,
            b_sv: l_sv as f64 * layer,
            b_target: (VICUNA_7B_LAYERS - l_sv) as f64 * layer,
            tau,
        }
    }

    /// Streamed (non-resident) bytes of each pass when layers `1..=pinned` stay in DRAM.
    pub fn streamed(costs: &LayerCosts, pinned: usize, l_dm: usize, l_sv: usize, gamma: usize, tau: f64) -> Self {
        let n = costs.n_layers();
        let streamed = |lo: usize, hi: usize| costs.range_bytes(lo.max(pinned + 1), hi) as f64;
        Self {
            gamma,
            b_draft: streamed(1, l_dm),
            b_verify: streamed(1, n),
            b_sv: streamed(1, l_sv),
            b_target: streamed(l_sv + 1, n),
            tau,
        }
    }

    fn validate(&self, mode: BptMode) -> Result<()> {
        let finite = [self.b_draft, self.b_verify, self.b_sv, self.b_target, self.tau];
        if finite.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid("cost parameters must be finite and non-negative"));
        }
        if mode != BptMode::Baseline && self.tau < 1.0 {
            return Err(invalid(format!("tokens per cycle {} is below 1", self.tau)));
        }
        if mode == BptMode::Cats {
            let split = self.b_sv + self.b_target;
            if (split - self.b_verify).abs() > 1e-9 * self.b_verify.max(1.0) {
                return Err(invalid(format!(
                    "shallow ({}) plus deep ({}) bytes must equal full verification ({})",
                    self.b_sv, self.b_target, self.b_verify
                )));
            }
        }
        Ok(())
    }
}

/// Expected flash bytes per committed token.
pub fn bpt_closed_form(p: &CostModelParams, mode: BptMode) -> Result<f64> {
    p.validate(mode)?;
    let g = p.gamma as f64;
    Ok(match mode {
        BptMode::Baseline => p.b_verify,
        BptMode::TwoStage => (g * p.b_draft + p.b_verify) / p.tau,
        BptMode::Cats => (g * p.b_draft + p.b_sv + p.b_target) / p.tau,
    })
}

/// Measured flash bytes per committed token.
pub fn bpt_from_ledger(ledger: &TransferLedger, committed_tokens: u64) -> Result<f64> {
    if committed_tokens == 0 {
        return Err(invalid("no committed tokens"));
    }
    Ok(ledger.total_bytes() as f64 / committed_tokens as f64)
}

/// Aggregate cost of one decoding run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunCost {
    pub transfer_seconds: f64,
    pub compute_seconds: f64,
    pub committed_tokens: u64,
}

impl RunCost {
    pub fn new(ledger: &TransferLedger, compute_by_stage: &BTreeMap<Stage, f64>, committed_tokens: u64) -> Self {
        Self {
            transfer_seconds: ledger.total_seconds(),
            compute_seconds: compute_by_stage.values().sum(),
            committed_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WallTime {
    pub seconds_per_token: f64,
    pub tokens_per_second: f64,
    /// Against the baseline run, when one is given.
    pub speedup: Option<f64>,
}

/// Transfer time (already net of overlap) plus compute time, per committed token.
pub fn simulate_walltime(run: &RunCost, baseline: Option<&RunCost>) -> Result<WallTime> {
    let per_token = |r: &RunCost| -> Result<f64> {
        if r.committed_tokens == 0 {
            return Err(invalid("no committed tokens"));
        }
        Ok((r.transfer_seconds + r.compute_seconds) / r.committed_tokens as f64)
    };
    let s = per_token(run)?;
    let speedup = match baseline {
        Some(b) => Some(per_token(b)? / s),
        None => None,
    };
    Ok(WallTime { seconds_per_token: s, tokens_per_second: 1.0 / s, speedup })
}
