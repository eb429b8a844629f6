use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of the layered toy transformer plus the two cascade boundaries.
///
/// Layers are numbered from 1. Layers `1..=l_dm` form the draft sub-network,
/// `l_dm+1..=l_sv` the shallow verifier, and `l_sv+1..=n_layers` the rest of
/// the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub l_dm: usize,
    pub l_sv: usize,
    /// Storage width used for traffic accounting only; compute is always f32.
    pub bytes_per_param: usize,
    /// Hidden width of the gated MLP.
    pub d_ff: usize,
}

/// RMS-norm epsilon used by every block and adapter.
pub const NORM_EPS: f32 = 1e-5;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            vocab_size: 256,
            max_seq: 512,
            l_dm: 2,
            l_sv: 5,
            bytes_per_param: 2,
            d_ff: 256,
        }
    }
}

/// The two cut points of the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundaries {
    pub l_dm: usize,
    pub l_sv: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 3 {
            return Err(invalid("need at least 3 layers to place both boundaries"));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 || self.max_seq == 0 || self.d_ff == 0 || self.bytes_per_param == 0 {
            return Err(invalid("vocab_size, max_seq, d_ff and bytes_per_param must be positive"));
        }
        self.check_boundaries(self.boundaries())
    }

    pub fn boundaries(&self) -> Boundaries {
        Boundaries { l_dm: self.l_dm, l_sv: self.l_sv }
    }

    pub fn check_boundaries(&self, b: Boundaries) -> Result<()> {
        if !(1 <= b.l_dm && b.l_dm < b.l_sv && b.l_sv < self.n_layers) {
            return Err(invalid(format!(
                "boundaries must satisfy 1 <= l_dm < l_sv < n_layers, got l_dm={} l_sv={} n_layers={}",
                b.l_dm, b.l_sv, self.n_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters in one transformer block: four attention projections,
    /// three MLP matrices and two norm gains.
    pub fn layer_params(&self) -> usize {
        let d = self.d_model;
        4 * d * d + 3 * d * self.d_ff + 2 * d
    }

    /// Parameters in one adapter: four attention projections and two norm gains.
    pub fn adapter_params(&self) -> usize {
        4 * self.d_model * self.d_model + 2 * self.d_model
    }
}
