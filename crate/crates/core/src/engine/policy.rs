use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::argmax_tiebreak;

/// How the target judges a proposed token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AcceptancePolicy {
    /// Accept iff the token is the target's argmax.
    Greedy,
    /// Accept iff `p(token) >= min(epsilon, alpha * exp(-H(p)))`, with `p`
    /// the temperature-adjusted target distribution.
    Typical { epsilon: f32, alpha: f32, temperature: f32 },
}

impl AcceptancePolicy {
    pub const DEFAULT_EPSILON: f32 = 0.3;
    pub const DEFAULT_ALPHA: f32 = 0.09;

    pub fn typical(temperature: f32) -> Self {
        Self::Typical { epsilon: Self::DEFAULT_EPSILON, alpha: Self::DEFAULT_ALPHA, temperature }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Typical { epsilon, alpha, temperature } = *self {
            if !(epsilon > 0.0 && epsilon <= 1.0) {
                return Err(invalid(format!("epsilon must be in (0, 1], got {epsilon}")));
            }
            if !(alpha > 0.0) {
                return Err(invalid(format!("alpha must be positive, got {alpha}")));
            }
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(invalid(format!("temperature must be positive, got {temperature}")));
            }
        }
        Ok(())
    }

    /// Softmax temperature for target distributions. Greedy decisions are
    /// taken on the untempered distribution.
    pub fn temperature(&self) -> f32 {
        match *self {
            Self::Greedy => 1.0,
            Self::Typical { temperature, .. } => temperature,
        }
    }

    pub fn is_greedy(&self) -> bool {
        matches!(self, Self::Greedy)
    }
}

pub(crate) fn check_distribution(dist: &[f32]) -> Result<()> {
    if dist.is_empty() {
        return Err(invalid("empty distribution"));
    }
    let mut sum = 0.0f64;
    for &p in dist {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(invalid(format!("distribution entry {p} is not a probability")));
        }
        sum += p as f64;
    }
    if (sum - 1.0).abs() > 1e-4 {
        return Err(invalid(format!("distribution sums to {sum}, not 1")));
    }
    Ok(())
}

/// Shannon entropy in nats.
pub fn entropy(dist: &[f32]) -> f64 {
    dist.iter().filter(|&&p| p > 0.0).map(|&p| -(p as f64) * (p as f64).ln()).sum()
}

/// Whether the target accepts `token` under `dist`.
///
/// Both criteria are deterministic functions of the distribution; randomness
/// enters decoding only through the bonus token.
pub fn accept(token: u32, dist: &[f32], policy: &AcceptancePolicy) -> Result<bool> {
    check_distribution(dist)?;
    let t = token as usize;
    if t >= dist.len() {
        return Err(invalid(format!("token {token} outside distribution of size {}", dist.len())));
    }
    Ok(match *policy {
        AcceptancePolicy::Greedy => argmax_tiebreak(dist)? == t,
        AcceptancePolicy::Typical { epsilon, alpha, .. } => {
            let threshold = (epsilon as f64).min(alpha as f64 * (-entropy(dist)).exp());
            dist[t] as f64 >= threshold
        }
    })
}
