use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy against the renormalized top-K of the target.
    Reduced,
    /// Cross-entropy against the whole target distribution.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub k: usize,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { k: 32, mode: LossMode::Reduced }
    }
}

/// Target distributions and adapter logits for a set of positions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    pub vocab: usize,
    pub p_target: Vec<f64>,
    pub logits: Vec<f64>,
    /// Positions that contribute to the loss.
    pub mask: Vec<usize>,
}

impl DistillBatch {
    pub fn n_positions(&self) -> usize {
        self.p_target.len().checked_div(self.vocab).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab;
        if v == 0 || !self.p_target.len().is_multiple_of(v) || self.logits.len() != self.p_target.len() {
            return Err(invalid("batch rows do not match the vocabulary size"));
        }
        if self.mask.is_empty() {
            return Err(invalid("empty position mask"));
        }
        let n = self.n_positions();
        for &t in &self.mask {
            if t >= n {
                return Err(invalid(format!("masked position {t} outside 0..{n}")));
            }
            let row = &self.p_target[t * v..(t + 1) * v];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("target row {t} is not a distribution (sum {sum})")));
            }
            if self.logits[t * v..(t + 1) * v].iter().any(|z| !z.is_finite()) {
                return Err(invalid(format!("non-finite adapter logit at position {t}")));
            }
        }
        Ok(())
    }
}

/// The `k` most probable indices, ties to the lower index, most probable first.
pub fn top_k_support(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(invalid(format!("support size {k} outside 1..={}", p.len())));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// `p` restricted to `support` and rescaled to sum to one; zero elsewhere.
pub fn renormalize(p: &[f64], support: &[usize]) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(invalid("empty support"));
    }
    if let Some(&i) = support.iter().find(|&&i| i >= p.len()) {
        return Err(invalid(format!("support index {i} outside distribution")));
    }
    let mass: f64 = support.iter().map(|&i| p[i]).sum();
    if !(mass > 0.0) {
        return Err(invalid("support carries no probability mass"));
    }
    let mut out = vec![0.0; p.len()];
    for &i in support {
        out[i] = p[i] / mass;
    }
    Ok(out)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn target_row(p: &[f64], cfg: &LossConfig) -> Result<Vec<f64>> {
    match cfg.mode {
        LossMode::Full => Ok(p.to_vec()),
        LossMode::Reduced => renormalize(p, &top_k_support(p, cfg.k)?),
    }
}

fn check_cfg(cfg: &LossConfig, vocab: usize) -> Result<()> {
    if cfg.mode == LossMode::Reduced && (cfg.k == 0 || cfg.k > vocab) {
        return Err(invalid(format!("k = {} outside 1..={vocab}", cfg.k)));
    }
    Ok(())
}

/// Mean over masked positions of `-Σ p̃(v) log q(v)`, with `log q` taken as
/// `z_v - logsumexp(z)` so a vanishing `q` never hits `log 0`.
pub fn reduced_kl_loss(batch: &DistillBatch, cfg: &LossConfig) -> Result<f64> {
    batch.validate()?;
    check_cfg(cfg, batch.vocab)?;
    let v = batch.vocab;
    let mut total = 0.0;
    for &t in &batch.mask {
        let pt = target_row(&batch.p_target[t * v..(t + 1) * v], cfg)?;
        let z = &batch.logits[t * v..(t + 1) * v];
        let lse = log_sum_exp(z);
        total += pt.iter().zip(z).filter(|(&p, _)| p > 0.0).map(|(&p, &zv)| p * (lse - zv)).sum::<f64>();
    }
    Ok(total / batch.mask.len() as f64)
}

/// Gradient of [`reduced_kl_loss`] with respect to the logits: `(q - p̃) / |M|`
/// on masked rows, zero elsewhere.
pub fn loss_gradient(batch: &DistillBatch, cfg: &LossConfig) -> Result<Vec<f64>> {
    batch.validate()?;
    check_cfg(cfg, batch.vocab)?;
    let v = batch.vocab;
    let scale = 1.0 / batch.mask.len() as f64;
    let mut grad = vec![0.0; batch.logits.len()];
    for &t in &batch.mask {
        let pt = target_row(&batch.p_target[t * v..(t + 1) * v], cfg)?;
        let z = &batch.logits[t * v..(t + 1) * v];
        let lse = log_sum_exp(z);
        for ((g, &zv), &p) in grad[t * v..(t + 1) * v].iter_mut().zip(z).zip(&pt) {
            *g += ((zv - lse).exp() - p) * scale;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P4: [f64; 4] = [0.5, 0.3, 0.15, 0.05];

    fn single(p: &[f64], z: &[f64]) -> DistillBatch {
        DistillBatch { vocab: p.len(), p_target: p.to_vec(), logits: z.to_vec(), mask: vec![0] }
    }

    fn reduced(k: usize) -> LossConfig {
        LossConfig { k, mode: LossMode::Reduced }
    }

    #[test]
    fn support_cases() {
        assert_eq!(top_k_support(&P4, 2).unwrap(), vec![0, 1]);
        let mut all = top_k_support(&P4, 4).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(top_k_support(&[0.25; 4], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_support(&[0.1, 0.4, 0.1, 0.4], 3).unwrap(), vec![1, 3, 0]);
        assert!(top_k_support(&P4, 0).is_err());
        assert!(top_k_support(&P4, 5).is_err());
    }

    #[test]
    fn renormalize_cases() {
        let r = renormalize(&P4, &[0, 1]).unwrap();
        assert!((r[0] - 0.625).abs() < 1e-12 && (r[1] - 0.375).abs() < 1e-12);
        assert_eq!(&r[2..], &[0.0, 0.0]);
        let r = renormalize(&P4, &[0, 1, 2, 3]).unwrap();
        for (a, b) in r.iter().zip(&P4) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(renormalize(&P4, &[2]).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(renormalize(&[1.0, 0.0], &[1]).is_err());
        assert!(renormalize(&P4, &[]).is_err());
    }

    #[test]
    fn uniform_adapter_costs_log_vocab() {
        let l = reduced_kl_loss(&single(&P4, &[0.0; 4]), &reduced(2)).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_at_optimum_is_entropy() {
        let pt = renormalize(&P4, &[0, 1]).unwrap();
        // logits giving q proportional to p̃ on the support, tiny elsewhere
        let z: Vec<f64> = pt.iter().map(|&p| if p > 0.0 { p.ln() } else { -60.0 }).collect();
        let l = reduced_kl_loss(&single(&P4, &z), &reduced(2)).unwrap();
        let h: f64 = pt.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        assert!((l - h).abs() < 1e-9);
        let g = loss_gradient(&single(&P4, &z), &reduced(2)).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn two_token_gradient() {
        let g = loss_gradient(&single(&[1.0, 0.0], &[0.0, 0.0]), &reduced(1)).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_rows_have_no_gradient() {
        let b = DistillBatch { vocab: 2, p_target: vec![1.0, 0.0, 0.3, 0.7], logits: vec![0.0, 1.0, 2.0, -1.0], mask: vec![1] };
        let g = loss_gradient(&b, &LossConfig { k: 2, mode: LossMode::Full }).unwrap();
        assert_eq!(&g[..2], &[0.0, 0.0]);
        assert!(g[2] != 0.0);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let l = reduced_kl_loss(&single(&P4, &[-1e4, 0.0, 0.0, 1e4]), &reduced(2)).unwrap();
        assert!(l.is_finite() && l > 1e3);
    }

    #[test]
    fn invalid_batches_rejected() {
        let mut b = single(&P4, &[0.0; 4]);
        b.mask.clear();
        assert!(reduced_kl_loss(&b, &reduced(2)).is_err());
        let b = single(&[0.5, 0.6], &[0.0; 2]);
        assert!(reduced_kl_loss(&b, &reduced(1)).is_err());
        assert!(reduced_kl_loss(&single(&P4, &[0.0; 4]), &reduced(5)).is_err());
    }

    fn dist(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn shift_invariance_and_entropy_bound(
            raw in prop::collection::vec(0.01f64..1.0, 8),
            z in prop::collection::vec(-5.0f64..5.0, 8),
            c in -20.0f64..20.0,
            k in 1usize..=8,
        ) {
            let p = dist(&raw);
            let cfg = reduced(k);
            let l = reduced_kl_loss(&single(&p, &z), &cfg).unwrap();
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let l2 = reduced_kl_loss(&single(&p, &shifted), &cfg).unwrap();
            prop_assert!((l - l2).abs() < 1e-9);
            let pt = renormalize(&p, &top_k_support(&p, k).unwrap()).unwrap();
            let h: f64 = pt.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
            prop_assert!(l >= h - 1e-12);
            prop_assert!(l >= 0.0);
            let s: f64 = pt.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
