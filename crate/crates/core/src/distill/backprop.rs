//! Double-precision adapter forward and backward over causal sequences.
//!
//! The shared head (final norm and LM head) is frozen: gradients flow through
//! it but it is never updated.

use crate::adapter::AdapterWeights;
use crate::error::{invalid, Result};
use crate::model::{Model, NORM_EPS};
use crate::tensor::Matrix;

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: m.data().iter().map(|&x| x as f64).collect() }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&x| x as f32).collect())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// `a · b`
fn mm(a: &Dense, b: &Dense) -> Dense {
    let mut out = Dense::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &x) in a.row(i).iter().enumerate() {
            for (oj, &bj) in o.iter_mut().zip(b.row(k)) {
                *oj += x * bj;
            }
        }
    }
    out
}

/// `aᵀ · b`
fn mm_tn(a: &Dense, b: &Dense) -> Dense {
    let mut out = Dense::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &x) in a.row(r).iter().enumerate() {
            for (oj, &bj) in out.row_mut(i).iter_mut().zip(br) {
                *oj += x * bj;
            }
        }
    }
    out
}

/// `a · bᵀ`
fn mm_nt(a: &Dense, b: &Dense) -> Dense {
    let mut out = Dense::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn inv_rms(x: &[f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + NORM_EPS as f64;
    1.0 / ms.sqrt()
}

/// Row-wise RMS norm; returns the output and each row's inverse RMS.
fn rms_forward(x: &Dense, gain: &[f64]) -> (Dense, Vec<f64>) {
    let mut out = Dense::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let r = inv_rms(x.row(i));
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(x.row(i)).zip(gain) {
            *o = v * r * g;
        }
        inv.push(r);
    }
    (out, inv)
}

/// Input gradient of a row-wise RMS norm, accumulating the gain gradient into `dgain`.
fn rms_backward(x: &Dense, gain: &[f64], inv: &[f64], dy: &Dense, dgain: Option<&mut [f64]>) -> Dense {
    let d = x.cols as f64;
    let mut dx = Dense::zeros(x.rows, x.cols);
    let mut dg = dgain;
    for (i, &r) in inv.iter().enumerate().take(x.rows) {
        let (xr, dyr) = (x.row(i), dy.row(i));
        let a: f64 = xr.iter().zip(dyr).zip(gain).map(|((&xv, &g_), &g)| g * g_ * xv).sum();
        for j in 0..x.cols {
            dx.data[i * x.cols + j] = r * gain[j] * dyr[j] - r * r * r * xr[j] * a / d;
        }
        if let Some(dg) = dg.as_deref_mut() {
            for j in 0..x.cols {
                dg[j] += dyr[j] * xr[j] * r;
            }
        }
    }
    dx
}

/// Adapter parameters in f64.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params {
    pub in_norm: Vec<f64>,
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub out_norm: Vec<f64>,
    pub n_heads: usize,
}

impl Params {
    pub fn from_weights(w: &AdapterWeights) -> Self {
        Self {
            in_norm: w.in_norm.iter().map(|&x| x as f64).collect(),
            wq: Dense::from_matrix(&w.wq),
            wk: Dense::from_matrix(&w.wk),
            wv: Dense::from_matrix(&w.wv),
            wo: Dense::from_matrix(&w.wo),
            out_norm: w.out_norm.iter().map(|&x| x as f64).collect(),
            n_heads: w.n_heads,
        }
    }

    pub fn to_weights(&self) -> Result<AdapterWeights> {
        Ok(AdapterWeights {
            in_norm: self.in_norm.iter().map(|&x| x as f32).collect(),
            wq: self.wq.to_matrix()?,
            wk: self.wk.to_matrix()?,
            wv: self.wv.to_matrix()?,
            wo: self.wo.to_matrix()?,
            out_norm: self.out_norm.iter().map(|&x| x as f32).collect(),
            n_heads: self.n_heads,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.in_norm.len();
        Self {
            in_norm: vec![0.0; d],
            wq: Dense::zeros(d, d),
            wk: Dense::zeros(d, d),
            wv: Dense::zeros(d, d),
            wo: Dense::zeros(d, d),
            out_norm: vec![0.0; d],
            n_heads: self.n_heads,
        }
    }

    /// Every parameter as one mutable flat view, in a fixed order.
    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.in_norm,
            &mut self.wq.data,
            &mut self.wk.data,
            &mut self.wv.data,
            &mut self.wo.data,
            &mut self.out_norm,
        ]
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [&self.in_norm, &self.wq.data, &self.wk.data, &self.wv.data, &self.wo.data, &self.out_norm]
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &Params) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// Frozen shared head in f64.
#[derive(Debug, Clone)]
pub(crate) struct Head {
    pub final_norm: Vec<f64>,
    pub lm_head: Dense,
}

impl Head {
    pub fn from_model(model: &Model) -> Self {
        let w = model.weights();
        Self {
            final_norm: w.final_norm.iter().map(|&x| x as f64).collect(),
            lm_head: Dense::from_matrix(&w.lm_head),
        }
    }
}

struct Tape {
    x0: Dense,
    r1: Vec<f64>,
    x: Dense,
    q: Dense,
    k: Dense,
    v: Dense,
    /// Per head, the causal attention rows (row i has i + 1 weights).
    probs: Vec<Vec<Vec<f64>>>,
    att: Dense,
    y: Dense,
    r2: Vec<f64>,
    o: Dense,
    r3: Vec<f64>,
}

fn forward_tape(p: &Params, head: &Head, h: &Dense) -> (Dense, Tape) {
    let n = h.rows;
    let d = h.cols;
    let hd = d / p.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (x, r1) = rms_forward(h, &p.in_norm);
    let q = mm(&x, &p.wq);
    let k = mm(&x, &p.wk);
    let v = mm(&x, &p.wv);
    let mut att = Dense::zeros(n, d);
    let mut probs = Vec::with_capacity(p.n_heads);
    for hh in 0..p.n_heads {
        let span = hh * hd..(hh + 1) * hd;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let qi = &q.row(i)[span.clone()];
            let mut s: Vec<f64> = (0..=i)
                .map(|j| qi.iter().zip(&k.row(j)[span.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for w in s.iter_mut() {
                *w = (*w - m).exp();
                sum += *w;
            }
            for w in s.iter_mut() {
                *w /= sum;
            }
            let out = &mut att.row_mut(i)[span.clone()];
            for (j, &w) in s.iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(&v.row(j)[span.clone()]) {
                    *o += w * vv;
                }
            }
            rows.push(s);
        }
        probs.push(rows);
    }
    let mut y = mm(&att, &p.wo);
    for (a, &b) in y.data.iter_mut().zip(&x.data) {
        *a += b;
    }
    let (o, r2) = rms_forward(&y, &p.out_norm);
    let (u, r3) = rms_forward(&o, &head.final_norm);
    let z = mm(&u, &head.lm_head);
    (z, Tape { x0: h.clone(), r1, x, q, k, v, probs, att, y, r2, o, r3 })
}

/// Adapter logits for a causal sequence of boundary hidden states.
pub(crate) fn logits(p: &Params, head: &Head, h: &Dense) -> Dense {
    forward_tape(p, head, h).0
}

/// Logits and the parameter gradient for the upstream logit gradient returned by `dz_of`.
pub(crate) fn forward_backward<F>(p: &Params, head: &Head, h: &Dense, dz_of: F) -> Result<(f64, Params)>
where
    F: FnOnce(&Dense) -> Result<(f64, Dense)>,
{
    if h.cols != p.in_norm.len() {
        return Err(invalid("hidden width does not match the adapter"));
    }
    let (z, t) = forward_tape(p, head, h);
    let (loss, dz) = dz_of(&z)?;
    let n = h.rows;
    let d = h.cols;
    let hd = d / p.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut g = p.zeros_like();

    let du = mm_nt(&dz, &head.lm_head);
    let do_ = rms_backward(&t.o, &head.final_norm, &t.r3, &du, None);
    let dy = rms_backward(&t.y, &p.out_norm, &t.r2, &do_, Some(&mut g.out_norm));

    g.wo = mm_tn(&t.att, &dy);
    let datt = mm_nt(&dy, &p.wo);
    let mut dq = Dense::zeros(n, d);
    let mut dk = Dense::zeros(n, d);
    let mut dv = Dense::zeros(n, d);
    for hh in 0..p.n_heads {
        let span = hh * hd..(hh + 1) * hd;
        for i in 0..n {
            let pr = &t.probs[hh][i];
            let da = &datt.row(i)[span.clone()];
            let dp: Vec<f64> =
                (0..=i).map(|j| da.iter().zip(&t.v.row(j)[span.clone()]).map(|(a, b)| a * b).sum()).collect();
            let dot: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                let ds = pr[j] * (dp[j] - dot) * scale;
                for c in span.clone() {
                    dv.data[j * d + c] += pr[j] * datt.data[i * d + c];
                    dq.data[i * d + c] += ds * t.k.data[j * d + c];
                    dk.data[j * d + c] += ds * t.q.data[i * d + c];
                }
            }
        }
    }
    g.wq = mm_tn(&t.x, &dq);
    g.wk = mm_tn(&t.x, &dk);
    g.wv = mm_tn(&t.x, &dv);
    let mut dx = dy;
    for part in [mm_nt(&dq, &p.wq), mm_nt(&dk, &p.wk), mm_nt(&dv, &p.wv)] {
        for (a, &b) in dx.data.iter_mut().zip(&part.data) {
            *a += b;
        }
    }
    rms_backward(&t.x0, &p.in_norm, &t.r1, &dx, Some(&mut g.in_norm));
    Ok((loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterWeights;
    use crate::distill::loss::{loss_gradient, reduced_kl_loss, DistillBatch, LossConfig, LossMode};
    use crate::model::{ModelConfig, QueryBatch, SlotTag};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 3, d_model: 8, n_heads: 2, vocab_size: 16, max_seq: 32, l_dm: 1, l_sv: 2, bytes_per_param: 2, d_ff: 16 }
    }

    fn random_params(c: &ModelConfig, rng: &mut ChaCha8Rng) -> Params {
        let mut p = Params::from_weights(&AdapterWeights::init(c, rng.random()));
        for s in p.slices_mut() {
            for x in s.iter_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn batch_for(z: &Dense, p_target: &[f64], mask: &[usize]) -> DistillBatch {
        DistillBatch { vocab: z.cols, p_target: p_target.to_vec(), logits: z.data.clone(), mask: mask.to_vec() }
    }

    #[test]
    fn matches_finite_differences() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::random(c, 1).unwrap();
        let head = Head::from_model(&model);
        for mode in [LossMode::Reduced, LossMode::Full] {
            let cfg = LossConfig { k: 4, mode };
            let p = random_params(&c, &mut rng);
            let n = 5;
            let h = Dense { rows: n, cols: 8, data: (0..n * 8).map(|_| rng.random_range(-2.0..2.0)).collect() };
            let mut pt = Vec::new();
            for _ in 0..n {
                let z: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
                pt.extend(softmax(&z));
            }
            let mask = vec![1, 2, 4];
            let loss_of = |q: &Params| {
                let z = logits(q, &head, &h);
                reduced_kl_loss(&batch_for(&z, &pt, &mask), &cfg).unwrap()
            };
            let (loss, g) = forward_backward(&p, &head, &h, |z| {
                let b = batch_for(z, &pt, &mask);
                let dz = loss_gradient(&b, &cfg)?;
                Ok((reduced_kl_loss(&b, &cfg)?, Dense { rows: z.rows, cols: z.cols, data: dz }))
            })
            .unwrap();
            assert!((loss - loss_of(&p)).abs() < 1e-12);

            let step = 1e-5;
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            let gs = g.slices();
            for (s, gsl) in gs.iter().enumerate().take(6) {
                for (i, &gv) in gsl.iter().enumerate() {
                    let mut a = p.clone();
                    a.slices_mut()[s][i] += step;
                    let mut b = p.clone();
                    b.slices_mut()[s][i] -= step;
                    let fd = (loss_of(&a) - loss_of(&b)) / (2.0 * step);
                    num += (fd - gv).powi(2);
                    den += fd.powi(2).max(gv.powi(2));
                }
            }
            let rel = (num / den).sqrt();
            assert!(rel < 1e-6, "{mode:?}: relative error {rel}");
        }
    }

    #[test]
    fn agrees_with_inference_path() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::random(c, 2).unwrap();
        let p = random_params(&c, &mut rng);
        let w = p.to_weights().unwrap();
        let n = 6;
        let hm = Matrix::from_vec(n, 8, (0..n * 8).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap();
        let pos: Vec<usize> = (0..n).collect();
        let tags = vec![SlotTag::Committed; n];
        let batch = QueryBatch { positions: &pos, tags: &tags, tree: None };
        let hs = crate::model::HiddenStates { states: hm.clone(), layer: 1 };
        let mut kv = w.new_kv();
        let out = w.forward(&hs, &batch, &mut kv).unwrap();
        let z32 = model.lm_head_logits(&out).unwrap();
        let z64 = logits(&Params::from_weights(&w), &Head::from_model(&model), &Dense::from_matrix(&hm));
        let diff = z32.data().iter().zip(&z64.data).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-3, "{diff}");
    }
}
