use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::tensor::Matrix;

/// One pre-norm transformer block. Projections are stored `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix,
}

/// Name, owning layer (1-based, `None` for global tensors) and shape of a stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub layer: Option<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    fn new(name: impl Into<String>, layer: Option<usize>, rows: usize, cols: usize) -> Self {
        Self { name: name.into(), layer, rows, cols }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

const LAYER_TENSORS: [&str; 9] =
    ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down"];

/// Storage order of the target's tensors: embedding, layers 1..=n in order, final norm, head.
pub fn target_tensor_specs(c: &ModelConfig) -> Vec<TensorSpec> {
    let d = c.d_model;
    let mut specs = vec![TensorSpec::new("tok_embedding", None, c.vocab_size, d)];
    for l in 1..=c.n_layers {
        for name in LAYER_TENSORS {
            let (rows, cols) = match name {
                "attn_norm" | "mlp_norm" => (1, d),
                "w_gate" | "w_up" => (d, c.d_ff),
                "w_down" => (c.d_ff, d),
                _ => (d, d),
            };
            specs.push(TensorSpec::new(format!("layer.{l}.{name}"), Some(l), rows, cols));
        }
    }
    specs.push(TensorSpec::new("final_norm", None, 1, d));
    specs.push(TensorSpec::new("lm_head", None, d, c.vocab_size));
    specs
}

pub(crate) fn adapter_tensor_specs(c: &ModelConfig, prefix: &str) -> Vec<TensorSpec> {
    let d = c.d_model;
    ["in_norm", "wq", "wk", "wv", "wo", "out_norm"]
        .iter()
        .map(|name| {
            let rows = if name.ends_with("norm") { 1 } else { d };
            TensorSpec::new(format!("{prefix}.{name}"), None, rows, d)
        })
        .collect()
}

/// Seeded Gaussian draws for weight init.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub(crate) fn normal(&mut self, rows: usize, cols: usize, std: f32) -> Matrix {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("shape")
    }
}

// Init scales for the random toy target. The head scale keeps next-token
// distributions peaked enough that greedy choices are well separated.
const EMBED_STD: f32 = 1.0;
const HEAD_GAIN: f32 = 3.0;

impl Weights {
    pub fn random(c: &ModelConfig, seed: u64) -> Self {
        let mut init = Init::new(seed);
        let d = c.d_model;
        let sd = 1.0 / (d as f32).sqrt();
        let sff = 1.0 / (c.d_ff as f32).sqrt();
        let token_embedding = init.normal(c.vocab_size, d, EMBED_STD);
        let layers = (0..c.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: init.normal(d, d, sd),
                wk: init.normal(d, d, sd),
                wv: init.normal(d, d, sd),
                wo: init.normal(d, d, sd),
                mlp_norm: vec![1.0; d],
                w_gate: init.normal(d, c.d_ff, sd),
                w_up: init.normal(d, c.d_ff, sd),
                w_down: init.normal(c.d_ff, d, sff),
            })
            .collect();
        let lm_head = init.normal(d, c.vocab_size, HEAD_GAIN * sd);
        Self { token_embedding, layers, final_norm: vec![1.0; d], lm_head }
    }

    /// `(name, values)` for every tensor, in [`target_tensor_specs`] order.
    pub fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> =
            vec![("tok_embedding".into(), self.token_embedding.data())];
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            let parts: [&[f32]; 9] = [
                &l.attn_norm,
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                &l.mlp_norm,
                l.w_gate.data(),
                l.w_up.data(),
                l.w_down.data(),
            ];
            for (name, data) in LAYER_TENSORS.iter().zip(parts) {
                out.push((format!("layer.{n}.{name}"), data));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), self.lm_head.data()));
        out
    }

    pub(crate) fn from_named(c: &ModelConfig, map: &mut HashMap<String, Vec<f32>>) -> Result<Self> {
        let specs = target_tensor_specs(c);
        let mut take = |name: &str| -> Result<Matrix> {
            let spec = specs
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| invalid(format!("unknown tensor {name}")))?;
            let data = map.remove(name).ok_or_else(|| invalid(format!("missing tensor {name}")))?;
            Matrix::from_vec(spec.rows, spec.cols, data)
        };
        let token_embedding = take("tok_embedding")?;
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 1..=c.n_layers {
            let mut t = |n: &str| take(&format!("layer.{l}.{n}"));
            layers.push(LayerWeights {
                attn_norm: t("attn_norm")?.into_data(),
                wq: t("wq")?,
                wk: t("wk")?,
                wv: t("wv")?,
                wo: t("wo")?,
                mlp_norm: t("mlp_norm")?.into_data(),
                w_gate: t("w_gate")?,
                w_up: t("w_up")?,
                w_down: t("w_down")?,
            });
        }
        let final_norm = take("final_norm")?.into_data();
        let lm_head = take("lm_head")?;
        Ok(Self { token_embedding, layers, final_norm, lm_head })
    }
}
