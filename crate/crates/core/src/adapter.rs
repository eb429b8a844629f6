//! Draft and shallow-verifier adapters.
//!
//! An adapter is `norm → multi-head attention → residual → norm`, reading
//! hidden states from a boundary layer of the target and decoding through the
//! target's own LM head. It has no head of its own.

use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::model::attention::attend_and_append;
use crate::model::runtime::{add_in_place, norm_rows};
use crate::model::weights::{adapter_tensor_specs, Init};
use crate::model::{HiddenStates, LayerCache, ModelConfig, QueryBatch};
use crate::tensor::{matmul, Matrix};

pub const DM_PREFIX: &str = "adapter.dm";
pub const SV_PREFIX: &str = "adapter.sv";

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub in_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub out_norm: Vec<f32>,
    pub n_heads: usize,
}

/// Adapter-side attention cache. Same slot and rollback contract as the target's.
pub type AdapterKv = LayerCache;

impl AdapterWeights {
    /// Seeded init. The out-projection starts at zero, so an untrained adapter
    /// reduces to `out_norm(in_norm(h))`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let d = config.d_model;
        let mut init = Init::new(seed);
        let sd = 1.0 / (d as f32).sqrt();
        Self {
            in_norm: vec![1.0; d],
            wq: init.normal(d, d, sd),
            wk: init.normal(d, d, sd),
            wv: init.normal(d, d, sd),
            wo: Matrix::zeros(d, d),
            out_norm: vec![1.0; d],
            n_heads: config.n_heads,
        }
    }

    pub fn d_model(&self) -> usize {
        self.in_norm.len()
    }

    pub fn param_count(&self) -> usize {
        self.in_norm.len()
            + self.out_norm.len()
            + [&self.wq, &self.wk, &self.wv, &self.wo].iter().map(|m| m.data().len()).sum::<usize>()
    }

    pub fn new_kv(&self) -> AdapterKv {
        LayerCache::new(self.d_model())
    }

    pub fn forward(&self, h: &HiddenStates, batch: &QueryBatch<'_>, kv: &mut AdapterKv) -> Result<HiddenStates> {
        adapter_forward(self, h, batch, kv)
    }

    pub(crate) fn named_tensors(&self, prefix: &str) -> Vec<(String, &[f32])> {
        vec![
            (format!("{prefix}.in_norm"), &self.in_norm[..]),
            (format!("{prefix}.wq"), self.wq.data()),
            (format!("{prefix}.wk"), self.wk.data()),
            (format!("{prefix}.wv"), self.wv.data()),
            (format!("{prefix}.wo"), self.wo.data()),
            (format!("{prefix}.out_norm"), &self.out_norm[..]),
        ]
    }

    fn from_named(c: &ModelConfig, prefix: &str, map: &mut HashMap<String, Vec<f32>>) -> Result<Self> {
        let specs = adapter_tensor_specs(c, prefix);
        let mut take = |short: &str| -> Result<Matrix> {
            let name = format!("{prefix}.{short}");
            let spec = specs.iter().find(|s| s.name == name).expect("known adapter tensor");
            let data = map.remove(&name).ok_or_else(|| invalid(format!("missing tensor {name}")))?;
            Matrix::from_vec(spec.rows, spec.cols, data)
        };
        Ok(Self {
            in_norm: take("in_norm")?.into_data(),
            wq: take("wq")?,
            wk: take("wk")?,
            wv: take("wv")?,
            wo: take("wo")?,
            out_norm: take("out_norm")?.into_data(),
            n_heads: c.n_heads,
        })
    }
}

/// Runs the adapter over a batch, appending one slot per row to `kv`.
pub fn adapter_forward(
    w: &AdapterWeights,
    h: &HiddenStates,
    batch: &QueryBatch<'_>,
    kv: &mut AdapterKv,
) -> Result<HiddenStates> {
    if h.states.cols() != w.d_model() {
        return Err(invalid(format!(
            "adapter width {} does not match hidden width {}",
            w.d_model(),
            h.states.cols()
        )));
    }
    if batch.len() != h.n_positions() {
        return Err(invalid("batch metadata does not match hidden-state rows"));
    }
    let mut x = norm_rows(&h.states, &w.in_norm);
    let q = matmul(&x, &w.wq)?;
    let k = matmul(&x, &w.wk)?;
    let v = matmul(&x, &w.wv)?;
    let att = attend_and_append(&q, &k, &v, batch, kv, w.n_heads)?;
    add_in_place(&mut x, &matmul(&att, &w.wo)?);
    Ok(HiddenStates { states: norm_rows(&x, &w.out_norm), layer: h.layer })
}

pub fn init_adapter(config: &ModelConfig, seed: u64) -> AdapterWeights {
    AdapterWeights::init(config, seed)
}

/// The draft adapter (reads layer `l_dm`) and the shallow-verifier adapter (reads layer `l_sv`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub dm: AdapterWeights,
    pub sv: AdapterWeights,
}

impl AdapterPair {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        Self {
            dm: AdapterWeights::init(config, seed),
            sv: AdapterWeights::init(config, seed.wrapping_add(0x5eed)),
        }
    }

    pub(crate) fn from_named(c: &ModelConfig, map: &mut HashMap<String, Vec<f32>>) -> Result<Self> {
        Ok(Self {
            dm: AdapterWeights::from_named(c, DM_PREFIX, map)?,
            sv: AdapterWeights::from_named(c, SV_PREFIX, map)?,
        })
    }
}
