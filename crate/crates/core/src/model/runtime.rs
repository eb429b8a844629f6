use super::attention::attend_and_append;
use super::config::{Boundaries, ModelConfig, NORM_EPS};
use super::kv::{KvCache, QueryBatch, SlotTag};
use super::weights::{LayerWeights, Weights};
use crate::error::{invalid, Result};
use crate::tensor::{self, matmul, Matrix};

/// Activations for a batch of positions, tagged with the layer that produced
/// them (0 = embedding output).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub states: Matrix,
    pub layer: usize,
}

impl HiddenStates {
    pub fn n_positions(&self) -> usize {
        self.states.rows()
    }

    pub fn select(&self, rows: &[usize]) -> HiddenStates {
        HiddenStates { states: self.states.select_rows(rows), layer: self.layer }
    }
}

/// Hidden states captured by a prompt prefill at the two boundaries and the top.
#[derive(Debug, Clone)]
pub struct Prefill {
    pub at_dm: HiddenStates,
    pub at_sv: HiddenStates,
    pub at_final: HiddenStates,
    pub kv: KvCache,
}

/// An immutable target model. Share it freely across sessions and threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ok = weights.token_embedding.rows() == config.vocab_size
            && weights.token_embedding.cols() == d
            && weights.layers.len() == config.n_layers
            && weights.final_norm.len() == d
            && weights.lm_head.rows() == d
            && weights.lm_head.cols() == config.vocab_size
            && weights.layers.iter().all(|l| {
                l.attn_norm.len() == d
                    && l.mlp_norm.len() == d
                    && [&l.wq, &l.wk, &l.wv, &l.wo].iter().all(|m| m.rows() == d && m.cols() == d)
                    && l.w_gate.rows() == d
                    && l.w_gate.cols() == config.d_ff
                    && l.w_up.rows() == d
                    && l.w_up.cols() == config.d_ff
                    && l.w_down.rows() == config.d_ff
                    && l.w_down.cols() == d
            });
        if !ok {
            return Err(invalid("weight shapes do not match the model config"));
        }
        Ok(Self { config, weights })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::new(config, Weights::random(&config, seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.n_layers, self.config.d_model)
    }

    /// Token embedding plus a sinusoidal encoding of each explicit position id.
    pub fn embed(&self, tokens: &[u32], positions: &[usize]) -> Result<HiddenStates> {
        if tokens.len() != positions.len() {
            return Err(invalid("tokens and positions differ in length"));
        }
        let d = self.config.d_model;
        let mut states = Matrix::zeros(tokens.len(), d);
        for (i, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(invalid(format!("token {t} outside vocabulary")));
            }
            if p >= self.config.max_seq {
                return Err(invalid(format!("position {p} exceeds max_seq {}", self.config.max_seq)));
            }
            let row = states.row_mut(i);
            row.copy_from_slice(self.weights.token_embedding.row(t as usize));
            add_position_encoding(row, p);
        }
        Ok(HiddenStates { states, layer: 0 })
    }

    /// Runs layers `l_from..=l_to` (1-based). `l_from == l_to + 1` is the empty range.
    ///
    /// Every layer in the range appends one key/value slot per row to `kv`,
    /// tagged with the row's tag.
    pub fn forward_range(
        &self,
        l_from: usize,
        l_to: usize,
        h_in: &HiddenStates,
        batch: &QueryBatch<'_>,
        kv: &mut KvCache,
    ) -> Result<HiddenStates> {
        let n = self.config.n_layers;
        if l_from < 1 || l_from > l_to + 1 || l_to > n {
            return Err(invalid(format!("layer range {l_from}..={l_to} outside 1..={n}")));
        }
        if h_in.layer + 1 != l_from {
            return Err(invalid(format!(
                "hidden states come from layer {}, range starts at {l_from}",
                h_in.layer
            )));
        }
        if batch.len() != h_in.n_positions() || batch.tags.len() != batch.len() {
            return Err(invalid("batch metadata does not match hidden-state rows"));
        }
        if h_in.states.cols() != self.config.d_model {
            return Err(invalid("hidden width does not match d_model"));
        }
        let mut h = h_in.states.clone();
        for l in l_from..=l_to {
            h = self.block(&self.weights.layers[l - 1], h, batch, kv, l)?;
        }
        Ok(HiddenStates { states: h, layer: l_to })
    }

    fn block(
        &self,
        w: &LayerWeights,
        mut h: Matrix,
        batch: &QueryBatch<'_>,
        kv: &mut KvCache,
        l: usize,
    ) -> Result<Matrix> {
        let x = norm_rows(&h, &w.attn_norm);
        let q = matmul(&x, &w.wq)?;
        let k = matmul(&x, &w.wk)?;
        let v = matmul(&x, &w.wv)?;
        let att = attend_and_append(&q, &k, &v, batch, kv.layer_mut(l), self.config.n_heads)?;
        add_in_place(&mut h, &matmul(&att, &w.wo)?);

        let x = norm_rows(&h, &w.mlp_norm);
        let mut gate = matmul(&x, &w.w_gate)?;
        let up = matmul(&x, &w.w_up)?;
        for (g, &u) in gate.data_mut().iter_mut().zip(up.data()) {
            *g = silu(*g) * u;
        }
        add_in_place(&mut h, &matmul(&gate, &w.w_down)?);
        Ok(h)
    }

    /// Final norm then the shared LM head. Serves the target and both adapters.
    pub fn lm_head_logits(&self, h: &HiddenStates) -> Result<Matrix> {
        self.head_logits(&h.states)
    }

    pub(crate) fn head_logits(&self, states: &Matrix) -> Result<Matrix> {
        if states.cols() != self.config.d_model {
            return Err(invalid(format!(
                "hidden width {} does not match d_model {}",
                states.cols(),
                self.config.d_model
            )));
        }
        matmul(&norm_rows(states, &self.weights.final_norm), &self.weights.lm_head)
    }

    /// Full-depth prefill of a prompt, committing every prompt position.
    pub fn prefill(&self, prompt: &[u32]) -> Result<Prefill> {
        self.prefill_at(prompt, self.config.boundaries())
    }

    pub fn prefill_at(&self, prompt: &[u32], b: Boundaries) -> Result<Prefill> {
        self.config.check_boundaries(b)?;
        if prompt.is_empty() {
            return Err(invalid("empty prompt"));
        }
        if prompt.len() > self.config.max_seq {
            return Err(invalid(format!(
                "prompt length {} exceeds max_seq {}",
                prompt.len(),
                self.config.max_seq
            )));
        }
        let positions: Vec<usize> = (0..prompt.len()).collect();
        let tags = vec![SlotTag::Committed; prompt.len()];
        let batch = QueryBatch { positions: &positions, tags: &tags, tree: None };
        let mut kv = self.new_cache();
        let h0 = self.embed(prompt, &positions)?;
        let at_dm = self.forward_range(1, b.l_dm, &h0, &batch, &mut kv)?;
        let at_sv = self.forward_range(b.l_dm + 1, b.l_sv, &at_dm, &batch, &mut kv)?;
        let at_final = self.forward_range(b.l_sv + 1, self.config.n_layers, &at_sv, &batch, &mut kv)?;
        Ok(Prefill { at_dm, at_sv, at_final, kv })
    }
}

pub(crate) fn norm_rows(h: &Matrix, gain: &[f32]) -> Matrix {
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for r in 0..h.rows() {
        tensor::rms_norm_into(h.row(r), gain, NORM_EPS, out.row_mut(r));
    }
    out
}

pub(crate) fn add_in_place(h: &mut Matrix, delta: &Matrix) {
    for (a, &b) in h.data_mut().iter_mut().zip(delta.data()) {
        *a += b;
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn add_position_encoding(row: &mut [f32], position: usize) {
    let d = row.len();
    for i in (0..d).step_by(2) {
        let freq = 10000f64.powf(-(i as f64) / d as f64);
        let angle = position as f64 * freq;
        row[i] += angle.sin() as f32;
        if i + 1 < d {
            row[i + 1] += angle.cos() as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::chain_tree;

    fn model() -> Model {
        Model::random(ModelConfig::default(), 7).unwrap()
    }

    fn committed(n: usize) -> (Vec<usize>, Vec<SlotTag>) {
        ((0..n).collect(), vec![SlotTag::Committed; n])
    }

    #[test]
    fn split_ranges_compose_to_full_forward() {
        let m = model();
        let prompt = [3u32, 17, 200, 5, 9];
        let (pos, tags) = committed(prompt.len());
        let batch = QueryBatch { positions: &pos, tags: &tags, tree: None };
        let h0 = m.embed(&prompt, &pos).unwrap();

        let mut kv_full = m.new_cache();
        let full = m.forward_range(1, 8, &h0, &batch, &mut kv_full).unwrap();

        for (a, b) in [(2, 5), (1, 7), (4, 4)] {
            let mut kv = m.new_cache();
            let h1 = m.forward_range(1, a, &h0, &batch, &mut kv).unwrap();
            let h2 = m.forward_range(a + 1, b, &h1, &batch, &mut kv).unwrap();
            let h3 = m.forward_range(b + 1, 8, &h2, &batch, &mut kv).unwrap();
            assert!(h3.states.max_abs_diff(&full.states) <= 1e-5);
            assert_eq!(kv.max_abs_diff(&kv_full), Some(0.0));
        }
    }

    #[test]
    fn empty_range_is_identity() {
        let m = model();
        let (pos, tags) = committed(2);
        let batch = QueryBatch { positions: &pos, tags: &tags, tree: None };
        let h0 = m.embed(&[1, 2], &pos).unwrap();
        let mut kv = m.new_cache();
        let h1 = m.forward_range(1, 3, &h0, &batch, &mut kv).unwrap();
        let same = m.forward_range(4, 3, &h1, &batch, &mut kv).unwrap();
        assert_eq!(same, h1);
    }

    #[test]
    fn rejects_bad_ranges() {
        let m = model();
        let (pos, tags) = committed(1);
        let batch = QueryBatch { positions: &pos, tags: &tags, tree: None };
        let h0 = m.embed(&[1], &pos).unwrap();
        let mut kv = m.new_cache();
        assert!(m.forward_range(0, 2, &h0, &batch, &mut kv).is_err());
        assert!(m.forward_range(1, 9, &h0, &batch, &mut kv).is_err());
        // hidden states from layer 0 cannot enter at layer 3
        assert!(m.forward_range(3, 4, &h0, &batch, &mut kv).is_err());
    }

    #[test]
    fn incremental_decode_matches_scratch_prefill() {
        let m = model();
        let prompt = [10u32, 20, 30];
        let p = m.prefill(&prompt).unwrap();
        let logits = m.lm_head_logits(&p.at_final).unwrap();
        let next = tensor::argmax_tiebreak(logits.row(2)).unwrap() as u32;

        let mut kv = p.kv.clone();
        let pos = [3usize];
        let tags = [SlotTag::Committed];
        let batch = QueryBatch { positions: &pos, tags: &tags, tree: None };
        let h = m.embed(&[next], &pos).unwrap();
        m.forward_range(1, 8, &h, &batch, &mut kv).unwrap();

        let scratch = m.prefill(&[10, 20, 30, next]).unwrap();
        assert!(kv.max_abs_diff(&scratch.kv).unwrap() <= 1e-5);
    }

    #[test]
    fn prefill_length_one_and_bounds() {
        let m = model();
        let p = m.prefill(&[4]).unwrap();
        for l in 1..=8 {
            assert_eq!(p.kv.layer(l).committed_len(), 1);
        }
        assert_eq!(p.at_dm.layer, 2);
        assert_eq!(p.at_sv.layer, 5);
        assert_eq!(p.at_final.layer, 8);
        assert!(m.prefill(&[]).is_err());
        assert!(m.prefill(&vec![1u32; 513]).is_err());
    }

    #[test]
    fn head_logits_shape_and_zero_row() {
        let mut m = model();
        let h = HiddenStates { states: Matrix::zeros(3, 64), layer: 8 };
        let logits = m.lm_head_logits(&h).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (3, 256));
        assert_eq!(logits.row(0), logits.row(2));
        assert_eq!(tensor::argmax_tiebreak(logits.row(0)).unwrap(), 0);

        m.weights_mut().lm_head = Matrix::zeros(64, 256);
        let row = [0.5f32; 64].to_vec();
        let h = HiddenStates { states: Matrix::from_rows(&[row.clone(), row]).unwrap(), layer: 8 };
        let logits = m.lm_head_logits(&h).unwrap();
        assert_eq!(logits.row(0), logits.row(1));

        let narrow = HiddenStates { states: Matrix::zeros(1, 8), layer: 8 };
        assert!(m.lm_head_logits(&narrow).is_err());
    }

    #[test]
    fn speculative_rows_do_not_leak_into_committed_queries() {
        let m = model();
        let p = m.prefill(&[1, 2]).unwrap();
        let mut kv = p.kv.clone();
        // Push a speculative node, then a committed query at the same position
        // must ignore it.
        let tree = chain_tree(&[9], 2).unwrap();
        let mask = crate::tree::tree_mask(&tree);
        let h = m.embed(&[9], &[3]).unwrap();
        m.forward_range(1, 8, &h, &QueryBatch { positions: &[3], tags: &[SlotTag::Node(0)], tree: Some(&mask) }, &mut kv)
            .unwrap();
        let pos = [2usize];
        let tags = [SlotTag::Committed];
        let batch = QueryBatch { positions: &pos, tags: &tags, tree: None };
        let h = m.embed(&[5], &pos).unwrap();
        let with_spec = m.forward_range(1, 8, &h, &batch, &mut kv).unwrap();
        let mut clean = p.kv.clone();
        let without = m.forward_range(1, 8, &h, &batch, &mut clean).unwrap();
        assert_eq!(with_spec, without);
    }
}
