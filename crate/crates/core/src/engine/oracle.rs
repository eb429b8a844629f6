use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{internal, invalid, Result};
use crate::model::{Model, QueryBatch, SlotTag};
use crate::tensor::{argmax_tiebreak, softmax_rows};

/// Reference decoder: one full forward per token. `temperature == 0` is greedy.
///
/// Returns only the new tokens, stopping after `eos` if it is produced.
pub fn decode_autoregressive(
    model: &Model,
    prompt: &[u32],
    max_new_tokens: usize,
    temperature: f32,
    seed: u64,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("temperature must be non-negative, got {temperature}")));
    }
    if max_new_tokens == 0 {
        return Ok(Vec::new());
    }
    if prompt.len() + max_new_tokens > model.config().max_seq {
        return Err(invalid("prompt plus new tokens exceeds max_seq"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |logits: &crate::tensor::Matrix| -> Result<u32> {
        let t = if temperature == 0.0 { 1.0 } else { temperature };
        let p = softmax_rows(logits, t)?;
        let idx = if temperature == 0.0 {
            argmax_tiebreak(p.row(0))?
        } else {
            WeightedIndex::new(p.row(0)).map_err(|e| internal(format!("cannot sample: {e}")))?.sample(&mut rng)
        };
        Ok(idx as u32)
    };

    let pre = model.prefill(prompt)?;
    let mut kv = pre.kv;
    let mut out = vec![pick(&model.lm_head_logits(&pre.at_final.select(&[prompt.len() - 1]))?)?];
    let n = model.config().n_layers;
    while out.len() < max_new_tokens && Some(*out.last().unwrap()) != eos {
        let pos = [prompt.len() + out.len() - 1];
        let tags = [SlotTag::Committed];
        let batch = QueryBatch { positions: &pos, tags: &tags, tree: None };
        let h = model.embed(&[*out.last().unwrap()], &pos)?;
        let h = model.forward_range(1, n, &h, &batch, &mut kv)?;
        out.push(pick(&model.lm_head_logits(&h)?)?);
    }
    Ok(out)
}
