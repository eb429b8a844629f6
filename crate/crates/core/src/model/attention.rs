use super::kv::{LayerCache, QueryBatch, SlotMeta};
use crate::error::{internal, Result};
use crate::tensor::Matrix;

/// Appends the batch's key/value rows to `cache`, then runs multi-head
/// attention of every query row over the slots visible to it.
///
/// Slots are visited in cache order, so a query sees its context in the same
/// sequence whether it arrives alone or inside a tree batch.
pub(crate) fn attend_and_append(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    batch: &QueryBatch<'_>,
    cache: &mut LayerCache,
    n_heads: usize,
) -> Result<Matrix> {
    let width = q.cols();
    let head_dim = width / n_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    for i in 0..batch.len() {
        cache.push(k.row(i), v.row(i), SlotMeta { position: batch.positions[i], tag: batch.tags[i] });
    }

    let mut out = Matrix::zeros(q.rows(), width);
    let mut visible = Vec::with_capacity(cache.len());
    let mut weights = Vec::with_capacity(cache.len());
    for i in 0..batch.len() {
        visible.clear();
        visible.extend((0..cache.len()).filter(|&s| batch.visible(i, &cache.slots()[s])));
        if visible.is_empty() {
            return Err(internal(format!("query row {i} sees no cache slot")));
        }
        let qrow = q.row(i);
        let orow = out.row_mut(i);
        for h in 0..n_heads {
            let span = h * head_dim..(h + 1) * head_dim;
            let qh = &qrow[span.clone()];
            weights.clear();
            let mut max = f32::NEG_INFINITY;
            for &s in &visible {
                let kh = &cache.key(s)[span.clone()];
                let mut dot = 0.0f32;
                for (a, b) in qh.iter().zip(kh) {
                    dot += a * b;
                }
                let score = dot * scale;
                max = max.max(score);
                weights.push(score);
            }
            let mut sum = 0.0f32;
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                sum += *w;
            }
            let oh = &mut orow[span.clone()];
            for (&s, &w) in visible.iter().zip(&weights) {
                let p = w / sum;
                for (o, &vv) in oh.iter_mut().zip(&cache.value(s)[span.clone()]) {
                    *o += p * vv;
                }
            }
        }
    }
    Ok(out)
}
