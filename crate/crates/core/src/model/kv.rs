//! Key/value storage with tagged speculative slots.
//!
//! Speculative rows are never copied or snapshotted: each slot carries a tag
//! naming the tree node that produced it, and rollback filters slots by tag.

use crate::error::{internal, Result};
use crate::tree::TreeMask;

/// Provenance of a cache slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SlotTag {
    Committed,
    /// Produced while processing verification-tree node `id`.
    Node(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotMeta {
    pub position: usize,
    pub tag: SlotTag,
}

/// Positions, tags and visibility rule for a batch of query rows.
///
/// A row sees every committed slot whose position does not exceed its own.
/// A speculative row (tag `Node(i)`) additionally sees slot `Node(j)` iff the
/// tree mask allows `(i, j)`. Committed rows never see speculative slots.
#[derive(Debug, Clone, Copy)]
pub struct QueryBatch<'a> {
    pub positions: &'a [usize],
    pub tags: &'a [SlotTag],
    pub tree: Option<&'a TreeMask>,
}

impl<'a> QueryBatch<'a> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub(crate) fn visible(&self, row: usize, slot: &SlotMeta) -> bool {
        match (slot.tag, self.tags[row]) {
            (SlotTag::Committed, _) => slot.position <= self.positions[row],
            (SlotTag::Node(_), SlotTag::Committed) => false,
            (SlotTag::Node(j), SlotTag::Node(i)) => self.tree.is_some_and(|m| m.allows(i, j)),
        }
    }
}

/// Keys and values of one attention block (one target layer or one adapter).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    width: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    slots: Vec<SlotMeta>,
}

impl LayerCache {
    pub fn new(width: usize) -> Self {
        Self { width, keys: Vec::new(), values: Vec::new(), slots: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn slots(&self) -> &[SlotMeta] {
        &self.slots
    }

    pub fn key(&self, slot: usize) -> &[f32] {
        &self.keys[slot * self.width..(slot + 1) * self.width]
    }

    pub fn value(&self, slot: usize) -> &[f32] {
        &self.values[slot * self.width..(slot + 1) * self.width]
    }

    pub(crate) fn push(&mut self, key: &[f32], value: &[f32], meta: SlotMeta) {
        debug_assert_eq!(key.len(), self.width);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.slots.push(meta);
    }

    pub fn committed_len(&self) -> usize {
        self.slots.iter().filter(|s| s.tag == SlotTag::Committed).count()
    }

    /// Relabels the accepted-path slots as committed and drops every other speculative slot.
    pub fn commit_path(&mut self, accepted_path: &[usize], new_committed_len: usize) -> Result<()> {
        for &node in accepted_path {
            if !self.slots.iter().any(|s| s.tag == SlotTag::Node(node)) {
                return Err(internal(format!("accepted node {node} has no cache slot")));
            }
        }
        let mut keep = 0;
        for i in 0..self.slots.len() {
            let meta = self.slots[i];
            let kept = match meta.tag {
                SlotTag::Committed => Some(meta),
                SlotTag::Node(n) if accepted_path.contains(&n) => {
                    Some(SlotMeta { position: meta.position, tag: SlotTag::Committed })
                }
                SlotTag::Node(_) => None,
            };
            if let Some(m) = kept {
                if keep != i {
                    let w = self.width;
                    self.keys.copy_within(i * w..(i + 1) * w, keep * w);
                    self.values.copy_within(i * w..(i + 1) * w, keep * w);
                }
                self.slots[keep] = m;
                keep += 1;
            }
        }
        self.slots.truncate(keep);
        self.keys.truncate(keep * self.width);
        self.values.truncate(keep * self.width);
        self.check_prefix(new_committed_len)
    }

    /// Committed slots must be exactly positions `0..len`, in order, with nothing speculative left.
    fn check_prefix(&self, len: usize) -> Result<()> {
        if self.slots.len() != len {
            return Err(internal(format!(
                "cache holds {} slots after commit, expected {len}",
                self.slots.len()
            )));
        }
        for (i, s) in self.slots.iter().enumerate() {
            if s.tag != SlotTag::Committed || s.position != i {
                return Err(internal(format!(
                    "slot {i} is {:?} at position {}, expected committed position {i}",
                    s.tag, s.position
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &LayerCache) -> Option<f32> {
        if self.slots != other.slots || self.width != other.width {
            return None;
        }
        let diff = |a: &[f32], b: &[f32]| {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max)
        };
        Some(diff(&self.keys, &other.keys).max(diff(&self.values, &other.values)))
    }
}

/// Per-layer caches for the whole target; index 0 holds layer 1.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(n_layers: usize, width: usize) -> Self {
        Self { layers: (0..n_layers).map(|_| LayerCache::new(width)).collect() }
    }

    /// Cache of 1-based layer `l`.
    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l - 1]
    }

    pub(crate) fn layer_mut(&mut self, l: usize) -> &mut LayerCache {
        &mut self.layers[l - 1]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Committed length, provided every layer agrees on it.
    pub fn committed_len(&self) -> Result<usize> {
        let first = self.layers.first().map_or(0, LayerCache::committed_len);
        if self.layers.iter().any(|l| l.committed_len() != first) {
            return Err(internal("layers disagree on committed length"));
        }
        Ok(first)
    }

    /// Commits `accepted_path` in every layer and removes all other speculative slots.
    pub fn commit_and_rollback(&mut self, accepted_path: &[usize], new_committed_len: usize) -> Result<()> {
        for layer in &mut self.layers {
            layer.commit_path(accepted_path, new_committed_len)?;
        }
        Ok(())
    }

    /// Largest per-entry difference against `other`, or `None` if slot layouts differ.
    pub fn max_abs_diff(&self, other: &KvCache) -> Option<f32> {
        if self.layers.len() != other.layers.len() {
            return None;
        }
        let mut worst = 0.0f32;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
        Some(worst)
    }
}
