//! Self-distillation corpus: target-sampled sequences with the target's
//! next-token distributions and boundary hidden states.
//!
//! ```text
//! magic "CSPD" | version u32 | l_dm u32 | l_sv u32 | d_model u32 | vocab u32 | n_sequences u32
//! per sequence: len u32 | prompt_len u32 | tokens (len × u32)
//!               h_dm (len × d f32) | h_sv (len × d f32) | p_target (len × vocab f64)
//! ```
//! All values little-endian.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::decode_autoregressive;
use crate::error::{invalid, io_err, Error, Result};
use crate::model::format::write_atomic;
use crate::model::{Boundaries, Model};
use crate::tensor::Matrix;

pub const CORPUS_MAGIC: &[u8; 4] = b"CSPD";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_sequences: usize,
    /// Total tokens per sequence, prompt included.
    pub length: usize,
    /// Random tokens seeding each sequence; excluded from the loss.
    pub prompt_len: usize,
    /// Sampling temperature used to extend the prompts.
    pub temperature: f32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_sequences: 64, length: 64, prompt_len: 8, temperature: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSequence {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    /// Hidden states after layer `l_dm`, one row per token.
    pub h_dm: Matrix,
    /// Hidden states after layer `l_sv`.
    pub h_sv: Matrix,
    /// Target next-token distribution per position, row-major `len × vocab`.
    pub p_target: Vec<f64>,
}

impl CorpusSequence {
    /// Positions that contribute to the loss.
    pub fn mask(&self) -> Vec<usize> {
        (self.prompt_len..self.tokens.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub boundaries: Boundaries,
    pub d_model: usize,
    pub vocab: usize,
    pub sequences: Vec<CorpusSequence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Splits off the last `n` sequences, e.g. as a held-out set.
    pub fn split_tail(mut self, n: usize) -> (Corpus, Corpus) {
        let at = self.sequences.len().saturating_sub(n);
        let tail = self.sequences.split_off(at);
        let held = Corpus { sequences: tail, ..self.clone() };
        (self, held)
    }
}

fn sequence_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Samples `n_sequences` continuations of random prompts from the target and
/// records what adapter training needs. Sequences are generated in parallel
/// and returned in index order.
pub fn generate_corpus(model: &Model, b: Boundaries, cfg: &CorpusConfig) -> Result<Corpus> {
    let c = model.config();
    c.check_boundaries(b)?;
    if cfg.n_sequences > 0 && (cfg.prompt_len == 0 || cfg.prompt_len >= cfg.length || cfg.length > c.max_seq) {
        return Err(invalid(format!(
            "need 1 <= prompt_len < length <= max_seq, got prompt_len {} length {}",
            cfg.prompt_len, cfg.length
        )));
    }
    if !(cfg.temperature > 0.0) {
        return Err(invalid("corpus temperature must be positive"));
    }
    let v = c.vocab_size;
    let sequences = (0..cfg.n_sequences)
        .into_par_iter()
        .map(|i| {
            let seed = sequence_seed(cfg.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tokens: Vec<u32> = (0..cfg.prompt_len).map(|_| rng.random_range(0..v as u32)).collect();
            let cont = decode_autoregressive(model, &tokens, cfg.length - cfg.prompt_len, cfg.temperature, seed, None)?;
            tokens.extend(cont);
            let pre = model.prefill_at(&tokens, b)?;
            let logits = model.lm_head_logits(&pre.at_final)?;
            let mut p_target = Vec::with_capacity(tokens.len() * v);
            for r in 0..logits.rows() {
                let z = logits.row(r);
                let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let e: Vec<f64> = z.iter().map(|&x| (x as f64 - m).exp()).collect();
                let s: f64 = e.iter().sum();
                p_target.extend(e.iter().map(|x| x / s));
            }
            Ok(CorpusSequence {
                tokens,
                prompt_len: cfg.prompt_len,
                h_dm: pre.at_dm.states,
                h_sv: pre.at_sv.states,
                p_target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { boundaries: b, d_model: c.d_model, vocab: v, sequences })
}

pub fn encode_corpus(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    let header = [
        CORPUS_VERSION,
        corpus.boundaries.l_dm as u32,
        corpus.boundaries.l_sv as u32,
        corpus.d_model as u32,
        corpus.vocab as u32,
        corpus.sequences.len() as u32,
    ];
    for v in header {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &corpus.sequences {
        out.extend_from_slice(&(s.tokens.len() as u32).to_le_bytes());
        out.extend_from_slice(&(s.prompt_len as u32).to_le_bytes());
        for &t in &s.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for &x in s.h_dm.data().iter().chain(s.h_sv.data()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &p in &s.p_target {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.fail("truncated corpus"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_corpus(bytes: &[u8], path: &Path) -> Result<Corpus> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4)? != CORPUS_MAGIC {
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(r.fail(format!("unsupported corpus version {version}")));
    }
    let l_dm = r.u32()? as usize;
    let l_sv = r.u32()? as usize;
    let d = r.u32()? as usize;
    let v = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut sequences = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let prompt_len = r.u32()? as usize;
        if prompt_len > len {
            return Err(r.fail("prompt longer than sequence"));
        }
        let tokens: Vec<u32> = (0..len).map(|_| r.u32()).collect::<Result<_>>()?;
        let h_dm = Matrix::from_vec(len, d, r.f32s(len * d)?).map_err(|e| r.fail(e.to_string()))?;
        let h_sv = Matrix::from_vec(len, d, r.f32s(len * d)?).map_err(|e| r.fail(e.to_string()))?;
        let p_target = r.f64s(len * v)?;
        sequences.push(CorpusSequence { tokens, prompt_len, h_dm, h_sv, p_target });
    }
    if r.at != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(Corpus { boundaries: Boundaries { l_dm, l_sv }, d_model: d, vocab: v, sequences })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_atomic(path, &encode_corpus(corpus))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_corpus(&bytes, path)
}
