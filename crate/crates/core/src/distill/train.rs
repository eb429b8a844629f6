use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backprop::{forward_backward, logits, Dense, Head, Params};
use super::corpus::{Corpus, CorpusSequence};
use super::loss::{loss_gradient, reduced_kl_loss, DistillBatch, LossConfig};
use crate::adapter::{AdapterPair, AdapterWeights};
use crate::error::{invalid, Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Sequences per SGD step.
    pub batch_sequences: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, learning_rate: 1e-2, batch_sequences: 8, seed: 0, loss: LossConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterRole {
    Draft,
    ShallowVerifier,
}

impl AdapterRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterRole::Draft => "draft",
            AdapterRole::ShallowVerifier => "shallow_verifier",
        }
    }

    fn hidden(self, s: &CorpusSequence) -> &crate::tensor::Matrix {
        match self {
            AdapterRole::Draft => &s.h_dm,
            AdapterRole::ShallowVerifier => &s.h_sv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub adapter: AdapterRole,
    /// Batch loss before the step's update.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapters: AdapterPair,
    pub log: Vec<TrainLogRow>,
}

impl TrainOutcome {
    /// CSV with columns `step,adapter,loss`.
    pub fn write_loss_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| invalid(format!("csv write failed: {e}"));
        out.write_record(["step", "adapter", "loss"]).map_err(err)?;
        for r in &self.log {
            out.write_record([r.step.to_string(), r.adapter.as_str().to_string(), format!("{:.9}", r.loss)])
                .map_err(err)?;
        }
        out.flush().map_err(|e| invalid(format!("csv flush failed: {e}")))
    }
}

fn check_corpus(model: &Model, corpus: &Corpus) -> Result<()> {
    let c = model.config();
    if corpus.d_model != c.d_model || corpus.vocab != c.vocab_size {
        return Err(invalid("corpus does not match the model dimensions"));
    }
    Ok(())
}

/// Loss and gradient summed over `seqs`, each sequence weighted by its share
/// of masked positions so the result is the mean over all of them.
fn batch_step(
    p: &Params,
    head: &Head,
    seqs: &[&CorpusSequence],
    role: AdapterRole,
    loss: &LossConfig,
    vocab: usize,
    step: usize,
) -> Result<(f64, Params)> {
    let total: usize = seqs.iter().map(|s| s.mask().len()).sum();
    if total == 0 {
        return Err(invalid("batch has no masked positions"));
    }
    let parts = seqs
        .par_iter()
        .map(|s| {
            let h = Dense::from_matrix(role.hidden(s));
            let mask = s.mask();
            let w = mask.len() as f64 / total as f64;
            forward_backward(p, head, &h, |z| {
                if z.data.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Divergence { step, loss: f64::NAN });
                }
                let b = DistillBatch { vocab, p_target: s.p_target.clone(), logits: z.data.clone(), mask };
                let l = reduced_kl_loss(&b, loss)?;
                let mut dz = loss_gradient(&b, loss)?;
                dz.iter_mut().for_each(|g| *g *= w);
                Ok((l * w, Dense { rows: z.rows, cols: z.cols, data: dz }))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = p.zeros_like();
    let mut l = 0.0;
    for (li, gi) in &parts {
        l += li;
        grad.axpy(1.0, gi);
    }
    Ok((l, grad))
}

/// Plain SGD on both adapters against the frozen target's distributions.
pub fn train_adapters(model: &Model, corpus: &Corpus, init: &AdapterPair, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_corpus(model, corpus)?;
    if corpus.is_empty() && cfg.steps > 0 {
        return Err(invalid("empty corpus"));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_sequences == 0 {
        return Err(invalid("learning rate and batch size must be positive"));
    }
    let head = Head::from_model(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dm = Params::from_weights(&init.dm);
    let mut sv = Params::from_weights(&init.sv);
    let mut log = Vec::with_capacity(2 * cfg.steps);
    let n = corpus.len();
    for step in 0..cfg.steps {
        let picks = sample(&mut rng, n, cfg.batch_sequences.min(n)).into_vec();
        let seqs: Vec<&CorpusSequence> = picks.iter().map(|&i| &corpus.sequences[i]).collect();
        for (role, params) in [(AdapterRole::Draft, &mut dm), (AdapterRole::ShallowVerifier, &mut sv)] {
            let (loss, grad) = batch_step(params, &head, &seqs, role, &cfg.loss, corpus.vocab, step)?;
            let bad_grad = grad.slices().iter().any(|s| s.iter().any(|g| !g.is_finite()));
            if !loss.is_finite() || bad_grad {
                return Err(Error::Divergence { step, loss });
            }
            params.axpy(-cfg.learning_rate, &grad);
            log.push(TrainLogRow { step, adapter: role, loss });
        }
    }
    Ok(TrainOutcome { adapters: AdapterPair { dm: dm.to_weights()?, sv: sv.to_weights()? }, log })
}

/// Mean reduced-KL loss of one adapter over every masked position of `corpus`.
pub fn evaluate_loss(
    model: &Model,
    corpus: &Corpus,
    adapter: &AdapterWeights,
    role: AdapterRole,
    loss: &LossConfig,
) -> Result<f64> {
    check_corpus(model, corpus)?;
    let head = Head::from_model(model);
    let p = Params::from_weights(adapter);
    let per_seq = corpus
        .sequences
        .par_iter()
        .map(|s| {
            let z = logits(&p, &head, &Dense::from_matrix(role.hidden(s)));
            let mask = s.mask();
            let m = mask.len();
            let b = DistillBatch { vocab: corpus.vocab, p_target: s.p_target.clone(), logits: z.data, mask };
            Ok((reduced_kl_loss(&b, loss)? * m as f64, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sum, count) = per_seq.iter().fold((0.0, 0usize), |(a, c), &(l, m)| (a + l, c + m));
    if count == 0 {
        return Err(invalid("no masked positions to evaluate"));
    }
    Ok(sum / count as f64)
}
