//! Adapter distillation: reduced KL loss, exact gradients and a toy
//! self-distillation trainer.

mod backprop;
pub mod corpus;
pub mod loss;
pub mod train;

pub use corpus::{generate_corpus, read_corpus, write_corpus, Corpus, CorpusConfig, CorpusSequence};
pub use loss::{loss_gradient, reduced_kl_loss, renormalize, top_k_support, DistillBatch, LossConfig, LossMode};
pub use train::{evaluate_loss, train_adapters, AdapterRole, TrainConfig, TrainLogRow, TrainOutcome};
