//! District guided tokens for dialect-conditioned text-to-IPA transcription.
//!
//! A from-scratch byte-level encoder-decoder transformer with its own
//! reverse-mode autodiff, training loop, decoding, word error rate metrics,
//! corpus statistics and a synthetic dialect corpus generator.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use autodiff::{Graph, Var};
pub use checkpoint::Checkpoint;
pub use corpus::{compute_stats, load_corpus, CorpusStats, Example};
pub use decoding::{batch_decode, greedy_decode, DecodeConfig, Strategy};
pub use error::{CheckpointError, Error, Result};
pub use metrics::{cer, corpus_wer, wer, WerBreakdown};
pub use model::{ModelConfig, TranscriptionModel};
pub use optim::{AdamW, AdamWConfig};
pub use synth::{generate_synthetic_corpus, RuleSet, SyntheticConfig};
pub use tensor::{Scalar, Tensor};
pub use tokenizer::{Vocabulary, EOS_ID, PAD_ID};
pub use training::{split_train_val, train, EpochRecord, TrainConfig, Trainer};
