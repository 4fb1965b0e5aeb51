//! Language-model training on ASR-error-augmented text, confusion
//! harvesting, perplexity variants and n-best rescoring.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod neural;
pub mod ngram;
pub mod noise;
pub mod rescore;
pub mod rng;
pub mod scorer;
pub mod synth;

pub use align::{align, wer, AlignmentScript, ConfusionCounts, ConfusionTable, EditOp, Sym, WerReport};
pub use corpus::{Corpus, Sentence, Session, Vocabulary, WordId, BOS, EOS, UNK};
pub use error::{Error, Result};
pub use neural::{LstmConfig, LstmLm, TrainSchedule};
pub use ngram::{train_kn, KnOptions, NgramLm};
pub use noise::{Channel, ChannelConfig, CorruptedPair, EditAction, TargetMode};
pub use rescore::{NBestEntry, NBestList, RescoreConfig};
pub use scorer::{LmScorer, UniformScorer};
