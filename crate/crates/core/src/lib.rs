//! Few-shot named entity recognition over CoNLL corpora.
//!
//! The crate covers the full pipeline: corpus handling ([`corpus`]), a small
//! trainable token encoder ([`encoder`]), linear and prototype heads
//! ([`heads`]), Adam with a warmup/decay schedule ([`optim`]), the training
//! schemes ([`training`]) and entity-level evaluation ([`eval`]).
//!
//! With the default `parallel` feature, per-sentence work inside a batch runs
//! on rayon; results are reduced in input order, so sequential and parallel
//! builds produce identical numbers.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod optim;
pub mod par;
pub mod synth;
pub mod training;

pub use checkpoint::{Checkpoint, Head};
pub use corpus::{Chunk, LabelSet, Schema, TaggedCorpus, TokenSequence};
pub use encoder::{EncoderGrads, EncoderParams, Vocab};
pub use error::{Error, Result};
pub use eval::{AggregateReport, EvalReport, Tagger};
pub use heads::{Distribution, LinearHead, PrototypeSet};
pub use par::Parallelism;
pub use training::{Scheme, TrainConfig};
