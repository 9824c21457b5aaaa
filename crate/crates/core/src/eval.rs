//! Tag prediction and entity-level scoring.
//!
//! Scores are micro-averaged over exact `(type, start, end)` chunk matches,
//! with 0/0 precision or recall taken as 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Head};
use crate::corpus::{convert_tags, extract_chunks, sample_fewshot, Chunk, Schema, TaggedCorpus, TokenSequence};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::heads::{build_multi_prototypes, build_prototypes, LinearHead, PrototypeSet};
use crate::par::Parallelism;
use crate::training::{run_scheme, sub_seed, TrainConfig};

const SEED_PROTOTYPES: u64 = 5;
const SEED_UNLABELED_POOL: u64 = 6;

/// A model that maps tokens to tags.
#[derive(Clone, Debug)]
pub enum Tagger {
    Linear {
        encoder: EncoderParams,
        head: LinearHead,
        schema: Schema,
    },
    Prototype {
        encoder: EncoderParams,
        prototypes: PrototypeSet,
        schema: Schema,
    },
}

/// Support representations grouped by tag, in the support label set's order.
/// Tags with no token in the support are left out.
pub fn support_reprs(encoder: &EncoderParams, support: &TaggedCorpus) -> Vec<(String, Vec<Vec<f64>>)> {
    let vocab = support.labels().tag_vocabulary();
    let mut groups: Vec<Vec<Vec<f64>>> = vec![Vec::new(); vocab.len()];
    let encoded = Parallelism::default().map(support.sentences(), |s| encoder.encode(s.tokens()));
    for (sentence, reprs) in support.sentences().iter().zip(encoded) {
        for (tag, repr) in sentence.tags().iter().zip(reprs) {
            if let Some(i) = support.labels().tag_index(tag) {
                groups[i].push(repr);
            }
        }
    }
    vocab
        .iter()
        .cloned()
        .zip(groups)
        .filter(|(_, g)| !g.is_empty())
        .collect()
}

impl Tagger {
    /// Linear checkpoints predict directly; prototype checkpoints need a
    /// support corpus to rebuild their prototypes.
    pub fn from_checkpoint(ckpt: &Checkpoint, support: Option<&TaggedCorpus>) -> Result<Self> {
        match &ckpt.head {
            Head::Linear(head) => Ok(Tagger::Linear {
                encoder: ckpt.encoder.clone(),
                head: head.clone(),
                schema: ckpt.schema,
            }),
            Head::Prototype { .. } => {
                let support = support.ok_or_else(|| {
                    Error::Head("a prototype checkpoint needs a support corpus".into())
                })?;
                Self::from_support(&ckpt.encoder, support, None, 0)
            }
        }
    }

    /// Prototypes from `support`: one mean per tag, or `⌈shots/5⌉` k-means
    /// centroids per tag when `shots` is given.
    pub fn from_support(encoder: &EncoderParams, support: &TaggedCorpus, shots: Option<usize>, seed: u64) -> Result<Self> {
        let reprs = support_reprs(encoder, support);
        let prototypes = match shots {
            None => build_prototypes(&reprs)?,
            Some(k) => build_multi_prototypes(&reprs, k, sub_seed(seed, SEED_PROTOTYPES))?,
        };
        Ok(Tagger::Prototype {
            encoder: encoder.clone(),
            prototypes,
            schema: support.schema(),
        })
    }

    pub fn schema(&self) -> Schema {
        match self {
            Tagger::Linear { schema, .. } | Tagger::Prototype { schema, .. } => *schema,
        }
    }

    pub fn tags(&self) -> Vec<String> {
        match self {
            Tagger::Linear { head, .. } => head.tags().to_vec(),
            Tagger::Prototype { prototypes, .. } => prototypes.labels().into_iter().map(String::from).collect(),
        }
    }

    pub fn predict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<String>> {
        match self {
            Tagger::Linear { encoder, head, .. } => encoder
                .encode(tokens)
                .iter()
                .map(|r| Ok(head.tags()[head.forward(r)?.argmax()].clone()))
                .collect(),
            Tagger::Prototype {
                encoder, prototypes, ..
            } => {
                let labels = prototypes.labels();
                encoder
                    .encode(tokens)
                    .iter()
                    .map(|r| {
                        let i = if prototypes.is_single() {
                            prototypes.nearest(r)?
                        } else {
                            prototypes.multi_score(r)?.argmax()
                        };
                        Ok(labels[i].to_string())
                    })
                    .collect()
            }
        }
    }

    pub fn predict_all(&self, sentences: &[TokenSequence], par: Parallelism) -> Result<Vec<Vec<String>>> {
        par.try_map(sentences, |s| self.predict(s.tokens()))
    }
}

pub fn predict_tags<S: AsRef<str>>(tagger: &Tagger, tokens: &[S]) -> Result<Vec<String>> {
    tagger.predict(tokens)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl ChunkCounts {
    fn scores(&self) -> (f64, f64, f64) {
        let p = ratio(self.correct, self.predicted);
        let r = ratio(self.correct, self.gold);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_type: BTreeMap<String, TypeScores>,
    pub counts: ChunkCounts,
}

/// Micro-averaged entity P/R/F1 of `predicted` against the gold corpus.
pub fn entity_f1<S: AsRef<str>>(gold: &TaggedCorpus, predicted: &[Vec<S>], schema: Schema) -> Result<EvalReport> {
    if predicted.len() != gold.len() {
        return Err(Error::Length {
            index: predicted.len().min(gold.len()),
            message: format!("{} predicted sentences for {} gold sentences", predicted.len(), gold.len()),
        });
    }
    let mut totals = ChunkCounts::default();
    let mut by_type: BTreeMap<String, ChunkCounts> = BTreeMap::new();
    for (i, (sentence, pred)) in gold.sentences().iter().zip(predicted).enumerate() {
        if sentence.len() != pred.len() {
            return Err(Error::Length {
                index: i,
                message: format!("{} predicted tags for {} tokens", pred.len(), sentence.len()),
            });
        }
        let gold_chunks: BTreeSet<Chunk> = extract_chunks(sentence.tags(), schema).into_iter().collect();
        let pred_chunks: BTreeSet<Chunk> = extract_chunks(pred, schema).into_iter().collect();
        for c in &gold_chunks {
            by_type.entry(c.entity_type.clone()).or_default().gold += 1;
        }
        for c in &pred_chunks {
            let counts = by_type.entry(c.entity_type.clone()).or_default();
            counts.predicted += 1;
            if gold_chunks.contains(c) {
                counts.correct += 1;
            }
        }
    }
    for c in by_type.values() {
        totals.gold += c.gold;
        totals.predicted += c.predicted;
        totals.correct += c.correct;
    }
    let per_type = by_type
        .into_iter()
        .map(|(ty, c)| {
            let (precision, recall, f1) = c.scores();
            (
                ty,
                TypeScores {
                    precision,
                    recall,
                    f1,
                    support: c.gold,
                },
            )
        })
        .collect();
    let (precision, recall, f1) = totals.scores();
    Ok(EvalReport {
        precision,
        recall,
        f1,
        per_type,
        counts: totals,
    })
}

/// Predicts on `test` and scores under `schema`, converting gold and
/// predicted tags first.
pub fn evaluate(tagger: &Tagger, test: &TaggedCorpus, schema: Schema) -> Result<EvalReport> {
    let known: BTreeSet<String> = tagger
        .tags()
        .iter()
        .filter_map(|t| crate::corpus::Tag::parse(t).and_then(|t| t.entity_type()).map(String::from))
        .collect();
    let unknown: Vec<&str> = test
        .labels()
        .entity_types()
        .iter()
        .filter(|t| !known.contains(*t))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Vocabulary(format!(
            "test entity types not known to the model: {}",
            unknown.join(", ")
        )));
    }
    let predicted = tagger.predict_all(test.sentences(), Parallelism::default())?;
    let predicted: Vec<Vec<String>> = predicted
        .iter()
        .map(|p| convert_tags(p, tagger.schema(), schema))
        .collect();
    let gold = crate::corpus::convert_schema(test, schema)?;
    entity_f1(&gold, &predicted, schema)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean_f1: f64,
    pub std_f1: f64,
    pub runs: Vec<EvalReport>,
}

impl AggregateReport {
    /// Mean and sample (n−1) standard deviation of F1.
    pub fn from_runs(runs: Vec<EvalReport>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Config("at least one run is required".into()));
        }
        let n = runs.len() as f64;
        let mean_f1 = runs.iter().map(|r| r.f1).sum::<f64>() / n;
        let std_f1 = if runs.len() == 1 {
            0.0
        } else {
            (runs.iter().map(|r| (r.f1 - mean_f1).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self {
            mean_f1,
            std_f1,
            runs,
        })
    }
}

impl fmt::Display for AggregateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean_f1, self.std_f1)
    }
}

/// Where the unlabeled text of self-training schemes comes from.
#[derive(Clone, Debug)]
pub enum UnlabeledPool<'a> {
    None,
    Given(&'a [Vec<String>]),
    /// Training sentences not drawn as labeled data, optionally capped at
    /// `ratio` times the labeled sentence count.
    RestOfTrain { ratio: Option<usize> },
}

/// One cell of an experiment grid.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub train: &'a TaggedCorpus,
    pub test: &'a TaggedCorpus,
    /// Few-shot budget per type; `None` uses the whole training corpus.
    pub shots: Option<usize>,
    pub source: Option<&'a TaggedCorpus>,
    pub unlabeled: UnlabeledPool<'a>,
    pub config: TrainConfig,
    pub eval_schema: Schema,
}

/// One full run with `seed`: sample, train, evaluate.
pub fn run_experiment(exp: &Experiment<'_>, seed: u64) -> Result<EvalReport> {
    let labeled = match exp.shots {
        Some(k) => sample_fewshot(exp.train, k, seed)?,
        None => exp.train.clone(),
    };
    let rest: Vec<Vec<String>>;
    let unlabeled: Option<&[Vec<String>]> = match &exp.unlabeled {
        UnlabeledPool::None => None,
        UnlabeledPool::Given(u) => Some(u),
        UnlabeledPool::RestOfTrain { ratio } => {
            let chosen: BTreeSet<&TokenSequence> = labeled.sentences().iter().collect();
            let mut pool: Vec<Vec<String>> = exp
                .train
                .sentences()
                .iter()
                .filter(|s| !chosen.contains(s))
                .map(|s| s.tokens().to_vec())
                .collect();
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, SEED_UNLABELED_POOL)));
            if let Some(r) = ratio {
                pool.truncate(r * labeled.len());
            }
            rest = pool;
            Some(&rest)
        }
    };
    let config = TrainConfig {
        seed,
        ..exp.config.clone()
    };
    let run = run_scheme(&labeled, exp.source, unlabeled, &config)?;
    let tagger = Tagger::from_checkpoint(&run.checkpoint, Some(&labeled))?;
    evaluate(&tagger, exp.test, exp.eval_schema)
}

/// Runs the experiment with seeds `base_seed + i` for `i < n_repeats`.
pub fn repeated_eval(exp: &Experiment<'_>, n_repeats: usize, base_seed: u64) -> Result<AggregateReport> {
    if n_repeats == 0 {
        return Err(Error::Config("n_repeats must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n_repeats as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let runs = Parallelism::default().try_map(&seeds, |&s| run_experiment(exp, s))?;
    AggregateReport::from_runs(runs)
}
