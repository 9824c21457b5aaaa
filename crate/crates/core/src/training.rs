//! Training schemes: linear-head fine-tuning, episodic prototype training,
//! transfer from a (noisy) source corpus, and one round of soft-label
//! self-training.
//!
//! Every trainer is a pure function of its data, configuration and seed.
//! Per-sentence gradients may be computed in parallel but are always summed in
//! sentence order, so runs are bitwise reproducible.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Head};
use crate::corpus::{LabelSet, Tag, TaggedCorpus, TokenSequence, OUTSIDE};
use crate::encoder::{init_encoder, EncoderGrads, EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::heads::{build_prototypes, Distribution, LinearHead};
use crate::optim::{adam_step, Block, OptimizerState};
use crate::par::Parallelism;

const SEED_ENCODER: u64 = 0;
const SEED_HEAD: u64 = 1;
const SEED_SHUFFLE: u64 = 2;
const SEED_UNLABELED: u64 = 3;
const SEED_EPISODES: u64 = 4;
const SEED_TRANSFER_STAGE: u64 = 100;

/// Derives a stage/purpose seed from the run seed by a fixed offset.
pub fn sub_seed(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[default]
    #[serde(rename = "lc")]
    Lc,
    #[serde(rename = "proto")]
    Proto,
    #[serde(rename = "lc+nsp")]
    LcNsp,
    #[serde(rename = "proto+nsp")]
    ProtoNsp,
    #[serde(rename = "lc+st")]
    LcSt,
    #[serde(rename = "lc+nsp+st")]
    LcNspSt,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Lc,
        Scheme::Proto,
        Scheme::LcNsp,
        Scheme::ProtoNsp,
        Scheme::LcSt,
        Scheme::LcNspSt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Lc => "lc",
            Scheme::Proto => "proto",
            Scheme::LcNsp => "lc+nsp",
            Scheme::ProtoNsp => "proto+nsp",
            Scheme::LcSt => "lc+st",
            Scheme::LcNspSt => "lc+nsp+st",
        }
    }

    pub fn uses_prototypes(self) -> bool {
        matches!(self, Scheme::Proto | Scheme::ProtoNsp)
    }

    pub fn needs_source(self) -> bool {
        matches!(self, Scheme::LcNsp | Scheme::ProtoNsp | Scheme::LcNspSt)
    }

    pub fn needs_unlabeled(self) -> bool {
        matches!(self, Scheme::LcSt | Scheme::LcNspSt)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|scheme| scheme.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

fn default_batch_size() -> usize {
    16
}
fn default_learning_rate() -> f64 {
    5e-5
}
fn default_epochs() -> usize {
    10
}
fn default_warmup() -> f64 {
    0.1
}
fn default_episode_types() -> usize {
    5
}
fn default_support() -> usize {
    5
}
fn default_query() -> usize {
    15
}
fn default_lambda_u() -> f64 {
    0.5
}
fn default_embed_dim() -> usize {
    32
}
fn default_hidden_dim() -> usize {
    64
}

/// Training hyperparameters. Every field except `seed` has a default; the
/// defaults are the full-data (10%/100%) setting, see [`TrainConfig::five_shot`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    /// Entity types per episode (M).
    #[serde(default = "default_episode_types", alias = "m")]
    pub episode_types: usize,
    /// Support sentences per type (K).
    #[serde(default = "default_support", alias = "k")]
    pub support_per_type: usize,
    /// Query sentences per type (K').
    #[serde(default = "default_query", alias = "k_prime")]
    pub query_per_type: usize,
    #[serde(default = "default_lambda_u")]
    pub lambda_u: f64,
    #[serde(default)]
    pub freeze_encoder: bool,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    pub seed: u64,
    /// Overrides for the source (pre-training) stage of transfer schemes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_epochs: Option<usize>,
}

impl TrainConfig {
    /// Full-data defaults: batch 16, lr 5e-5, (K, K') = (5, 15).
    pub fn full_data(seed: u64) -> Self {
        Self {
            scheme: Scheme::Lc,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            warmup_fraction: default_warmup(),
            episode_types: default_episode_types(),
            support_per_type: default_support(),
            query_per_type: default_query(),
            lambda_u: default_lambda_u(),
            freeze_encoder: false,
            embed_dim: default_embed_dim(),
            hidden_dim: default_hidden_dim(),
            seed,
            source_batch_size: None,
            source_learning_rate: None,
            source_epochs: None,
        }
    }

    /// 5-shot defaults: batch 4, lr 1e-4, (K, K') = (2, 3).
    pub fn five_shot(seed: u64) -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-4,
            support_per_type: 2,
            query_per_type: 3,
            ..Self::full_data(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("episode_types", self.episode_types),
            ("support_per_type", self.support_per_type),
            ("query_per_type", self.query_per_type),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.source_batch_size == Some(0) {
            return Err(Error::Config("source_batch_size must be positive".into()));
        }
        if !(self.lambda_u.is_finite() && self.lambda_u >= 0.0) {
            return Err(Error::Config("lambda_u must be a nonnegative number".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        for lr in std::iter::once(self.learning_rate).chain(self.source_learning_rate) {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config("learning rates must be nonnegative numbers".into()));
            }
        }
        Ok(())
    }

    /// Parses JSON or TOML, chosen by the first non-blank character.
    pub fn parse(text: &str) -> Result<Self> {
        let config: TrainConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    /// The configuration used for the source stage of transfer schemes.
    pub fn source_stage(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.source_batch_size.unwrap_or(self.batch_size),
            learning_rate: self.source_learning_rate.unwrap_or(self.learning_rate),
            epochs: self.source_epochs.unwrap_or(self.epochs),
            ..self.clone()
        }
    }

    fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

/// A sampled episode: support and query sentences over `sampled_types`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<TokenSequence>,
    pub query: Vec<TokenSequence>,
    pub sampled_types: Vec<String>,
    /// Corpus indices of the support and query sentences.
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

/// Unlabeled sentences paired with a teacher distribution per token.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelDataset {
    pub tags: Vec<String>,
    pub items: Vec<(Vec<String>, Vec<Distribution>)>,
}

impl SoftLabelDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    /// Linear trainers: mean per-token loss on the training corpus before
    /// training (index 0) and after each epoch. Prototype training: mean
    /// episode loss during each epoch.
    pub losses: Vec<f64>,
    pub steps: u64,
}

/// Draws `m` types uniformly without replacement, then `k` support and
/// `k_query` query sentences per type. A sentence already drawn counts toward
/// every type it contains; support and query never share a sentence.
pub fn sample_episode(
    corpus: &TaggedCorpus,
    m: usize,
    k: usize,
    k_query: usize,
    seed: u64,
) -> Result<Episode> {
    let types = corpus.labels().entity_types();
    if m == 0 || m > types.len() {
        return Err(Error::Config(format!(
            "episode needs {m} entity types, corpus has {}",
            types.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled: Vec<String> = types.to_vec();
    sampled.shuffle(&mut rng);
    sampled.truncate(m);

    let mut used = vec![false; corpus.len()];
    let mut support_indices = Vec::new();
    let mut query_indices = Vec::new();
    let sentences = corpus.sentences();
    for ty in &sampled {
        let contains = |i: &usize| sentences[*i].contains_type(ty);
        let have_s = support_indices.iter().filter(|i| contains(i)).count();
        let have_q = query_indices.iter().filter(|i| contains(i)).count();
        let need_s = k.saturating_sub(have_s);
        let need_q = k_query.saturating_sub(have_q);
        let mut candidates: Vec<usize> = (0..corpus.len())
            .filter(|&i| !used[i] && sentences[i].contains_type(ty))
            .collect();
        if candidates.len() < need_s + need_q {
            return Err(Error::InsufficientData {
                entity_type: ty.clone(),
                message: format!(
                    "{} unused sentences, episode needs {}",
                    candidates.len(),
                    need_s + need_q
                ),
            });
        }
        candidates.shuffle(&mut rng);
        for (n, &i) in candidates.iter().take(need_s + need_q).enumerate() {
            used[i] = true;
            if n < need_s {
                support_indices.push(i);
            } else {
                query_indices.push(i);
            }
        }
    }
    Ok(Episode {
        support: support_indices.iter().map(|&i| sentences[i].clone()).collect(),
        query: query_indices.iter().map(|&i| sentences[i].clone()).collect(),
        sampled_types: sampled,
        support_indices,
        query_indices,
    })
}

/// Vocabulary over the tokens of any number of sentence sources.
pub fn build_vocab<'a, I>(sentences: I) -> Vocab
where
    I: IntoIterator<Item = &'a [String]>,
{
    Vocab::new(sentences.into_iter().flatten())
}

fn corpus_tokens(corpus: &TaggedCorpus) -> impl Iterator<Item = &[String]> {
    corpus.sentences().iter().map(TokenSequence::tokens)
}

/// A freshly initialised linear model for `labels` over `vocab`.
pub fn fresh_checkpoint(vocab: Vocab, labels: &LabelSet, config: &TrainConfig) -> Result<Checkpoint> {
    let encoder = init_encoder(
        vocab,
        config.embed_dim,
        config.hidden_dim,
        sub_seed(config.seed, SEED_ENCODER),
    )?;
    let head = fresh_head(labels, encoder.hidden_dim(), config)?;
    Ok(Checkpoint {
        schema: labels.schema(),
        encoder,
        head: Head::Linear(head),
    })
}

fn fresh_head(labels: &LabelSet, hidden_dim: usize, config: &TrainConfig) -> Result<LinearHead> {
    LinearHead::init(
        labels.tag_vocabulary().to_vec(),
        hidden_dim,
        sub_seed(config.seed, SEED_HEAD),
    )
}

/// Per-sentence gradient contributions, summed (not averaged).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub tokens: usize,
    pub head_weights: Vec<f64>,
    pub head_bias: Vec<f64>,
    pub encoder: EncoderGrads,
}

impl BatchGradient {
    fn add_scaled(&mut self, other: &BatchGradient, scale: f64) {
        self.loss += scale * other.loss;
        self.tokens += other.tokens;
        add_scaled(&mut self.head_weights, &other.head_weights, scale);
        add_scaled(&mut self.head_bias, &other.head_bias, scale);
        self.encoder.add_scaled(&other.encoder, scale);
    }
}

fn add_scaled(dst: &mut Vec<f64>, src: &[f64], scale: f64) {
    if dst.is_empty() {
        dst.resize(src.len(), 0.0);
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

enum Targets<'a> {
    Hard(&'a [usize]),
    Soft(&'a [Distribution]),
}

fn sentence_gradient(
    encoder: &EncoderParams,
    head: &LinearHead,
    tokens: &[String],
    targets: Targets<'_>,
    freeze_encoder: bool,
) -> Result<BatchGradient> {
    let cache = encoder.forward(tokens);
    let n_tags = head.tags().len();
    let mut grad = BatchGradient {
        tokens: tokens.len(),
        head_weights: vec![0.0; head.weights().len()],
        head_bias: vec![0.0; n_tags],
        ..Default::default()
    };
    let mut upstream = Vec::with_capacity(tokens.len());
    for (i, repr) in cache.reprs().iter().enumerate() {
        let target = match &targets {
            Targets::Hard(ids) => Distribution::one_hot(n_tags, ids[i]),
            Targets::Soft(dists) => dists[i].clone(),
        };
        let back = head.backward(repr, &target)?;
        grad.loss += back.loss;
        add_scaled(&mut grad.head_weights, &back.weights, 1.0);
        add_scaled(&mut grad.head_bias, &back.bias, 1.0);
        upstream.push(back.upstream);
    }
    if !freeze_encoder {
        grad.encoder = encoder.backward(&cache, &upstream)?;
    }
    Ok(grad)
}

fn tag_ids(head: &LinearHead, sentence: &TokenSequence) -> Result<Vec<usize>> {
    sentence
        .tags()
        .iter()
        .map(|t| {
            head.tags().iter().position(|h| h == t).ok_or_else(|| {
                Error::Vocabulary(format!("tag `{t}` is not in the model's tag vocabulary"))
            })
        })
        .collect()
}

/// Summed loss and gradients of a labeled batch under the linear head.
pub fn batch_gradient(
    encoder: &EncoderParams,
    head: &LinearHead,
    batch: &[TokenSequence],
    freeze_encoder: bool,
    par: Parallelism,
) -> Result<BatchGradient> {
    let parts = par.try_map(batch, |s| {
        let ids = tag_ids(head, s)?;
        sentence_gradient(encoder, head, s.tokens(), Targets::Hard(&ids), freeze_encoder)
    })?;
    Ok(sum_in_order(&parts))
}

fn soft_batch_gradient(
    encoder: &EncoderParams,
    head: &LinearHead,
    batch: &[&(Vec<String>, Vec<Distribution>)],
    freeze_encoder: bool,
    par: Parallelism,
) -> Result<BatchGradient> {
    let parts = par.try_map(batch, |(tokens, dists)| {
        sentence_gradient(encoder, head, tokens, Targets::Soft(dists), freeze_encoder)
    })?;
    Ok(sum_in_order(&parts))
}

fn sum_in_order(parts: &[BatchGradient]) -> BatchGradient {
    let mut total = BatchGradient::default();
    for p in parts {
        total.add_scaled(p, 1.0);
    }
    total
}

/// Mean per-token loss of the linear model over a corpus.
pub fn mean_token_loss(encoder: &EncoderParams, head: &LinearHead, corpus: &TaggedCorpus) -> Result<f64> {
    let parts = Parallelism::default().try_map(corpus.sentences(), |s| -> Result<(f64, usize)> {
        let ids = tag_ids(head, s)?;
        let mut loss = 0.0;
        for (repr, &id) in encoder.encode(s.tokens()).iter().zip(&ids) {
            loss += head.backward(repr, &Distribution::one_hot(head.tags().len(), id))?.loss;
        }
        Ok((loss, s.len()))
    })?;
    let (loss, tokens) = parts
        .iter()
        .fold((0.0, 0usize), |(l, n), (pl, pn)| (l + pl, n + pn));
    Ok(if tokens == 0 { 0.0 } else { loss / tokens as f64 })
}

fn apply_update(
    encoder: &mut EncoderParams,
    head: Option<&mut LinearHead>,
    grad: &BatchGradient,
    update_encoder: bool,
    optimizer: &mut OptimizerState,
) -> Result<()> {
    let encoder_dense = update_encoder.then(|| {
        let rows = encoder.vocab().rows();
        let e = encoder.embed_dim();
        let mut cw = grad.encoder.context_weights.clone();
        cw.resize(encoder.context_weights().len(), 0.0);
        let mut cb = grad.encoder.context_bias.clone();
        cb.resize(encoder.hidden_dim(), 0.0);
        [grad.encoder.dense_embedding(rows, e), cw, cb]
    });
    let mut blocks: Vec<Block<'_>> = Vec::with_capacity(5);
    if let Some(dense) = &encoder_dense {
        for ((name, values), g) in encoder.blocks_mut().into_iter().zip(dense) {
            blocks.push(Block {
                name,
                values,
                grad: g,
            });
        }
    }
    if let Some(head) = head {
        for ((name, values), g) in head
            .blocks_mut()
            .into_iter()
            .zip([&grad.head_weights, &grad.head_bias])
        {
            blocks.push(Block {
                name,
                values,
                grad: g,
            });
        }
    }
    adam_step(optimizer, &mut blocks)
}

struct Unlabeled<'a> {
    data: &'a SoftLabelDataset,
    lambda: f64,
}

fn train_linear_from(
    corpus: &TaggedCorpus,
    config: &TrainConfig,
    mut encoder: EncoderParams,
    mut head: LinearHead,
    unlabeled: Option<Unlabeled<'_>>,
) -> Result<TrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if head.hidden_dim() != encoder.hidden_dim() {
        return Err(Error::Dimension("head width differs from encoder width".into()));
    }
    let par = Parallelism::default();
    let freeze = config.freeze_encoder;
    let n = corpus.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch) as u64;
    let mut optimizer = OptimizerState::new(config.learning_rate, config.warmup_fraction, total_steps)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, SEED_SHUFFLE));
    let mut unlabeled_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, SEED_UNLABELED));
    let unlabeled = unlabeled.filter(|u| u.lambda > 0.0 && !u.data.is_empty());

    let mut losses = vec![mean_token_loss(&encoder, &head, corpus)?];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let unlabeled_order = unlabeled.as_ref().map(|u| {
            let mut idx: Vec<usize> = (0..u.data.len()).collect();
            idx.shuffle(&mut unlabeled_rng);
            idx
        });
        for b in 0..batches_per_epoch {
            let batch: Vec<TokenSequence> = order[b * config.batch_size..((b + 1) * config.batch_size).min(n)]
                .iter()
                .map(|&i| corpus.sentences()[i].clone())
                .collect();
            let labeled = batch_gradient(&encoder, &head, &batch, freeze, par)?;
            let mut step = BatchGradient::default();
            step.add_scaled(&labeled, 1.0 / labeled.tokens as f64);

            if let (Some(u), Some(u_order)) = (&unlabeled, &unlabeled_order) {
                let per_batch = u.data.len().div_ceil(batches_per_epoch);
                let lo = (b * per_batch).min(u.data.len());
                let hi = ((b + 1) * per_batch).min(u.data.len());
                let items: Vec<&(Vec<String>, Vec<Distribution>)> =
                    u_order[lo..hi].iter().map(|&i| &u.data.items[i]).collect();
                if !items.is_empty() {
                    let soft = soft_batch_gradient(&encoder, &head, &items, freeze, par)?;
                    step.add_scaled(&soft, u.lambda / soft.tokens as f64);
                }
            }
            apply_update(&mut encoder, Some(&mut head), &step, !freeze, &mut optimizer)?;
        }
        losses.push(mean_token_loss(&encoder, &head, corpus)?);
    }
    Ok(TrainReport {
        checkpoint: Checkpoint {
            schema: corpus.schema(),
            encoder,
            head: Head::Linear(head),
        },
        losses,
        steps: optimizer.step(),
    })
}

/// Splits an optional initial checkpoint into an encoder and a head: the head
/// is reused only when it is linear over exactly the corpus tag vocabulary.
fn resolve_init(corpus: &TaggedCorpus, config: &TrainConfig, init: Option<&Checkpoint>) -> Result<(EncoderParams, LinearHead)> {
    match init {
        None => {
            let fresh = fresh_checkpoint(build_vocab(corpus_tokens(corpus)), corpus.labels(), config)?;
            match fresh.head {
                Head::Linear(h) => Ok((fresh.encoder, h)),
                Head::Prototype { .. } => unreachable!(),
            }
        }
        Some(ckpt) => {
            let head = match &ckpt.head {
                Head::Linear(h) if h.tags() == corpus.labels().tag_vocabulary() => h.clone(),
                _ => fresh_head(corpus.labels(), ckpt.encoder.hidden_dim(), config)?,
            };
            Ok((ckpt.encoder.clone(), head))
        }
    }
}

/// Mini-batch fine-tuning of encoder and linear head with per-token
/// cross-entropy averaged over the tokens of each batch.
pub fn train_linear(corpus: &TaggedCorpus, config: &TrainConfig, init: Option<&Checkpoint>) -> Result<TrainReport> {
    let (encoder, head) = resolve_init(corpus, config, init)?;
    train_linear_from(corpus, config, encoder, head, None)
}

/// Episodic prototype training of the encoder. The returned checkpoint has a
/// prototype head over the corpus tag vocabulary.
pub fn train_prototype(corpus: &TaggedCorpus, config: &TrainConfig, init: Option<&Checkpoint>) -> Result<TrainReport> {
    config.validate()?;
    if config.freeze_encoder {
        return Err(Error::Config(
            "prototype training only updates the encoder; freeze_encoder leaves nothing to train".into(),
        ));
    }
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let n_types = corpus.labels().entity_types().len();
    if n_types == 0 {
        return Err(Error::Config("prototype training needs at least one entity type".into()));
    }
    let mut encoder = match init {
        Some(ckpt) => ckpt.encoder.clone(),
        None => init_encoder(
            build_vocab(corpus_tokens(corpus)),
            config.embed_dim,
            config.hidden_dim,
            sub_seed(config.seed, SEED_ENCODER),
        )?,
    };
    let m = config.episode_types.min(n_types);
    let per_episode = m * (config.support_per_type + config.query_per_type);
    let iterations_per_epoch = corpus.len().div_ceil(per_episode);
    let total = (config.epochs * iterations_per_epoch) as u64;
    let mut optimizer = OptimizerState::new(config.learning_rate, config.warmup_fraction, total)?;
    let episode_seed = sub_seed(config.seed, SEED_EPISODES);

    let mut losses = Vec::with_capacity(config.epochs);
    let mut iteration = 0u64;
    for _ in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..iterations_per_epoch {
            let episode = sample_episode(
                corpus,
                m,
                config.support_per_type,
                config.query_per_type,
                sub_seed(episode_seed, iteration),
            )?;
            let (loss, grads) = episode_gradient(&encoder, corpus.labels(), &episode, Parallelism::default())?;
            epoch_loss += loss;
            let step = BatchGradient {
                encoder: grads,
                ..Default::default()
            };
            apply_update(&mut encoder, None, &step, true, &mut optimizer)?;
            iteration += 1;
        }
        losses.push(epoch_loss / iterations_per_epoch as f64);
    }
    Ok(TrainReport {
        checkpoint: Checkpoint {
            schema: corpus.schema(),
            encoder,
            head: Head::Prototype {
                tags: corpus.labels().tag_vocabulary().to_vec(),
            },
        },
        losses,
        steps: optimizer.step(),
    })
}

/// Tag label of a token within an episode, or `None` if the token belongs to
/// an entity type that was not sampled.
fn episode_label<'a>(tag: &'a str, sampled: &BTreeSet<&str>) -> Option<&'a str> {
    match Tag::parse(tag)?.entity_type() {
        None => Some(OUTSIDE),
        Some(ty) if sampled.contains(ty) => Some(tag),
        Some(_) => None,
    }
}

/// Mean query-token loss of one episode and its encoder gradient.
///
/// Prototypes are built for the tag labels (`O` plus the sampled types' tags)
/// that occur in the support set. Tokens of unsampled types take no part, and
/// query tokens whose label has no prototype are skipped.
pub fn episode_gradient(
    encoder: &EncoderParams,
    labels: &LabelSet,
    episode: &Episode,
    par: Parallelism,
) -> Result<(f64, EncoderGrads)> {
    let sampled: BTreeSet<&str> = episode.sampled_types.iter().map(String::as_str).collect();
    let support_cache = par.map(&episode.support, |s| encoder.forward(s.tokens()));

    // label index in tag-vocabulary order -> (sentence, token) positions
    let vocab = labels.tag_vocabulary();
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); vocab.len()];
    for (si, s) in episode.support.iter().enumerate() {
        for (ti, tag) in s.tags().iter().enumerate() {
            if let Some(label) = episode_label(tag, &sampled) {
                let idx = labels.tag_index(label).ok_or_else(|| {
                    Error::Vocabulary(format!("tag `{label}` is not in the label set"))
                })?;
                members[idx].push((si, ti));
            }
        }
    }
    let present: Vec<usize> = (0..vocab.len()).filter(|&i| !members[i].is_empty()).collect();
    let support_reprs: Vec<(String, Vec<Vec<f64>>)> = present
        .iter()
        .map(|&i| {
            let reprs = members[i]
                .iter()
                .map(|&(si, ti)| support_cache[si].reprs()[ti].clone())
                .collect();
            (vocab[i].clone(), reprs)
        })
        .collect();
    let protos = build_prototypes(&support_reprs)?;
    let position = |label: &str| present.iter().position(|&i| vocab[i] == label);

    struct QueryPart {
        cache: crate::encoder::Encoded,
        loss: f64,
        count: usize,
        upstream: Vec<Vec<f64>>,
        centroid_grads: Vec<Vec<f64>>,
    }
    let dim = encoder.hidden_dim();
    let parts = par.try_map(&episode.query, |s| -> Result<QueryPart> {
        let cache = encoder.forward(s.tokens());
        let mut part = QueryPart {
            loss: 0.0,
            count: 0,
            upstream: vec![vec![0.0; dim]; s.len()],
            centroid_grads: vec![vec![0.0; dim]; present.len()],
            cache,
        };
        for (ti, tag) in s.tags().iter().enumerate() {
            let Some(target) = episode_label(tag, &sampled).and_then(position) else {
                continue;
            };
            let back = protos.backward(&part.cache.reprs()[ti], &Distribution::one_hot(present.len(), target))?;
            part.loss += back.loss;
            part.count += 1;
            part.upstream[ti] = back.query;
            for (acc, g) in part.centroid_grads.iter_mut().zip(&back.centroids) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Ok(part)
    })?;

    let count: usize = parts.iter().map(|p| p.count).sum();
    let mut grads = EncoderGrads::zeros(encoder);
    if count == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / count as f64;
    let loss = parts.iter().map(|p| p.loss).sum::<f64>() * scale;
    let mut centroid_grads = vec![vec![0.0; dim]; present.len()];
    for p in &parts {
        for (acc, g) in centroid_grads.iter_mut().zip(&p.centroid_grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }

    let query_grads = par.try_map(&parts, |p| {
        let upstream: Vec<Vec<f64>> = p
            .upstream
            .iter()
            .map(|u| u.iter().map(|v| v * scale).collect())
            .collect();
        encoder.backward(&p.cache, &upstream)
    })?;

    // Each support token receives its centroid's gradient divided by the
    // number of tokens averaged into that centroid.
    let mut support_upstream: Vec<Vec<Vec<f64>>> = episode
        .support
        .iter()
        .map(|s| vec![vec![0.0; dim]; s.len()])
        .collect();
    for (slot, &label) in present.iter().enumerate() {
        let share = scale / members[label].len() as f64;
        for &(si, ti) in &members[label] {
            support_upstream[si][ti] = centroid_grads[slot].iter().map(|g| g * share).collect();
        }
    }
    let indices: Vec<usize> = (0..episode.support.len()).collect();
    let support_grads = par.try_map(&indices, |&si| encoder.backward(&support_cache[si], &support_upstream[si]))?;

    for g in support_grads.iter().chain(&query_grads) {
        grads.add_scaled(g, 1.0);
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub source: TrainReport,
    pub target: TrainReport,
}

fn train_with_objective(
    corpus: &TaggedCorpus,
    config: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<TrainReport> {
    if config.scheme.uses_prototypes() {
        train_prototype(corpus, config, init)
    } else {
        train_linear(corpus, config, init)
    }
}

/// Source-stage pre-training over an explicit vocabulary.
fn pretrain_source(source: &TaggedCorpus, config: &TrainConfig, vocab: Vocab) -> Result<TrainReport> {
    let stage = config.source_stage();
    let init = fresh_checkpoint(vocab, source.labels(), &stage)?.without_head();
    train_with_objective(source, &stage, Some(&init))
}

/// Two-stage transfer: train on the source label set, keep the encoder,
/// attach a fresh head for the target label set and fine-tune on the target.
/// The vocabulary covers both corpora.
pub fn pretrain_transfer(source: &TaggedCorpus, target: &TaggedCorpus, config: &TrainConfig) -> Result<TransferReport> {
    let vocab = build_vocab(corpus_tokens(source).chain(corpus_tokens(target)));
    let source_report = pretrain_source(source, config, vocab)?;
    let stage2 = config.with_seed(sub_seed(config.seed, SEED_TRANSFER_STAGE));
    let target_report = train_with_objective(target, &stage2, Some(&source_report.checkpoint.without_head()))?;
    Ok(TransferReport {
        source: source_report,
        target: target_report,
    })
}

/// Full per-token teacher distributions over `sentences`.
pub fn generate_soft_labels(teacher: &Checkpoint, sentences: &[Vec<String>]) -> Result<SoftLabelDataset> {
    let Head::Linear(head) = &teacher.head else {
        return Err(Error::Head("soft labels need a linear-head teacher".into()));
    };
    let items = Parallelism::default().try_map(sentences, |tokens| -> Result<(Vec<String>, Vec<Distribution>)> {
        let dists = teacher
            .encoder
            .encode(tokens)
            .iter()
            .map(|r| head.forward(r))
            .collect::<Result<Vec<_>>>()?;
        Ok((tokens.clone(), dists))
    })?;
    Ok(SoftLabelDataset {
        tags: head.tags().to_vec(),
        items: items.into_iter().filter(|(t, _)| !t.is_empty()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfTrainReport {
    pub teacher: TrainReport,
    pub student: TrainReport,
    pub soft_labeled: usize,
}

/// One teacher → student round.
///
/// The teacher is trained on the labeled corpus; it soft-labels the
/// unlabeled sentences; a student starting from the teacher's initial
/// parameters then minimises the labeled loss plus `lambda_u` times the
/// soft-label loss, each averaged over its own tokens. Without an initial
/// checkpoint the vocabulary spans labeled and unlabeled text.
pub fn self_train(
    labeled: &TaggedCorpus,
    unlabeled: &[Vec<String>],
    config: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<SelfTrainReport> {
    config.validate()?;
    let start = match init {
        Some(ckpt) => ckpt.clone(),
        None => {
            let vocab = build_vocab(corpus_tokens(labeled).chain(unlabeled.iter().map(Vec::as_slice)));
            fresh_checkpoint(vocab, labeled.labels(), config)?
        }
    };
    let (encoder, head) = resolve_init(labeled, config, Some(&start))?;
    let teacher = train_linear_from(labeled, config, encoder.clone(), head.clone(), None)?;
    let soft = generate_soft_labels(&teacher.checkpoint, unlabeled)?;
    let student = train_linear_from(
        labeled,
        config,
        encoder,
        head,
        Some(Unlabeled {
            data: &soft,
            lambda: config.lambda_u,
        }),
    )?;
    Ok(SelfTrainReport {
        teacher,
        student,
        soft_labeled: soft.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub steps: u64,
    pub losses: Vec<f64>,
}

impl StageRecord {
    fn new(name: &str, report: &TrainReport) -> Self {
        Self {
            name: name.to_string(),
            steps: report.steps,
            losses: report.losses.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeRun {
    pub checkpoint: Checkpoint,
    pub stages: Vec<StageRecord>,
}

/// Runs `config.scheme` end to end on the given data.
pub fn run_scheme(
    labeled: &TaggedCorpus,
    source: Option<&TaggedCorpus>,
    unlabeled: Option<&[Vec<String>]>,
    config: &TrainConfig,
) -> Result<SchemeRun> {
    config.validate()?;
    let scheme = config.scheme;
    let source = match (scheme.needs_source(), source) {
        (true, None) => return Err(Error::Config(format!("scheme {scheme} needs a source corpus"))),
        (true, Some(s)) => Some(s),
        (false, _) => None,
    };
    let unlabeled = match (scheme.needs_unlabeled(), unlabeled) {
        (true, None) => return Err(Error::Config(format!("scheme {scheme} needs unlabeled text"))),
        (true, Some(u)) => u,
        (false, _) => &[],
    };
    match scheme {
        Scheme::Lc => {
            let r = train_linear(labeled, config, None)?;
            Ok(SchemeRun {
                stages: vec![StageRecord::new("lc", &r)],
                checkpoint: r.checkpoint,
            })
        }
        Scheme::Proto => {
            let r = train_prototype(labeled, config, None)?;
            Ok(SchemeRun {
                stages: vec![StageRecord::new("proto", &r)],
                checkpoint: r.checkpoint,
            })
        }
        Scheme::LcNsp | Scheme::ProtoNsp => {
            let r = pretrain_transfer(source.unwrap(), labeled, config)?;
            Ok(SchemeRun {
                stages: vec![
                    StageRecord::new("nsp-source", &r.source),
                    StageRecord::new("nsp-target", &r.target),
                ],
                checkpoint: r.target.checkpoint,
            })
        }
        Scheme::LcSt => {
            let r = self_train(labeled, unlabeled, config, None)?;
            Ok(SchemeRun {
                stages: vec![StageRecord::new("st-teacher", &r.teacher), StageRecord::new("st-student", &r.student)],
                checkpoint: r.student.checkpoint,
            })
        }
        Scheme::LcNspSt => {
            let source = source.unwrap();
            let vocab = build_vocab(
                corpus_tokens(source)
                    .chain(corpus_tokens(labeled))
                    .chain(unlabeled.iter().map(Vec::as_slice)),
            );
            let pre = pretrain_source(source, config, vocab)?;
            let stage2 = config.with_seed(sub_seed(config.seed, SEED_TRANSFER_STAGE));
            let st = self_train(labeled, unlabeled, &stage2, Some(&pre.checkpoint.without_head()))?;
            Ok(SchemeRun {
                stages: vec![
                    StageRecord::new("nsp-source", &pre),
                    StageRecord::new("st-teacher", &st.teacher),
                    StageRecord::new("st-student", &st.student),
                ],
                checkpoint: st.student.checkpoint,
            })
        }
    }
}
