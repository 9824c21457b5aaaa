//! Token encoder: embedding lookup, a three-token window and a tanh projection.
//!
//! For token `i` the representation is
//! `tanh(W · [e(i-1); e(i); e(i+1)] + b)` where out-of-range neighbours use the
//! `<PAD>` row and unknown words the `<UNK>` row. Both reserved rows are
//! trainable like any other.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const RESERVED: usize = 2;

const WINDOW: usize = 3;
const INIT_RANGE: f64 = 0.1;

/// Case-sensitive word vocabulary. Row 0 is `<PAD>`, row 1 is `<UNK>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Words keep first-occurrence order; duplicates and reserved names are dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            vocab.insert(w.as_ref());
        }
        vocab
    }

    fn insert(&mut self, word: &str) {
        if word == PAD || word == UNK || self.index.contains_key(word) {
            return;
        }
        self.index
            .insert(word.to_string(), self.words.len() + RESERVED);
        self.words.push(word.to_string());
    }

    /// Ordinary words, excluding the reserved entries.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Number of embedding rows, reserved entries included.
    pub fn rows(&self) -> usize {
        self.words.len() + RESERVED
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub(crate) vocab: Vocab,
    pub(crate) embed_dim: usize,
    pub(crate) hidden_dim: usize,
    /// `rows × E`, row-major.
    pub(crate) embedding: Vec<f64>,
    /// `H × 3E`, row-major.
    pub(crate) context_weights: Vec<f64>,
    pub(crate) context_bias: Vec<f64>,
}

/// Gradient of a scalar with respect to [`EncoderParams`].
///
/// Embedding rows are stored sparsely: rows that no token touched are absent
/// and implicitly zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderGrads {
    pub embedding: BTreeMap<usize, Vec<f64>>,
    pub context_weights: Vec<f64>,
    pub context_bias: Vec<f64>,
}

/// Forward cache for one sentence.
#[derive(Clone, Debug)]
pub struct Encoded {
    ids: Vec<usize>,
    reprs: Vec<Vec<f64>>,
}

impl Encoded {
    pub fn reprs(&self) -> &[Vec<f64>] {
        &self.reprs
    }

    pub fn into_reprs(self) -> Vec<Vec<f64>> {
        self.reprs
    }

    pub fn len(&self) -> usize {
        self.reprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reprs.is_empty()
    }
}

pub fn init_encoder(vocab: Vocab, embed_dim: usize, hidden_dim: usize, seed: u64) -> Result<EncoderParams> {
    if vocab.words().is_empty() {
        return Err(Error::Config("empty vocabulary".into()));
    }
    if embed_dim == 0 || hidden_dim == 0 {
        return Err(Error::Config("encoder dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect()
    };
    // Embedding rows last: vocabularies sharing a prefix share its rows.
    let context_weights = uniform(hidden_dim * WINDOW * embed_dim);
    let embedding = uniform(vocab.rows() * embed_dim);
    Ok(EncoderParams {
        vocab,
        embed_dim,
        hidden_dim,
        embedding,
        context_weights,
        context_bias: vec![0.0; hidden_dim],
    })
}

impl EncoderParams {
    /// Assembles parameters from raw arrays, checking shapes and finiteness.
    pub fn from_parts(
        vocab: Vocab,
        embed_dim: usize,
        hidden_dim: usize,
        embedding: Vec<f64>,
        context_weights: Vec<f64>,
        context_bias: Vec<f64>,
    ) -> Result<Self> {
        if embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let expect = [
            ("embedding", embedding.len(), vocab.rows() * embed_dim),
            ("context_weights", context_weights.len(), hidden_dim * WINDOW * embed_dim),
            ("context_bias", context_bias.len(), hidden_dim),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Dimension(format!("{name}: expected {want} values, got {got}")));
            }
        }
        if embedding
            .iter()
            .chain(&context_weights)
            .chain(&context_bias)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Checkpoint("non-finite encoder parameter".into()));
        }
        Ok(Self {
            vocab,
            embed_dim,
            hidden_dim,
            embedding,
            context_weights,
            context_bias,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn context_weights(&self) -> &[f64] {
        &self.context_weights
    }

    pub fn context_bias(&self) -> &[f64] {
        &self.context_bias
    }

    /// Parameter blocks in a fixed order: embedding, context weights, context bias.
    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 3] {
        [
            ("encoder.embedding", &mut self.embedding),
            ("encoder.context_weights", &mut self.context_weights),
            ("encoder.context_bias", &mut self.context_bias),
        ]
    }

    fn row(&self, id: usize) -> &[f64] {
        &self.embedding[id * self.embed_dim..(id + 1) * self.embed_dim]
    }

    fn window_ids(ids: &[usize], i: usize) -> [usize; WINDOW] {
        let prev = if i == 0 { PAD_ID } else { ids[i - 1] };
        let next = ids.get(i + 1).copied().unwrap_or(PAD_ID);
        [prev, ids[i], next]
    }

    pub fn token_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocab.id(t.as_ref())).collect()
    }

    pub fn forward<S: AsRef<str>>(&self, tokens: &[S]) -> Encoded {
        let ids = self.token_ids(tokens);
        let (e, h) = (self.embed_dim, self.hidden_dim);
        let reprs = (0..ids.len())
            .map(|i| {
                let window = Self::window_ids(&ids, i);
                let mut out = self.context_bias.clone();
                for (j, o) in out.iter_mut().enumerate() {
                    let w_row = &self.context_weights[j * WINDOW * e..(j + 1) * WINDOW * e];
                    for (slot, &id) in window.iter().enumerate() {
                        let emb = self.row(id);
                        let w = &w_row[slot * e..(slot + 1) * e];
                        *o += w.iter().zip(emb).map(|(a, b)| a * b).sum::<f64>();
                    }
                    *o = o.tanh();
                }
                debug_assert_eq!(out.len(), h);
                out
            })
            .collect();
        Encoded { ids, reprs }
    }

    /// One representation per token.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<Vec<f64>> {
        self.forward(tokens).reprs
    }

    /// Gradient of `Σ_i upstream_i · repr_i`.
    pub fn encode_backward<S: AsRef<str>>(&self, tokens: &[S], upstream: &[Vec<f64>]) -> Result<EncoderGrads> {
        let cache = self.forward(tokens);
        self.backward(&cache, upstream)
    }

    /// Same as [`encode_backward`](Self::encode_backward) but reuses a forward cache.
    pub fn backward(&self, cache: &Encoded, upstream: &[Vec<f64>]) -> Result<EncoderGrads> {
        if upstream.len() != cache.ids.len() {
            return Err(Error::Dimension(format!(
                "upstream has {} vectors for {} tokens",
                upstream.len(),
                cache.ids.len()
            )));
        }
        let (e, h) = (self.embed_dim, self.hidden_dim);
        let mut grads = EncoderGrads {
            embedding: BTreeMap::new(),
            context_weights: vec![0.0; self.context_weights.len()],
            context_bias: vec![0.0; h],
        };
        let mut dx = vec![0.0; WINDOW * e];
        for (i, (repr, up)) in cache.reprs.iter().zip(upstream).enumerate() {
            if up.len() != h {
                return Err(Error::Dimension(format!(
                    "upstream vector {i} has length {}, expected {h}",
                    up.len()
                )));
            }
            let window = Self::window_ids(&cache.ids, i);
            dx.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..h {
                let delta = up[j] * (1.0 - repr[j] * repr[j]);
                if delta == 0.0 {
                    continue;
                }
                grads.context_bias[j] += delta;
                let w_row = &self.context_weights[j * WINDOW * e..(j + 1) * WINDOW * e];
                let g_row = &mut grads.context_weights[j * WINDOW * e..(j + 1) * WINDOW * e];
                for (slot, &id) in window.iter().enumerate() {
                    let emb = self.row(id);
                    for k in 0..e {
                        g_row[slot * e + k] += delta * emb[k];
                        dx[slot * e + k] += delta * w_row[slot * e + k];
                    }
                }
            }
            for (slot, &id) in window.iter().enumerate() {
                let row = grads.embedding.entry(id).or_insert_with(|| vec![0.0; e]);
                for k in 0..e {
                    row[k] += dx[slot * e + k];
                }
            }
        }
        Ok(grads)
    }
}

impl EncoderGrads {
    pub fn zeros(params: &EncoderParams) -> Self {
        Self {
            embedding: BTreeMap::new(),
            context_weights: vec![0.0; params.context_weights.len()],
            context_bias: vec![0.0; params.hidden_dim],
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &EncoderGrads, scale: f64) {
        for (&id, row) in &other.embedding {
            let dst = self
                .embedding
                .entry(id)
                .or_insert_with(|| vec![0.0; row.len()]);
            for (d, s) in dst.iter_mut().zip(row) {
                *d += scale * s;
            }
        }
        if self.context_weights.is_empty() {
            self.context_weights = vec![0.0; other.context_weights.len()];
            self.context_bias = vec![0.0; other.context_bias.len()];
        }
        for (d, s) in self.context_weights.iter_mut().zip(&other.context_weights) {
            *d += scale * s;
        }
        for (d, s) in self.context_bias.iter_mut().zip(&other.context_bias) {
            *d += scale * s;
        }
    }

    /// Dense embedding gradient for a table with `rows` rows of width `embed_dim`.
    pub fn dense_embedding(&self, rows: usize, embed_dim: usize) -> Vec<f64> {
        let mut dense = vec![0.0; rows * embed_dim];
        for (&id, row) in &self.embedding {
            dense[id * embed_dim..(id + 1) * embed_dim].copy_from_slice(row);
        }
        dense
    }

    pub fn is_zero(&self) -> bool {
        self.embedding.values().flatten().all(|&v| v == 0.0)
            && self.context_weights.iter().all(|&v| v == 0.0)
            && self.context_bias.iter().all(|&v| v == 0.0)
    }
}
