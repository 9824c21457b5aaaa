//! Versioned JSON checkpoints.
//!
//! A checkpoint holds the encoder (dimensions, vocabulary, every parameter
//! array in row-major order) and a head descriptor. Linear heads carry their
//! weights; prototype heads only record the tag ordering because prototypes
//! are rebuilt from a support set at inference time. Floats are written in
//! shortest round-trip form, so save/load is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Schema;
use crate::encoder::{EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::heads::LinearHead;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Linear(LinearHead),
    Prototype { tags: Vec<String> },
}

impl Head {
    pub fn kind(&self) -> &'static str {
        match self {
            Head::Linear(_) => "linear",
            Head::Prototype { .. } => "prototype",
        }
    }

    pub fn tags(&self) -> &[String] {
        match self {
            Head::Linear(h) => h.tags(),
            Head::Prototype { tags } => tags,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schema: Schema,
    pub encoder: EncoderParams,
    pub head: Head,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format_version: u32,
    schema: Schema,
    embed_dim: usize,
    hidden_dim: usize,
    vocab: Vec<String>,
    embedding: Vec<f64>,
    context_weights: Vec<f64>,
    context_bias: Vec<f64>,
    head: HeadDocument,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum HeadDocument {
    Linear {
        tags: Vec<String>,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Prototype {
        tags: Vec<String>,
    },
}

impl Checkpoint {
    pub fn tags(&self) -> &[String] {
        self.head.tags()
    }

    /// Keeps the encoder and drops trained head weights.
    pub fn without_head(&self) -> Checkpoint {
        Checkpoint {
            schema: self.schema,
            encoder: self.encoder.clone(),
            head: Head::Prototype {
                tags: self.tags().to_vec(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let enc = &self.encoder;
        let head = match &self.head {
            Head::Linear(h) => HeadDocument::Linear {
                tags: h.tags().to_vec(),
                weights: h.weights().to_vec(),
                bias: h.bias().to_vec(),
            },
            Head::Prototype { tags } => HeadDocument::Prototype { tags: tags.clone() },
        };
        let doc = Document {
            format_version: FORMAT_VERSION,
            schema: self.schema,
            embed_dim: enc.embed_dim(),
            hidden_dim: enc.hidden_dim(),
            vocab: enc.vocab().words().to_vec(),
            embedding: enc.embedding().to_vec(),
            context_weights: enc.context_weights().to_vec(),
            context_bias: enc.context_bias().to_vec(),
            head,
        };
        serde_json::to_string(&doc).expect("checkpoint parameters are finite")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let vocab = Vocab::new(&doc.vocab);
        if vocab.words().len() != doc.vocab.len() {
            return Err(Error::Checkpoint("vocabulary contains duplicates".into()));
        }
        let encoder = EncoderParams::from_parts(
            vocab,
            doc.embed_dim,
            doc.hidden_dim,
            doc.embedding,
            doc.context_weights,
            doc.context_bias,
        )?;
        let head = match doc.head {
            HeadDocument::Linear {
                tags,
                weights,
                bias,
            } => Head::Linear(LinearHead::from_parts(tags, doc.hidden_dim, weights, bias)?),
            HeadDocument::Prototype { tags } => Head::Prototype { tags },
        };
        Ok(Checkpoint {
            schema: doc.schema,
            encoder,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("not a file path")))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
