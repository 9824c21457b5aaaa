//! Tagged corpora in CoNLL column format.
//!
//! A corpus is a flat stream of sentences, one token per line with the tag in
//! the last whitespace-separated column. Entity types are inferred from the
//! tags that occur and sorted lexicographically, so the tag vocabulary of a
//! corpus is a pure function of its contents.
//!
//! Chunking follows the conlleval convention: under BIO an `I-X` that does not
//! continue an `X` chunk opens a new one, which makes every tag sequence
//! chunkable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    #[default]
    Bio,
    Io,
}

impl Schema {
    fn allows_prefix(self, prefix: &str) -> bool {
        match self {
            Schema::Bio => prefix == "B" || prefix == "I",
            Schema::Io => prefix == "I",
        }
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bio" | "iob2" => Ok(Schema::Bio),
            "io" => Ok(Schema::Io),
            _ => Err(Error::UnknownSchema(s.to_string())),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schema::Bio => f.write_str("bio"),
            Schema::Io => f.write_str("io"),
        }
    }
}

/// A tag split into its prefix and entity type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Tag<'a> {
    /// Parses `O`, `B-X` or `I-X`. Anything else yields `None`.
    pub fn parse(tag: &'a str) -> Option<Self> {
        if tag == OUTSIDE {
            return Some(Tag::Outside);
        }
        let (prefix, ty) = tag.split_once('-')?;
        if ty.is_empty() || ty == OUTSIDE {
            return None;
        }
        match prefix {
            "B" => Some(Tag::Begin(ty)),
            "I" => Some(Tag::Inside(ty)),
            _ => None,
        }
    }

    pub fn entity_type(&self) -> Option<&'a str> {
        match *self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }

    fn is_valid_under(&self, schema: Schema) -> bool {
        match self {
            Tag::Outside => true,
            Tag::Begin(_) => schema.allows_prefix("B"),
            Tag::Inside(_) => schema.allows_prefix("I"),
        }
    }
}

/// One sentence: word tokens and one tag per token.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
    tags: Vec<String>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Length {
                index: 0,
                message: "empty sentence".into(),
            });
        }
        if tokens.len() != tags.len() {
            return Err(Error::Length {
                index: 0,
                message: format!("{} tokens but {} tags", tokens.len(), tags.len()),
            });
        }
        Ok(Self { tokens, tags })
    }

    /// Convenience constructor from `(token, tag)` pairs; panics on empty input.
    pub fn from_pairs<I, S, T>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let (tokens, tags): (Vec<String>, Vec<String>) =
            pairs.into_iter().map(|(s, t)| (s.into(), t.into())).unzip();
        Self::new(tokens, tags).expect("non-empty sentence with matching lengths")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Entity types mentioned anywhere in the sentence.
    pub fn entity_types(&self) -> BTreeSet<&str> {
        self.tags
            .iter()
            .filter_map(|t| Tag::parse(t).and_then(|t| t.entity_type()))
            .collect()
    }

    pub fn contains_type(&self, entity_type: &str) -> bool {
        self.tags
            .iter()
            .any(|t| Tag::parse(t).and_then(|t| t.entity_type()) == Some(entity_type))
    }
}

/// Entity types, tagging schema and the derived tag vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    entity_types: Vec<String>,
    schema: Schema,
    tag_vocabulary: Vec<String>,
}

impl LabelSet {
    /// Builds a label set keeping `entity_types` in the given order.
    pub fn new<I, S>(entity_types: I, schema: Schema) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
        let mut seen = BTreeSet::new();
        for ty in &entity_types {
            if ty == OUTSIDE {
                return Err(Error::LabelSet("`O` is reserved".into()));
            }
            if ty.is_empty() {
                return Err(Error::LabelSet("empty entity type".into()));
            }
            if !seen.insert(ty.as_str()) {
                return Err(Error::LabelSet(format!("duplicate entity type `{ty}`")));
            }
        }
        let mut tag_vocabulary = vec![OUTSIDE.to_string()];
        for ty in &entity_types {
            if schema == Schema::Bio {
                tag_vocabulary.push(format!("B-{ty}"));
            }
            tag_vocabulary.push(format!("I-{ty}"));
        }
        Ok(Self {
            entity_types,
            schema,
            tag_vocabulary,
        })
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn tag_vocabulary(&self) -> &[String] {
        &self.tag_vocabulary
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        self.tag_vocabulary.iter().position(|t| t == tag)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedCorpus {
    sentences: Vec<TokenSequence>,
    labels: LabelSet,
}

impl TaggedCorpus {
    /// Validates every tag against `labels`.
    pub fn new(sentences: Vec<TokenSequence>, labels: LabelSet) -> Result<Self> {
        for sentence in &sentences {
            for tag in sentence.tags() {
                if labels.tag_index(tag).is_none() {
                    return Err(Error::InvalidTag {
                        tag: tag.clone(),
                        schema: labels.schema.to_string(),
                    });
                }
            }
        }
        Ok(Self { sentences, labels })
    }

    /// Infers the entity types (sorted) from the sentences themselves.
    pub fn from_sentences(sentences: Vec<TokenSequence>, schema: Schema) -> Result<Self> {
        let mut types = BTreeSet::new();
        for sentence in &sentences {
            for tag in sentence.tags() {
                let parsed = Tag::parse(tag)
                    .filter(|t| t.is_valid_under(schema))
                    .ok_or_else(|| Error::InvalidTag {
                        tag: tag.clone(),
                        schema: schema.to_string(),
                    })?;
                if let Some(ty) = parsed.entity_type() {
                    types.insert(ty.to_string());
                }
            }
        }
        let labels = LabelSet::new(types, schema)?;
        Ok(Self { sentences, labels })
    }

    pub fn sentences(&self) -> &[TokenSequence] {
        &self.sentences
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn schema(&self) -> Schema {
        self.labels.schema
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(TokenSequence::len).sum()
    }

    /// Same label set, different sentences (e.g. a subsample).
    pub fn with_sentences(&self, sentences: Vec<TokenSequence>) -> Self {
        Self {
            sentences,
            labels: self.labels.clone(),
        }
    }
}

/// An entity span `[start, end)` of one type.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

impl Chunk {
    pub fn new(entity_type: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            entity_type: entity_type.into(),
            start,
            end,
        }
    }
}

/// Parses CoNLL column text. `-DOCSTART-` lines are dropped and runs of blank
/// lines collapse into a single sentence boundary.
pub fn parse_conll(text: &str, schema: Schema) -> Result<TaggedCorpus> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut types = BTreeSet::new();

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| {
        if !tokens.is_empty() {
            sentences.push(TokenSequence {
                tokens: std::mem::take(tokens),
                tags: std::mem::take(tags),
            });
        }
    };

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut tags);
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let columns: Vec<&str> = trimmed.split_whitespace().collect();
        if columns.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected a token and a tag column, found `{trimmed}`"),
            });
        }
        let tag = columns[columns.len() - 1];
        match Tag::parse(tag) {
            Some(parsed) if parsed.is_valid_under(schema) => {
                if let Some(ty) = parsed.entity_type() {
                    types.insert(ty.to_string());
                }
            }
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("tag `{tag}` is not valid under the {schema} schema"),
                })
            }
        }
        tokens.push(columns[0].to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags);

    let labels = LabelSet::new(types, schema)?;
    Ok(TaggedCorpus { sentences, labels })
}

/// Two-column CoNLL output, blank line after every sentence.
pub fn write_conll(corpus: &TaggedCorpus) -> String {
    let mut out = String::new();
    for sentence in corpus.sentences() {
        for (token, tag) in sentence.tokens().iter().zip(sentence.tags()) {
            out.push_str(token);
            out.push(' ');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Re-encodes one tag sequence from `from` to `to`.
pub fn convert_tags<S: AsRef<str>>(tags: &[S], from: Schema, to: Schema) -> Vec<String> {
    match (from, to) {
        (Schema::Bio, Schema::Io) => tags
            .iter()
            .map(|t| match Tag::parse(t.as_ref()) {
                Some(Tag::Begin(ty)) => format!("I-{ty}"),
                _ => t.as_ref().to_string(),
            })
            .collect(),
        (Schema::Io, Schema::Bio) => {
            let mut out = Vec::with_capacity(tags.len());
            let mut prev: Option<&str> = None;
            for t in tags {
                let parsed = Tag::parse(t.as_ref());
                let ty = parsed.and_then(|p| p.entity_type());
                match ty {
                    Some(ty) if prev == Some(ty) => out.push(format!("I-{ty}")),
                    Some(ty) => out.push(format!("B-{ty}")),
                    None => out.push(t.as_ref().to_string()),
                }
                prev = ty;
            }
            out
        }
        _ => tags.iter().map(|t| t.as_ref().to_string()).collect(),
    }
}

pub fn convert_schema(corpus: &TaggedCorpus, target: Schema) -> Result<TaggedCorpus> {
    let from = corpus.schema();
    let labels = LabelSet::new(corpus.labels.entity_types.iter().cloned(), target)?;
    let sentences = corpus
        .sentences
        .iter()
        .map(|s| TokenSequence {
            tokens: s.tokens.clone(),
            tags: convert_tags(&s.tags, from, target),
        })
        .collect();
    TaggedCorpus::new(sentences, labels)
}

/// Maximal entity spans, ordered by start. Unparseable tags count as `O`.
pub fn extract_chunks<S: AsRef<str>>(tags: &[S], schema: Schema) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut open: Option<(&str, usize)> = None;

    for (i, tag) in tags.iter().enumerate() {
        let parsed = Tag::parse(tag.as_ref()).unwrap_or(Tag::Outside);
        let (ty, starts_new) = match parsed {
            Tag::Outside => (None, false),
            // IO has no boundary tag; a stray B- is read as I-.
            Tag::Begin(ty) => (Some(ty), schema == Schema::Bio),
            Tag::Inside(ty) => (Some(ty), false),
        };
        let continues = matches!((open, ty), (Some((cur, _)), Some(ty)) if cur == ty && !starts_new);
        if continues {
            continue;
        }
        if let Some((cur, start)) = open.take() {
            chunks.push(Chunk::new(cur, start, i));
        }
        if let Some(ty) = ty {
            open = Some((ty, i));
        }
    }
    if let Some((cur, start)) = open {
        chunks.push(Chunk::new(cur, start, tags.len()));
    }
    chunks
}

/// Selects at least `shots` sentences per entity type.
///
/// Types are visited in label-set order; a sentence already selected counts
/// toward every type it contains. The result keeps corpus order.
pub fn sample_fewshot(corpus: &TaggedCorpus, shots: usize, seed: u64) -> Result<TaggedCorpus> {
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = vec![false; corpus.len()];

    for ty in corpus.labels.entity_types() {
        let containing: Vec<usize> = (0..corpus.len())
            .filter(|&i| corpus.sentences[i].contains_type(ty))
            .collect();
        if containing.len() < shots {
            return Err(Error::InsufficientData {
                entity_type: ty.clone(),
                message: format!(
                    "{} sentences contain it, {} shots requested",
                    containing.len(),
                    shots
                ),
            });
        }
        let have = containing.iter().filter(|&&i| selected[i]).count();
        let mut candidates: Vec<usize> = containing.into_iter().filter(|&i| !selected[i]).collect();
        candidates.shuffle(&mut rng);
        for i in candidates.into_iter().take(shots.saturating_sub(have)) {
            selected[i] = true;
        }
    }

    let sentences = corpus
        .sentences
        .iter()
        .zip(&selected)
        .filter(|(_, &keep)| keep)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(corpus.with_sentences(sentences))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub tokens: usize,
    pub entity_types: usize,
    pub chunks_per_type: BTreeMap<String, usize>,
}

pub fn corpus_stats(corpus: &TaggedCorpus) -> CorpusStats {
    let mut chunks_per_type: BTreeMap<String, usize> = corpus
        .labels
        .entity_types()
        .iter()
        .map(|t| (t.clone(), 0))
        .collect();
    for sentence in corpus.sentences() {
        for chunk in extract_chunks(sentence.tags(), corpus.schema()) {
            *chunks_per_type.entry(chunk.entity_type).or_default() += 1;
        }
    }
    CorpusStats {
        sentences: corpus.len(),
        tokens: corpus.token_count(),
        entity_types: corpus.labels.entity_types().len(),
        chunks_per_type,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunks(tags: &[&str], schema: Schema) -> Vec<(String, usize, usize)> {
        extract_chunks(tags, schema)
            .into_iter()
            .map(|c| (c.entity_type, c.start, c.end))
            .collect()
    }

    #[test]
    fn empty_input_parses_to_empty_corpus() {
        let corpus = parse_conll("", Schema::Bio).unwrap();
        assert!(corpus.is_empty());
        assert!(corpus.labels().entity_types().is_empty());
        assert_eq!(corpus.labels().tag_vocabulary(), ["O"]);
    }

    #[test]
    fn parses_single_sentence() {
        let corpus = parse_conll("EU B-ORG\nrejects O\n\n", Schema::Bio).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.sentences()[0].tokens(), ["EU", "rejects"]);
        assert_eq!(corpus.labels().entity_types(), ["ORG"]);
    }

    #[test]
    fn orphan_inside_is_accepted() {
        let corpus = parse_conll("Bush I-PER\n\n", Schema::Bio).unwrap();
        assert_eq!(corpus.sentences()[0].tags(), ["I-PER"]);
    }

    #[test]
    fn docstart_and_extra_columns() {
        let text = "-DOCSTART- -X- -X- O\n\nEU NNP B-NP B-ORG\nrejects VBZ B-VP O\n\n\nPeter NNP B-NP B-PER\n";
        let corpus = parse_conll(text, Schema::Bio).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.labels().entity_types(), ["ORG", "PER"]);
        assert_eq!(corpus.sentences()[1].tags(), ["B-PER"]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_conll("EU B-ORG\nlonely\n", Schema::Bio) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_conll("a O\nb B-PER\n", Schema::Io) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_conll("a X-PER\n", Schema::Bio).is_err());
    }

    #[test]
    fn label_set_sizes() {
        let bio = LabelSet::new(["LOC", "PER"], Schema::Bio).unwrap();
        assert_eq!(bio.tag_vocabulary(), ["O", "B-LOC", "I-LOC", "B-PER", "I-PER"]);
        let io = LabelSet::new(["LOC", "PER"], Schema::Io).unwrap();
        assert_eq!(io.tag_vocabulary().len(), 3);
        assert!(LabelSet::new(["O"], Schema::Bio).is_err());
        assert!(LabelSet::new(["A", "A"], Schema::Bio).is_err());
    }

    #[test]
    fn conversion_examples() {
        assert_eq!(
            convert_tags(&["B-PER", "I-PER", "O"], Schema::Bio, Schema::Io),
            ["I-PER", "I-PER", "O"]
        );
        assert_eq!(convert_tags(&["O", "O"], Schema::Bio, Schema::Io), ["O", "O"]);
        assert_eq!(
            convert_tags(&["I-LOC", "I-LOC", "O", "I-LOC"], Schema::Io, Schema::Bio),
            ["B-LOC", "I-LOC", "O", "B-LOC"]
        );
    }

    #[test]
    fn convert_corpus_changes_label_set() {
        let corpus = parse_conll("a B-PER\nb I-PER\n\n", Schema::Bio).unwrap();
        let io = convert_schema(&corpus, Schema::Io).unwrap();
        assert_eq!(io.schema(), Schema::Io);
        assert_eq!(io.sentences()[0].tags(), ["I-PER", "I-PER"]);
        assert!("xml".parse::<Schema>().is_err());
    }

    #[test]
    fn chunk_examples() {
        assert_eq!(
            chunks(&["B-PER", "I-PER", "O", "B-LOC"], Schema::Bio),
            [("PER".into(), 0, 2), ("LOC".into(), 3, 4)]
        );
        assert!(chunks(&["O", "O", "O"], Schema::Bio).is_empty());
        assert_eq!(chunks(&["O", "I-PER", "I-PER"], Schema::Bio), [("PER".into(), 1, 3)]);
        assert_eq!(
            chunks(&["B-PER", "B-PER", "I-LOC"], Schema::Bio),
            [("PER".into(), 0, 1), ("PER".into(), 1, 2), ("LOC".into(), 2, 3)]
        );
        assert_eq!(
            chunks(&["I-PER", "I-PER", "I-LOC"], Schema::Io),
            [("PER".into(), 0, 2), ("LOC".into(), 2, 3)]
        );
    }

    #[test]
    fn fewshot_forced_count_and_determinism() {
        let text: String = (0..30).map(|i| format!("w{i} B-PER\nx O\n\n")).collect();
        let corpus = parse_conll(&text, Schema::Bio).unwrap();
        let a = sample_fewshot(&corpus, 5, 7).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, sample_fewshot(&corpus, 5, 7).unwrap());
        assert_ne!(a, sample_fewshot(&corpus, 5, 8).unwrap());
    }

    #[test]
    fn fewshot_insufficient_names_type() {
        let corpus = parse_conll("a B-PER\n\nb B-LOC\n\nc B-LOC\n\n", Schema::Bio).unwrap();
        match sample_fewshot(&corpus, 2, 0) {
            Err(Error::InsufficientData { entity_type, .. }) => assert_eq!(entity_type, "PER"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stats_of_fixture() {
        let corpus = parse_conll("EU B-ORG\nrejects O\n\n", Schema::Bio).unwrap();
        let stats = corpus_stats(&corpus);
        assert_eq!(stats.sentences, 1);
        assert_eq!(stats.tokens, 2);
        assert_eq!(stats.entity_types, 1);
        assert_eq!(stats.chunks_per_type["ORG"], 1);
        assert_eq!(corpus_stats(&parse_conll("", Schema::Bio).unwrap()), CorpusStats::default());
    }

    #[test]
    fn write_then_parse_round_trips() {
        let corpus = parse_conll("EU B-ORG\nrejects O\n\nBush I-PER\n", Schema::Bio).unwrap();
        assert_eq!(parse_conll(&write_conll(&corpus), Schema::Bio).unwrap(), corpus);
    }
}
