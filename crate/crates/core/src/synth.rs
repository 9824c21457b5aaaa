//! Synthetic tagged corpora with controllable structure.
//!
//! A [`World`] owns a word inventory: per-type name words, per-type trigger
//! words, type-ambiguous words and fillers. Entity types are recoverable from
//! word identity (names) or from the left neighbour (a trigger followed by an
//! ambiguous word), which a three-token window encoder can learn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{LabelSet, Schema, TaggedCorpus, TokenSequence, OUTSIDE};

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub types: Vec<String>,
    pub names: Vec<Vec<String>>,
    pub triggers: Vec<Vec<String>>,
    pub ambiguous: Vec<String>,
    pub fillers: Vec<String>,
}

/// How sentences are laid out.
#[derive(Clone, Debug, PartialEq)]
pub struct Style {
    pub min_mentions: usize,
    pub max_mentions: usize,
    pub max_name_len: usize,
    /// Probability that a mention is a trigger followed by an ambiguous word.
    pub ambiguous_prob: f64,
    /// Probability that a name mention is preceded by one of its type's triggers.
    pub triggered_prob: f64,
}

impl Default for Style {
    fn default() -> Self {
        Self {
            min_mentions: 1,
            max_mentions: 3,
            max_name_len: 2,
            ambiguous_prob: 0.25,
            triggered_prob: 0.5,
        }
    }
}

/// How mentions are labeled.
#[derive(Clone, Debug, PartialEq)]
pub enum Labeling {
    /// The world's own types.
    Coarse,
    /// Each type split in two (`<TYPE>1`, `<TYPE>2`) by which half of the name
    /// or trigger list the mention's word falls in.
    Fine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub style: Style,
    pub labeling: Labeling,
    /// Probability that a mention's label is replaced by a random other
    /// label or dropped to `O`.
    pub noise: f64,
}

impl Default for Generation {
    fn default() -> Self {
        Self {
            style: Style::default(),
            labeling: Labeling::Coarse,
            noise: 0.0,
        }
    }
}

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

impl World {
    pub fn new(
        types: &[&str],
        names_per_type: usize,
        triggers_per_type: usize,
        ambiguous: usize,
        fillers: usize,
    ) -> Self {
        let types: Vec<String> = types.iter().map(|t| t.to_string()).collect();
        Self {
            names: types.iter().map(|t| words(&format!("{}_", t.to_lowercase()), names_per_type)).collect(),
            triggers: types.iter().map(|t| words(&format!("t{}_", t.to_lowercase()), triggers_per_type)).collect(),
            ambiguous: words("amb", ambiguous),
            fillers: words("w", fillers),
            types,
        }
    }

    /// A world with new type names and name words that reuses this world's
    /// triggers, ambiguous words and fillers, type by type.
    pub fn with_new_types(&self, types: &[&str], names_per_type: usize) -> Self {
        assert_eq!(types.len(), self.types.len());
        let types: Vec<String> = types.iter().map(|t| t.to_string()).collect();
        Self {
            names: types.iter().map(|t| words(&format!("{}_", t.to_lowercase()), names_per_type)).collect(),
            triggers: self.triggers.clone(),
            ambiguous: self.ambiguous.clone(),
            fillers: self.fillers.clone(),
            types,
        }
    }

    pub fn vocabulary_size(&self) -> usize {
        self.names.iter().map(Vec::len).sum::<usize>()
            + self.triggers.iter().map(Vec::len).sum::<usize>()
            + self.ambiguous.len()
            + self.fillers.len()
    }

    fn labels(&self, labeling: &Labeling) -> Vec<String> {
        match labeling {
            Labeling::Coarse => self.types.clone(),
            Labeling::Fine => self
                .types
                .iter()
                .flat_map(|t| [format!("{t}1"), format!("{t}2")])
                .collect(),
        }
    }

    pub fn label_set(&self, labeling: &Labeling) -> LabelSet {
        let mut labels = self.labels(labeling);
        labels.sort();
        LabelSet::new(labels, Schema::Bio).expect("distinct type names")
    }

    fn fillers_into(&self, out: &mut Vec<(String, String)>, n: usize, rng: &mut ChaCha8Rng) {
        for _ in 0..n {
            out.push((self.fillers.choose(rng).unwrap().clone(), OUTSIDE.to_string()));
        }
    }

    /// One sentence under `gen`.
    pub fn sentence(&self, gen: &Generation, rng: &mut ChaCha8Rng) -> TokenSequence {
        let style = &gen.style;
        let labels = self.labels(&gen.labeling);
        let mentions = rng.gen_range(style.min_mentions..=style.max_mentions);
        let mut out: Vec<(String, String)> = Vec::new();
        let lead = rng.gen_range(0..=2);
        self.fillers_into(&mut out, lead, rng);

        for m in 0..mentions {
            if m > 0 {
                let gap = rng.gen_range(1..=3);
                self.fillers_into(&mut out, gap, rng);
            }
            let ty = rng.gen_range(0..self.types.len());
            let half = |idx: usize, len: usize| usize::from(idx * 2 >= len);
            let mut span: Vec<String> = Vec::new();
            let sub;
            if !self.ambiguous.is_empty() && rng.gen_bool(style.ambiguous_prob) {
                let t = rng.gen_range(0..self.triggers[ty].len());
                sub = half(t, self.triggers[ty].len());
                out.push((self.triggers[ty][t].clone(), OUTSIDE.to_string()));
                span.push(self.ambiguous.choose(rng).unwrap().clone());
            } else {
                if rng.gen_bool(style.triggered_prob) {
                    out.push((self.triggers[ty].choose(rng).unwrap().clone(), OUTSIDE.to_string()));
                }
                let len = rng.gen_range(1..=style.max_name_len);
                let first = rng.gen_range(0..self.names[ty].len());
                sub = half(first, self.names[ty].len());
                span.push(self.names[ty][first].clone());
                for _ in 1..len {
                    span.push(self.names[ty].choose(rng).unwrap().clone());
                }
            }

            let mut label = match gen.labeling {
                Labeling::Coarse => Some(labels[ty].clone()),
                Labeling::Fine => Some(labels[2 * ty + sub].clone()),
            };
            if gen.noise > 0.0 && rng.gen_bool(gen.noise) {
                let pick = rng.gen_range(0..labels.len());
                label = if labels[pick] == *label.as_ref().unwrap() {
                    None
                } else {
                    Some(labels[pick].clone())
                };
            }
            for (i, w) in span.into_iter().enumerate() {
                let tag = match &label {
                    None => OUTSIDE.to_string(),
                    Some(l) if i == 0 => format!("B-{l}"),
                    Some(l) => format!("I-{l}"),
                };
                out.push((w, tag));
            }
        }
        let trail = rng.gen_range(0..=2);
        self.fillers_into(&mut out, trail, rng);
        TokenSequence::from_pairs(out)
    }

    pub fn corpus(&self, n: usize, gen: &Generation, seed: u64) -> TaggedCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sentences = (0..n).map(|_| self.sentence(gen, &mut rng)).collect();
        TaggedCorpus::new(sentences, self.label_set(&gen.labeling)).expect("generated tags are in the label set")
    }
}

/// Three types over exactly 200 words: 30 names and 4 triggers per type,
/// 12 ambiguous words and 86 fillers.
pub fn learnability_world() -> World {
    World::new(&["LOC", "ORG", "PER"], 30, 4, 12, 86)
}

/// Source/target corpora for transfer and self-training comparisons.
#[derive(Clone, Debug)]
pub struct TransferBenchmark {
    /// Noisy corpus labeled with six fine-grained types.
    pub source: TaggedCorpus,
    /// Target-domain pool (three coarse types) to draw few-shot data from.
    pub target_train: TaggedCorpus,
    pub target_test: TaggedCorpus,
}

pub fn transfer_world() -> World {
    World::new(&["LOC", "ORG", "PER"], 20, 2, 12, 80)
}

/// Single-word mentions, mostly introduced by a trigger.
pub fn transfer_style() -> Style {
    Style {
        max_name_len: 1,
        triggered_prob: 0.8,
        ..Style::default()
    }
}

pub fn transfer_benchmark(seed: u64) -> TransferBenchmark {
    let world = transfer_world();
    let coarse = Generation {
        style: transfer_style(),
        ..Generation::default()
    };
    let fine = Generation {
        labeling: Labeling::Fine,
        noise: 0.1,
        ..coarse.clone()
    };
    TransferBenchmark {
        source: world.corpus(1000, &fine, seed),
        target_train: world.corpus(600, &coarse, seed.wrapping_add(1)),
        target_test: world.corpus(200, &coarse, seed.wrapping_add(2)),
    }
}

/// Source corpus plus support/test corpora over types the source never
/// labels. Target mentions are single new name words introduced by the
/// source types' triggers.
#[derive(Clone, Debug)]
pub struct NovelTypeBenchmark {
    pub source: TaggedCorpus,
    pub support: TaggedCorpus,
    pub test: TaggedCorpus,
}

pub fn novel_type_benchmark(seed: u64, support_sentences: usize) -> NovelTypeBenchmark {
    let world = World::new(&["ANIMAL", "FOOD", "TOOL"], 30, 4, 12, 80);
    let novel = world.with_new_types(&["CITY", "DRUG", "SHIP"], 30);
    let source_gen = Generation::default();
    let target_gen = Generation {
        style: Style {
            max_name_len: 1,
            ambiguous_prob: 0.0,
            triggered_prob: 1.0,
            ..Style::default()
        },
        ..Generation::default()
    };
    NovelTypeBenchmark {
        source: world.corpus(600, &source_gen, seed),
        support: novel.corpus(support_sentences, &target_gen, seed.wrapping_add(1)),
        test: novel.corpus(200, &target_gen, seed.wrapping_add(2)),
    }
}
