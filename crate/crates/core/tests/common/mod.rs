#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use fsner::corpus::{LabelSet, Schema, TaggedCorpus, TokenSequence};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TYPE_NAMES: [&str; 6] = ["A", "B", "C", "D", "E", "F"];

/// Uniformly random schema-valid tags over `types` entity types.
pub fn random_tags(rng: &mut ChaCha8Rng, len: usize, types: usize, schema: Schema) -> Vec<String> {
    (0..len)
        .map(|_| {
            let r = rng.gen_range(0..=2 * types);
            if r == 0 {
                return "O".to_string();
            }
            let ty = TYPE_NAMES[(r - 1) % types];
            match (schema, r <= types) {
                (Schema::Bio, true) => format!("B-{ty}"),
                _ => format!("I-{ty}"),
            }
        })
        .collect()
}

pub fn corpus_of(tag_seqs: &[Vec<String>], types: usize, schema: Schema) -> TaggedCorpus {
    let sentences = tag_seqs
        .iter()
        .map(|tags| TokenSequence::new(vec!["w".to_string(); tags.len()], tags.clone()).unwrap())
        .collect();
    TaggedCorpus::new(sentences, LabelSet::new(TYPE_NAMES[..types].to_vec(), schema).unwrap()).unwrap()
}

fn split(tag: &str) -> Option<(char, &str)> {
    if tag == "O" {
        return None;
    }
    let (p, t) = tag.split_once('-')?;
    Some((p.chars().next()?, t))
}

fn type_of(tag: &str) -> Option<&str> {
    split(tag).map(|(_, t)| t)
}

/// Tag `i` continues a chunk of type `ty` begun earlier.
fn continues(tags: &[String], i: usize, ty: &str, schema: Schema) -> bool {
    if i == 0 || type_of(&tags[i - 1]) != Some(ty) {
        return false;
    }
    match (schema, split(&tags[i])) {
        (_, Some((_, t))) if t != ty => false,
        (Schema::Bio, Some(('I', _))) => true,
        (Schema::Io, Some(_)) => true,
        _ => false,
    }
}

/// Every span `[s, e)` tested against the chunk definition directly.
pub fn oracle_chunks(tags: &[String], schema: Schema) -> BTreeSet<(String, usize, usize)> {
    let n = tags.len();
    let mut out = BTreeSet::new();
    for s in 0..n {
        for e in s + 1..=n {
            let Some(ty) = type_of(&tags[s]) else { continue };
            let opens = !continues(tags, s, ty, schema);
            let inner = (s + 1..e).all(|i| continues(tags, i, ty, schema));
            let closes = e == n || !continues(tags, e, ty, schema);
            if opens && inner && closes {
                out.insert((ty.to_string(), s, e));
            }
        }
    }
    out
}

/// (gold, predicted, correct) chunk counts.
pub fn oracle_counts(gold: &[Vec<String>], pred: &[Vec<String>], schema: Schema) -> (usize, usize, usize) {
    let mut totals = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gc = oracle_chunks(g, schema);
        let pc = oracle_chunks(p, schema);
        totals.0 += gc.len();
        totals.1 += pc.len();
        totals.2 += gc.intersection(&pc).count();
    }
    totals
}

pub fn f1_from_counts(gold: usize, pred: usize, correct: usize) -> f64 {
    let p = if pred == 0 { 0.0 } else { correct as f64 / pred as f64 };
    let r = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Central difference of `f` at `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-7 || diff <= 1e-4 * analytic.abs().max(numeric.abs())
}

pub mod gradcheck {
    use super::{central_difference, grad_close};
    use fsner::encoder::{init_encoder, EncoderParams, Vocab};
    use fsner::heads::{build_prototypes, cross_entropy, proto_backward, Distribution, LinearHead};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-5;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    fn random_target(rng: &mut ChaCha8Rng, n: usize) -> Distribution {
        if rng.gen_bool(0.5) {
            Distribution::one_hot(n, rng.gen_range(0..n))
        } else {
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            Distribution::new(w.into_iter().map(|v| v / s).collect()).unwrap()
        }
    }

    fn check(what: &str, index: usize, analytic: f64, numeric: f64) -> Result<(), String> {
        if grad_close(analytic, numeric) {
            Ok(())
        } else {
            Err(format!("{what}[{index}]: analytic {analytic:e} vs numeric {numeric:e}"))
        }
    }

    fn weighted_sum(params: &EncoderParams, tokens: &[String], upstream: &[Vec<f64>]) -> f64 {
        params
            .encode(tokens)
            .iter()
            .zip(upstream)
            .map(|(r, c)| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// Encoder gradient of `Σ c · encode(tokens)` for random `c`, every
    /// parameter scalar. Returns the number of scalars compared.
    pub fn encoder_case(seed: u64) -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<String> = (0..rng.gen_range(3..8)).map(|i| format!("v{i}")).collect();
        let e = rng.gen_range(1..5);
        let h = rng.gen_range(1..5);
        let mut params = init_encoder(Vocab::new(&words), e, h, seed).unwrap();
        for (_, block) in params.blocks_mut() {
            block.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        // Includes unknown words and repeats.
        let tokens: Vec<String> = (0..rng.gen_range(1..7))
            .map(|_| {
                let i = rng.gen_range(0..words.len() + 2);
                words.get(i).cloned().unwrap_or_else(|| format!("unk{i}"))
            })
            .collect();
        let upstream: Vec<Vec<f64>> = tokens.iter().map(|_| random_vec(&mut rng, h, 1.0)).collect();

        let grads = params.encode_backward(&tokens, &upstream).map_err(|e| e.to_string())?;
        let analytic = [
            grads.dense_embedding(params.vocab().rows(), e),
            grads.context_weights.clone(),
            grads.context_bias.clone(),
        ];
        let mut compared = 0;
        for (b, expected) in analytic.iter().enumerate() {
            let len = params.blocks_mut()[b].1.len();
            if expected.len() != len {
                return Err(format!("block {b}: gradient has {} values, parameters {len}", expected.len()));
            }
            for i in 0..len {
                let mut values: Vec<f64> = params.blocks_mut()[b].1.to_vec();
                let numeric = central_difference(&mut values, i, STEP, |v| {
                    let mut p = params.clone();
                    p.blocks_mut()[b].1.copy_from_slice(v);
                    weighted_sum(&p, &tokens, &upstream)
                });
                check(params.blocks_mut()[b].0, i, expected[i], numeric)?;
                compared += 1;
            }
        }
        Ok(compared)
    }

    /// Linear head: weights, bias and input representation.
    pub fn linear_case(seed: u64) -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..8);
        let h = rng.gen_range(1..7);
        let tags: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let mut head = LinearHead::from_parts(tags.clone(), h, random_vec(&mut rng, n * h, 1.5), random_vec(&mut rng, n, 1.0)).unwrap();
        let repr = random_vec(&mut rng, h, 1.0);
        let target = random_target(&mut rng, n);
        let back = head.backward(&repr, &target).map_err(|e| e.to_string())?;

        let loss_of = |head: &LinearHead, z: &[f64]| cross_entropy(&head.forward(z).unwrap(), &target).unwrap();
        let mut compared = 0;
        for (b, expected) in [&back.weights, &back.bias].into_iter().enumerate() {
            let mut values = head.blocks_mut()[b].1.to_vec();
            for i in 0..values.len() {
                let numeric = central_difference(&mut values, i, STEP, |v| {
                    let mut probe = head.clone();
                    probe.blocks_mut()[b].1.copy_from_slice(v);
                    loss_of(&probe, &repr)
                });
                check(head.blocks_mut()[b].0, i, expected[i], numeric)?;
                compared += 1;
            }
        }
        let mut z = repr.clone();
        for i in 0..h {
            let numeric = central_difference(&mut z, i, STEP, |z| loss_of(&head, z));
            check("repr", i, back.upstream[i], numeric)?;
            compared += 1;
        }
        Ok(compared)
    }

    /// Prototype head: query representation and every support representation
    /// (through the per-label mean).
    pub fn prototype_case(seed: u64) -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = rng.gen_range(2..6);
        let dim = rng.gen_range(1..6);
        let support: Vec<(String, Vec<Vec<f64>>)> = (0..labels)
            .map(|l| {
                let n = rng.gen_range(1..4);
                (format!("L{l}"), (0..n).map(|_| random_vec(&mut rng, dim, 1.0)).collect())
            })
            .collect();
        let query = random_vec(&mut rng, dim, 1.0);
        let target = random_target(&mut rng, labels);
        let grads = proto_backward(&support, &query, &target).map_err(|e| e.to_string())?;

        let loss_of = |support: &[(String, Vec<Vec<f64>>)], q: &[f64]| {
            let protos = build_prototypes(support).unwrap();
            cross_entropy(&protos.forward(q).unwrap(), &target).unwrap()
        };
        let mut compared = 0;
        let mut q = query.clone();
        for i in 0..dim {
            let numeric = central_difference(&mut q, i, STEP, |q| loss_of(&support, q));
            check("query", i, grads.query[i], numeric)?;
            compared += 1;
        }
        for l in 0..labels {
            for s in 0..support[l].1.len() {
                let mut x = support[l].1[s].clone();
                for i in 0..dim {
                    let numeric = central_difference(&mut x, i, STEP, |x| {
                        let mut probe = support.clone();
                        probe[l].1[s] = x.to_vec();
                        loss_of(&probe, &query)
                    });
                    check(&format!("support[{l}][{s}]"), i, grads.support[l][s][i], numeric)?;
                    compared += 1;
                }
            }
        }
        Ok(compared)
    }
}
