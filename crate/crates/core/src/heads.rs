//! Classification heads over token representations.
//!
//! [`LinearHead`] is a softmax classifier over the tag vocabulary. A
//! [`PrototypeSet`] scores a token by a softmax over negative Euclidean
//! distances to per-label centroids; labels may carry several centroids, in
//! which case per-centroid probabilities are averaged per label.
//!
//! Ties in every argmax/argmin resolve to the lowest label index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORMALIZATION_TOLERANCE: f64 = 1e-9;
const KMEANS_ITERATIONS: usize = 50;
const INIT_RANGE: f64 = 0.1;

/// A probability vector over an ordered label list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Distribution("entries must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::Distribution(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        Self(softmax(logits))
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self(probs)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `KL(target ‖ dist)`; for a one-hot target this is `-ln dist[true]`.
pub fn cross_entropy(dist: &Distribution, target: &Distribution) -> Result<f64> {
    if dist.len() != target.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} labels, target {}",
            dist.len(),
            target.len()
        )));
    }
    let mut loss = 0.0;
    for (i, (&q, &p)) in dist.0.iter().zip(&target.0).enumerate() {
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            return Err(Error::SupportViolation { index: i });
        }
        loss += p * (p / q).ln();
    }
    Ok(loss.max(0.0))
}

/// KL from log-probabilities, avoiding underflow of tiny probabilities.
fn kl_from_log_probs(log_q: &[f64], target: &[f64]) -> f64 {
    let loss: f64 = target
        .iter()
        .zip(log_q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &lq)| p * (p.ln() - lq))
        .sum();
    loss.max(0.0)
}

fn check_dim(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what}: expected {want}, got {got}")));
    }
    Ok(())
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    sq_distance(a, b).sqrt()
}

fn mean(points: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; points[0].len()];
    for p in points {
        for (a, b) in m.iter_mut().zip(p.iter()) {
            *a += b;
        }
    }
    let n = points.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Softmax classifier `softmax(W·z + b)` over an ordered tag list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    tags: Vec<String>,
    hidden_dim: usize,
    /// `|tags| × H`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearBackward {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Gradient with respect to the input representation.
    pub upstream: Vec<f64>,
}

impl LinearHead {
    /// Weights uniform in `[-0.1, 0.1]`, zero bias.
    pub fn init(tags: Vec<String>, hidden_dim: usize, seed: u64) -> Result<Self> {
        if tags.is_empty() || hidden_dim == 0 {
            return Err(Error::Config("linear head needs tags and a positive width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..tags.len() * hidden_dim)
            .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        let bias = vec![0.0; tags.len()];
        Ok(Self {
            tags,
            hidden_dim,
            weights,
            bias,
        })
    }

    pub fn from_parts(tags: Vec<String>, hidden_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_dim(weights.len(), tags.len() * hidden_dim, "linear head weights")?;
        check_dim(bias.len(), tags.len(), "linear head bias")?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite head parameter".into()));
        }
        Ok(Self {
            tags,
            hidden_dim,
            weights,
            bias,
        })
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 2] {
        [("head.weights", &mut self.weights), ("head.bias", &mut self.bias)]
    }

    pub fn logits(&self, repr: &[f64]) -> Result<Vec<f64>> {
        check_dim(repr.len(), self.hidden_dim, "representation")?;
        Ok(self
            .bias
            .iter()
            .enumerate()
            .map(|(t, b)| {
                let row = &self.weights[t * self.hidden_dim..(t + 1) * self.hidden_dim];
                b + row.iter().zip(repr).map(|(w, z)| w * z).sum::<f64>()
            })
            .collect())
    }

    pub fn forward(&self, repr: &[f64]) -> Result<Distribution> {
        Ok(Distribution::from_logits(&self.logits(repr)?))
    }

    /// Loss `KL(target ‖ q)` and its gradients.
    pub fn backward(&self, repr: &[f64], target: &Distribution) -> Result<LinearBackward> {
        check_dim(target.len(), self.tags.len(), "target")?;
        let logits = self.logits(repr)?;
        let log_q = log_softmax(&logits);
        let loss = kl_from_log_probs(&log_q, target.probs());
        let h = self.hidden_dim;
        let dlogits: Vec<f64> = log_q
            .iter()
            .zip(target.probs())
            .map(|(lq, p)| lq.exp() - p)
            .collect();
        let mut weights = vec![0.0; self.weights.len()];
        let mut upstream = vec![0.0; h];
        for (t, &g) in dlogits.iter().enumerate() {
            let row = &self.weights[t * h..(t + 1) * h];
            let grow = &mut weights[t * h..(t + 1) * h];
            for k in 0..h {
                grow[k] = g * repr[k];
                upstream[k] += g * row[k];
            }
        }
        Ok(LinearBackward {
            loss,
            weights,
            bias: dlogits,
            upstream,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub label: String,
    pub centroids: Vec<Vec<f64>>,
}

/// Centroids per label, in label order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    entries: Vec<Prototype>,
}

/// Gradients of `KL(target ‖ q)` for one query token against a prototype set.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoBackward {
    pub loss: f64,
    /// With respect to the query representation.
    pub query: Vec<f64>,
    /// With respect to each label's (single) centroid.
    pub centroids: Vec<Vec<f64>>,
}

/// Gradients routed back to the support representations through the mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoGrads {
    pub loss: f64,
    pub query: Vec<f64>,
    /// Indexed like the support input: `support[label][example]`.
    pub support: Vec<Vec<Vec<f64>>>,
}

/// One mean centroid per label.
pub fn build_prototypes(support: &[(String, Vec<Vec<f64>>)]) -> Result<PrototypeSet> {
    validate_support(support)?;
    let entries = support
        .iter()
        .map(|(label, reprs)| {
            let refs: Vec<&[f64]> = reprs.iter().map(Vec::as_slice).collect();
            Prototype {
                label: label.clone(),
                centroids: vec![mean(&refs)],
            }
        })
        .collect();
    Ok(PrototypeSet { entries })
}

fn validate_support(support: &[(String, Vec<Vec<f64>>)]) -> Result<usize> {
    let mut dim = None;
    for (i, (label, reprs)) in support.iter().enumerate() {
        if support[..i].iter().any(|(l, _)| l == label) {
            return Err(Error::Config(format!("duplicate prototype label `{label}`")));
        }
        if reprs.is_empty() {
            return Err(Error::InsufficientData {
                entity_type: label.clone(),
                message: "no support representations".into(),
            });
        }
        for r in reprs {
            match dim {
                None => dim = Some(r.len()),
                Some(d) => check_dim(r.len(), d, "support representation")?,
            }
        }
    }
    dim.ok_or_else(|| Error::Config("empty support set".into()))
}

/// `max(1, ⌈shots/5⌉)` centroids per label via k-means, clamped to the number
/// of representations available for the label.
pub fn build_multi_prototypes(
    support: &[(String, Vec<Vec<f64>>)],
    shots: usize,
    seed: u64,
) -> Result<PrototypeSet> {
    validate_support(support)?;
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    let per_label = shots.div_ceil(5).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = support
        .iter()
        .map(|(label, reprs)| {
            let k = per_label.min(reprs.len());
            let centroids = if k == 1 {
                let refs: Vec<&[f64]> = reprs.iter().map(Vec::as_slice).collect();
                vec![mean(&refs)]
            } else {
                kmeans(reprs, k, &mut rng)
            };
            Prototype {
                label: label.clone(),
                centroids,
            }
        })
        .collect();
    Ok(PrototypeSet { entries })
}

/// Lloyd's algorithm with farthest-point seeding from a random first centre.
fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut nearest_sq: Vec<f64> = points.iter().map(|p| sq_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = argmax(&nearest_sq);
        centroids.push(points[next].clone());
        let c = centroids.last().unwrap();
        for (d, p) in nearest_sq.iter_mut().zip(points) {
            *d = d.min(sq_distance(p, c));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for (a, p) in assignment.iter_mut().zip(points) {
            let dists: Vec<f64> = centroids.iter().map(|c| sq_distance(p, c)).collect();
            let best = argmin(&dists);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64]> = points
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p.as_slice())
                .collect();
            if !members.is_empty() {
                *centroid = mean(&members);
            }
        }
    }
    centroids
}

impl PrototypeSet {
    pub fn from_entries(entries: Vec<Prototype>) -> Result<Self> {
        let support: Vec<(String, Vec<Vec<f64>>)> = entries
            .iter()
            .map(|e| (e.label.clone(), e.centroids.clone()))
            .collect();
        validate_support(&support)?;
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Prototype] {
        &self.entries
    }

    pub fn labels(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.label.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].centroids[0].len()
    }

    pub fn is_single(&self) -> bool {
        self.entries.iter().all(|e| e.centroids.len() == 1)
    }

    fn single_centroids(&self) -> Result<Vec<&[f64]>> {
        if !self.is_single() {
            return Err(Error::Head(
                "multi-centroid prototypes need multi-prototype scoring".into(),
            ));
        }
        Ok(self.entries.iter().map(|e| e.centroids[0].as_slice()).collect())
    }

    /// Distance to each label's nearest centroid.
    pub fn distances(&self, repr: &[f64]) -> Result<Vec<f64>> {
        check_dim(repr.len(), self.dim(), "representation")?;
        Ok(self
            .entries
            .iter()
            .map(|e| {
                e.centroids
                    .iter()
                    .map(|c| distance(repr, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect())
    }

    /// Label index of the nearest centroid.
    pub fn nearest(&self, repr: &[f64]) -> Result<usize> {
        Ok(argmin(&self.distances(repr)?))
    }

    /// `q_m ∝ exp(-‖repr - c_m‖₂)` over single-centroid labels.
    pub fn forward(&self, repr: &[f64]) -> Result<Distribution> {
        let centroids = self.single_centroids()?;
        check_dim(repr.len(), self.dim(), "representation")?;
        let logits: Vec<f64> = centroids.iter().map(|c| -distance(repr, c)).collect();
        Ok(Distribution::from_logits(&logits))
    }

    /// Flat softmax over every centroid, averaged per label and renormalised.
    pub fn multi_score(&self, repr: &[f64]) -> Result<Distribution> {
        check_dim(repr.len(), self.dim(), "representation")?;
        let logits: Vec<f64> = self
            .entries
            .iter()
            .flat_map(|e| e.centroids.iter().map(|c| -distance(repr, c)))
            .collect();
        let flat = softmax(&logits);
        let mut offset = 0;
        let mut scores: Vec<f64> = self
            .entries
            .iter()
            .map(|e| {
                let n = e.centroids.len();
                let s = flat[offset..offset + n].iter().sum::<f64>() / n as f64;
                offset += n;
                s
            })
            .collect();
        let total: f64 = scores.iter().sum();
        scores.iter_mut().for_each(|s| *s /= total);
        Ok(Distribution(scores))
    }

    /// Gradients with respect to the query and to each centroid. A zero
    /// distance contributes a zero subgradient.
    pub fn backward(&self, repr: &[f64], target: &Distribution) -> Result<ProtoBackward> {
        let centroids = self.single_centroids()?;
        check_dim(repr.len(), self.dim(), "representation")?;
        check_dim(target.len(), centroids.len(), "target")?;
        let dists: Vec<f64> = centroids.iter().map(|c| distance(repr, c)).collect();
        let logits: Vec<f64> = dists.iter().map(|d| -d).collect();
        let log_q = log_softmax(&logits);
        let loss = kl_from_log_probs(&log_q, target.probs());

        let mut query = vec![0.0; repr.len()];
        let mut grads = Vec::with_capacity(centroids.len());
        for (m, c) in centroids.iter().enumerate() {
            // dL/dd_m = t_m - q_m
            let dd = target.probs()[m] - log_q[m].exp();
            let mut gc = vec![0.0; repr.len()];
            if dists[m] > 0.0 && dd != 0.0 {
                let scale = dd / dists[m];
                for k in 0..repr.len() {
                    let u = scale * (repr[k] - c[k]);
                    query[k] += u;
                    gc[k] = -u;
                }
            }
            grads.push(gc);
        }
        Ok(ProtoBackward {
            loss,
            query,
            centroids: grads,
        })
    }
}

/// Builds mean prototypes from `support` and differentiates the query loss
/// with respect to the query and every support representation.
pub fn proto_backward(
    support: &[(String, Vec<Vec<f64>>)],
    repr: &[f64],
    target: &Distribution,
) -> Result<ProtoGrads> {
    let protos = build_prototypes(support)?;
    let back = protos.backward(repr, target)?;
    let support_grads = support
        .iter()
        .zip(&back.centroids)
        .map(|((_, reprs), gc)| {
            let n = reprs.len() as f64;
            let g: Vec<f64> = gc.iter().map(|v| v / n).collect();
            vec![g; reprs.len()]
        })
        .collect();
    Ok(ProtoGrads {
        loss: back.loss,
        query: back.query,
        support: support_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn support(items: &[(&str, &[&[f64]])]) -> Vec<(String, Vec<Vec<f64>>)> {
        items
            .iter()
            .map(|(l, rs)| (l.to_string(), rs.iter().map(|r| r.to_vec()).collect()))
            .collect()
    }

    #[test]
    fn zero_linear_head_is_uniform() {
        let head = LinearHead::from_parts(
            vec!["O".into(), "B-A".into(), "I-A".into(), "B-B".into()],
            2,
            vec![0.0; 8],
            vec![0.0; 4],
        )
        .unwrap();
        assert_eq!(head.forward(&[0.3, -0.2]).unwrap().probs(), [0.25; 4]);
    }

    #[test]
    fn softmax_of_zero_one() {
        let d = Distribution::from_logits(&[0.0, 1.0]);
        assert!(close(d.probs()[0], 0.2689, 1e-4));
        assert!(close(d.probs()[1], 0.7311, 1e-4));
        let shifted = Distribution::from_logits(&[5.0, 6.0]);
        for (a, b) in d.probs().iter().zip(shifted.probs()) {
            assert!(close(*a, *b, 1e-15));
        }
    }

    #[test]
    fn linear_head_checks_dimensions() {
        let head = LinearHead::init(vec!["O".into(), "B-A".into()], 3, 0).unwrap();
        assert!(head.forward(&[1.0, 2.0]).is_err());
        assert!(head.backward(&[1.0, 2.0, 3.0], &Distribution::uniform(3)).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let one_hot = Distribution::one_hot(3, 1);
        assert_eq!(cross_entropy(&one_hot, &one_hot).unwrap(), 0.0);
        let uniform = Distribution::uniform(2);
        assert!(close(cross_entropy(&uniform, &Distribution::one_hot(2, 0)).unwrap(), 2f64.ln(), 1e-12));
        assert_eq!(cross_entropy(&uniform, &uniform).unwrap(), 0.0);
        assert!(matches!(
            cross_entropy(&Distribution::one_hot(2, 0), &Distribution::one_hot(2, 1)),
            Err(Error::SupportViolation { index: 1 })
        ));
        assert!(cross_entropy(&uniform, &Distribution::uniform(3)).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![0.5, 0.5]).is_ok());
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.5, 1.5]).is_err());
        assert!(Distribution::new(vec![]).is_err());
    }

    #[test]
    fn linear_stationary_point_and_bias_gradient() {
        let head = LinearHead::init(vec!["O".into(), "B-A".into(), "I-A".into()], 4, 5).unwrap();
        let repr = [0.1, -0.4, 0.2, 0.9];
        let dist = head.forward(&repr).unwrap();
        let back = head.backward(&repr, &dist).unwrap();
        assert!(back.weights.iter().chain(&back.bias).chain(&back.upstream).all(|g| g.abs() < 1e-15));

        let target = Distribution::one_hot(3, 2);
        let back = head.backward(&repr, &target).unwrap();
        for (i, g) in back.bias.iter().enumerate() {
            let expect = dist.probs()[i] - target.probs()[i];
            assert!(close(*g, expect, 1e-15));
        }
        assert!(close(back.loss, -dist.probs()[2].ln(), 1e-12));
    }

    #[test]
    fn prototype_means() {
        let protos = build_prototypes(&support(&[("A", &[&[1.0, 0.0], &[0.0, 1.0]]), ("B", &[&[3.0, 4.0]])])).unwrap();
        assert_eq!(protos.entries()[0].centroids, [vec![0.5, 0.5]]);
        assert_eq!(protos.entries()[1].centroids, [vec![3.0, 4.0]]);
        assert!(build_prototypes(&support(&[("A", &[])])).is_err());
        assert!(build_prototypes(&support(&[("A", &[&[1.0]]), ("A", &[&[2.0]])])).is_err());
    }

    #[test]
    fn person_prototype_is_average_of_three_tokens() {
        let mr = [0.2, 0.9, -0.1];
        let bush = [0.4, 0.5, 0.3];
        let jobs = [0.0, 0.7, 0.1];
        let protos = build_prototypes(&support(&[("PER", &[&mr, &bush, &jobs])])).unwrap();
        let c = &protos.entries()[0].centroids[0];
        for k in 0..3 {
            assert!(close(c[k], (mr[k] + bush[k] + jobs[k]) / 3.0, 1e-15));
        }
    }

    #[test]
    fn proto_forward_examples() {
        let protos = build_prototypes(&support(&[("A", &[&[1.0, 0.0]]), ("B", &[&[-1.0, 0.0]])])).unwrap();
        assert_eq!(protos.forward(&[0.0, 3.0]).unwrap().probs(), [0.5, 0.5]);

        let protos = build_prototypes(&support(&[("A", &[&[0.0, 0.0]]), ("B", &[&[0.0, 1.0]])])).unwrap();
        let d = protos.forward(&[0.0, 0.0]).unwrap();
        assert!(close(d.probs()[0], 0.7311, 1e-4));
        assert!(close(d.probs()[1], 0.2689, 1e-4));
        assert!(protos.forward(&[0.0]).is_err());
    }

    #[test]
    fn proto_forward_rejects_multi_centroid() {
        let protos = build_multi_prototypes(&support(&[("A", &[&[0.0], &[1.0]])]), 10, 0).unwrap();
        assert_eq!(protos.entries()[0].centroids.len(), 2);
        assert!(protos.forward(&[0.5]).is_err());
        assert!(protos.backward(&[0.5], &Distribution::one_hot(1, 0)).is_err());
    }

    #[test]
    fn proto_stationary_point() {
        let s = support(&[("A", &[&[0.0, 0.3]]), ("B", &[&[1.0, -0.2]]), ("O", &[&[0.4, 0.4]])]);
        let repr = [0.2, 0.1];
        let protos = build_prototypes(&s).unwrap();
        let q = protos.forward(&repr).unwrap();
        let grads = proto_backward(&s, &repr, &q).unwrap();
        assert!(grads.query.iter().chain(grads.support.iter().flatten().flatten()).all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn zero_distance_uses_zero_subgradient() {
        let s = support(&[("A", &[&[0.0, 0.0]]), ("B", &[&[1.0, 0.0]])]);
        let grads = proto_backward(&s, &[0.0, 0.0], &Distribution::one_hot(2, 0)).unwrap();
        assert!(grads.support[0][0].iter().all(|&g| g == 0.0));
        assert!(grads.support[1][0].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn multi_prototype_counts() {
        let pts: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let s = vec![("A".to_string(), pts.clone()), ("B".to_string(), pts[..1].to_vec())];
        let five = build_multi_prototypes(&s, 5, 1).unwrap();
        assert_eq!(five, build_prototypes(&s).unwrap());
        let ten = build_multi_prototypes(&s, 10, 1).unwrap();
        assert_eq!(ten.entries()[0].centroids.len(), 2);
        assert_eq!(ten.entries()[1].centroids.len(), 1);
        assert_eq!(build_multi_prototypes(&s, 11, 1).unwrap().entries()[0].centroids.len(), 3);
        assert_eq!(ten, build_multi_prototypes(&s, 10, 1).unwrap());
    }

    #[test]
    fn identical_points_collapse_centroids() {
        let s = support(&[("A", &[&[0.3, 0.3], &[0.3, 0.3], &[0.3, 0.3]])]);
        let protos = build_multi_prototypes(&s, 15, 4).unwrap();
        assert_eq!(protos.entries()[0].centroids.len(), 3);
        assert!(protos.entries()[0].centroids.iter().all(|c| c == &[0.3, 0.3]));
    }

    #[test]
    fn multi_score_example() {
        let protos = PrototypeSet::from_entries(vec![
            Prototype {
                label: "A".into(),
                centroids: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            },
            Prototype {
                label: "B".into(),
                centroids: vec![vec![-1.0, 0.0]],
            },
        ])
        .unwrap();
        let d = protos.multi_score(&[0.0, 0.0]).unwrap();
        assert!(close(d.probs()[0], 0.5, 1e-15));
        assert!(close(d.probs()[1], 0.5, 1e-15));
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..5 {
            pts.push(vec![0.0 + 0.01 * i as f64, 0.0]);
            pts.push(vec![10.0 + 0.01 * i as f64, 0.0]);
        }
        let protos = build_multi_prototypes(&[("A".to_string(), pts)], 10, 9).unwrap();
        let mut xs: Vec<f64> = protos.entries()[0].centroids.iter().map(|c| c[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!(close(xs[0], 0.02, 1e-12));
        assert!(close(xs[1], 10.02, 1e-12));
    }
}
