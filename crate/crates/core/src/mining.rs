//! In-batch triplet construction. One triplet is emitted per anchor that
//! has at least one same-class partner.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::networks::EmbeddingBatch;
use crate::scalar::Scalar;
use crate::tensor::euclidean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MinerKind {
    Random,
    Semihard,
    Softhard,
    DistanceWeighted,
}

impl MinerKind {
    pub const ALL: [MinerKind; 4] =
        [MinerKind::Random, MinerKind::Semihard, MinerKind::Softhard, MinerKind::DistanceWeighted];

    pub fn name(self) -> &'static str {
        match self {
            MinerKind::Random => "random",
            MinerKind::Semihard => "semihard",
            MinerKind::Softhard => "softhard",
            MinerKind::DistanceWeighted => "distance_weighted",
        }
    }
}

impl fmt::Display for MinerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MinerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MinerKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Config(format!("unknown miner '{s}'")))
    }
}

/// Index triples `(anchor, positive, negative)` into an embedding batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletBatch {
    pub triples: Vec<(usize, usize, usize)>,
}

impl TripletBatch {
    /// Builds a batch after checking every triple against `labels`.
    pub fn new(triples: Vec<(usize, usize, usize)>, labels: &[usize]) -> Result<Self> {
        let batch = Self { triples };
        batch.validate(labels)?;
        Ok(batch)
    }

    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        for (i, &(a, p, n)) in self.triples.iter().enumerate() {
            let in_range = a < labels.len() && p < labels.len() && n < labels.len();
            if !in_range || a == p || labels[a] != labels[p] || labels[a] == labels[n] {
                return Err(Error::Mining(format!("triplet {i} = ({a}, {p}, {n}) breaks the label contract")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn anchors(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.0).collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.1).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.2).collect()
    }
}

/// Constants of the distance-weighted sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceWeighting {
    /// Upper bound on a weight, relative to the weight at the density mode.
    pub clip: f64,
    pub min_distance: f64,
    pub max_distance: f64,
}

impl Default for DistanceWeighting {
    fn default() -> Self {
        Self { clip: 1e3, min_distance: 0.5, max_distance: 1.4 }
    }
}

impl DistanceWeighting {
    /// `ln q(d)` up to a constant, for points uniform on the unit sphere in
    /// `dim` dimensions, after clamping `d`.
    fn log_density(&self, d: f64, dim: usize) -> f64 {
        let d = d.clamp(self.min_distance, self.max_distance);
        let n = dim as f64;
        (n - 2.0) * d.ln() + 0.5 * (n - 3.0) * (1.0 - 0.25 * d * d).ln()
    }

    /// Unnormalized sampling weights `min(clip, q(d*)/q(d))` where `d*` is
    /// the clamped mode of `q`.
    pub fn weights(&self, distances: &[f64], dim: usize) -> Vec<f64> {
        let n = dim as f64;
        let mode = if dim > 2 { (4.0 * (n - 2.0) / (2.0 * n - 5.0)).sqrt() } else { self.max_distance };
        let log_ref = self.log_density(mode, dim);
        let log_clip = self.clip.ln();
        let logs: Vec<f64> = distances.iter().map(|&d| (log_ref - self.log_density(d, dim)).min(log_clip)).collect();
        logs.iter().map(|&l| l.exp()).collect()
    }
}

/// Samples an index with probability proportional to `weights`.
fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

fn pick<R: Rng + ?Sized>(items: &[usize], rng: &mut R) -> usize {
    items[rng.random_range(0..items.len())]
}

/// Mines one triplet per usable anchor with default distance-weighting
/// constants.
pub fn mine<S: Scalar, R: Rng + ?Sized>(
    kind: MinerKind,
    batch: &EmbeddingBatch<S>,
    margin: f64,
    rng: &mut R,
) -> Result<TripletBatch> {
    Miner { kind, margin, weighting: DistanceWeighting::default() }.mine(batch, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Miner {
    pub kind: MinerKind,
    pub margin: f64,
    pub weighting: DistanceWeighting,
}

impl Miner {
    pub fn mine<S: Scalar, R: Rng + ?Sized>(&self, batch: &EmbeddingBatch<S>, rng: &mut R) -> Result<TripletBatch> {
        let labels = &batch.labels;
        let n = labels.len();
        let mut classes: Vec<usize> = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Mining(format!("batch has {} class(es), need at least 2", classes.len())));
        }
        let x = &batch.embeddings;
        let dist = |i: usize, j: usize| euclidean(x.row(i), x.row(j)).as_f64();

        let mut triples = Vec::new();
        for a in 0..n {
            let positives: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
            if positives.is_empty() {
                continue;
            }
            let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
            let (p, neg) = match self.kind {
                MinerKind::Random => (pick(&positives, rng), pick(&negatives, rng)),
                MinerKind::Semihard => {
                    let p = pick(&positives, rng);
                    (p, self.semihard(dist(a, p), &negatives, |j| dist(a, j), rng))
                }
                MinerKind::Softhard => self.softhard(&positives, &negatives, |j| dist(a, j), rng),
                MinerKind::DistanceWeighted => {
                    let d: Vec<f64> = negatives.iter().map(|&j| dist(a, j)).collect();
                    let w = self.weighting.weights(&d, x.cols());
                    (pick(&positives, rng), negatives[sample_weighted(&w, rng)])
                }
            };
            triples.push((a, p, neg));
        }
        if triples.is_empty() {
            return Err(Error::Mining(format!(
                "no anchor has a positive: every class in {classes:?} has a single sample"
            )));
        }
        Ok(TripletBatch { triples })
    }

    fn semihard<R: Rng + ?Sized>(
        &self,
        d_ap: f64,
        negatives: &[usize],
        d_an: impl Fn(usize) -> f64,
        rng: &mut R,
    ) -> usize {
        let window: Vec<usize> =
            negatives.iter().copied().filter(|&j| d_an(j) > d_ap && d_an(j) < d_ap + self.margin).collect();
        if !window.is_empty() {
            return pick(&window, rng);
        }
        let easiest =
            negatives.iter().copied().filter(|&j| d_an(j) > d_ap).fold(None, |best: Option<usize>, j| match best {
                Some(b) if d_an(b) >= d_an(j) => Some(b),
                _ => Some(j),
            });
        easiest.unwrap_or_else(|| pick(negatives, rng))
    }

    /// Positive from the farther half of the anchor's class; negative among
    /// those closer than that half's hardest member, skipping the closest
    /// negative overall.
    fn softhard<R: Rng + ?Sized>(
        &self,
        positives: &[usize],
        negatives: &[usize],
        d: impl Fn(usize) -> f64,
        rng: &mut R,
    ) -> (usize, usize) {
        let mut by_dist = positives.to_vec();
        by_dist.sort_by(|&i, &j| d(j).total_cmp(&d(i)).then(i.cmp(&j)));
        let harder = &by_dist[..by_dist.len().div_ceil(2)];
        let p = pick(harder, rng);
        let hardest_pos = d(by_dist[0]);

        let closest = negatives
            .iter()
            .copied()
            .min_by(|&i, &j| d(i).total_cmp(&d(j)).then(i.cmp(&j)))
            .expect("negatives are non-empty");
        let inside: Vec<usize> = negatives.iter().copied().filter(|&j| d(j) < hardest_pos).collect();
        let moderate: Vec<usize> = inside.iter().copied().filter(|&j| j != closest).collect();
        let n = if !moderate.is_empty() {
            pick(&moderate, rng)
        } else if !inside.is_empty() {
            closest
        } else {
            pick(negatives, rng)
        };
        (p, n)
    }
}
