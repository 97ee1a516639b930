//! Retrieval and clustering metrics over labelled embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::networks::EmbeddingBatch;
use crate::scalar::Scalar;
use crate::tensor::{sq_euclidean, Tensor};

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_RESTARTS: usize = 10;

/// Full pairwise Euclidean distance matrix, row-major.
pub fn pairwise_distances<S: Scalar>(x: &Tensor<S>) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_euclidean(x.row(i), x.row(j)).as_f64().sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Per query, the other samples ordered by ascending distance and then by
/// index, with relevance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRetrieval {
    pub rankings: Vec<Vec<usize>>,
    pub relevance: Vec<Vec<bool>>,
}

impl RankedRetrieval {
    pub fn from_distances(distances: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let n = labels.len();
        if distances.len() != n || distances.iter().any(|r| r.len() != n) {
            return Err(Error::dim("ranked_retrieval", format!("distance matrix is not {n}x{n}")));
        }
        let mut rankings = Vec::with_capacity(n);
        let mut relevance = Vec::with_capacity(n);
        for q in 0..n {
            let mut gallery: Vec<usize> = (0..n).filter(|&j| j != q).collect();
            gallery.sort_by(|&a, &b| distances[q][a].total_cmp(&distances[q][b]).then(a.cmp(&b)));
            relevance.push(gallery.iter().map(|&j| labels[j] == labels[q]).collect());
            rankings.push(gallery);
        }
        Ok(Self { rankings, relevance })
    }

    pub fn from_embeddings<S: Scalar>(emb: &EmbeddingBatch<S>) -> Result<Self> {
        Self::from_distances(&pairwise_distances(&emb.embeddings), &emb.labels)
    }

    pub fn queries(&self) -> usize {
        self.rankings.len()
    }

    pub fn gallery_size(&self) -> usize {
        self.rankings.first().map_or(0, Vec::len)
    }

    pub fn recall_at_k(&self, ks: &[usize]) -> Result<Vec<f64>> {
        if ks.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract(format!("ks must be ascending, got {ks:?}")));
        }
        let gallery = self.gallery_size();
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= gallery) {
            return Err(Error::contract(format!("K = {k} is outside [1, gallery size {gallery})")));
        }
        let n = self.queries() as f64;
        Ok(ks
            .iter()
            .map(|&k| self.relevance.iter().filter(|rel| rel[..k].iter().any(|&r| r)).count() as f64 / n)
            .collect())
    }
}

pub fn recall_at_k<S: Scalar>(emb: &EmbeddingBatch<S>, ks: &[usize]) -> Result<Vec<f64>> {
    RankedRetrieval::from_embeddings(emb)?.recall_at_k(ks)
}

/// Mean over relevant items of the precision at their rank. Zero when the
/// query has no relevant item.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn mean_average_precision(ret: &RankedRetrieval) -> Result<f64> {
    if ret.queries() == 0 || ret.gallery_size() == 0 {
        return Err(Error::contract("mAP needs a non-empty gallery"));
    }
    Ok(ret.relevance.iter().map(|r| average_precision(r)).sum::<f64>() / ret.queries() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub k: usize,
    pub inertia: f64,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_euclidean(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_once(x: &Tensor<f64>, k: usize, rng: &mut ChaCha8Rng) -> Clustering {
    let n = x.rows();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![x.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_euclidean(x.row(i), x.row(first))).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            if pick == n {
                d2.iter().rposition(|&w| w > 0.0).expect("total > 0")
            } else {
                pick
            }
        } else {
            // Every point coincides with a centroid; take any unused one.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        centroids.push(x.row(next).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_euclidean(x.row(i), x.row(next)));
        }
    }

    let mut assignment: Vec<usize> = (0..n).map(|i| nearest(x.row(i), &centroids).0).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![vec![0.0; x.cols()]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(x.row(i), &centroids).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let inertia = (0..n).map(|i| sq_euclidean(x.row(i), &centroids[assignment[i]])).sum();
    Clustering { assignment, k, inertia }
}

/// Lloyd iterations from k-means++ seeding, best of `restarts` by inertia.
pub fn kmeans_restarts<S: Scalar>(x: &Tensor<S>, k: usize, restarts: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || k > x.rows() {
        return Err(Error::contract(format!("k = {k} with {} points", x.rows())));
    }
    let x = x.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts.max(1) {
        let c = kmeans_once(&x, k, &mut rng);
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn kmeans<S: Scalar>(emb: &EmbeddingBatch<S>, k: usize, seed: u64) -> Result<Clustering> {
    kmeans_restarts(&emb.embeddings, k, KMEANS_RESTARTS, seed)
}

fn check_lengths(clustering: &Clustering, labels: &[usize]) -> Result<()> {
    if clustering.assignment.len() != labels.len() {
        return Err(Error::dim(
            "clustering_metric",
            format!("{} assignments vs {} labels", clustering.assignment.len(), labels.len()),
        ));
    }
    Ok(())
}

struct Contingency {
    joint: BTreeMap<(usize, usize), usize>,
    by_cluster: BTreeMap<usize, usize>,
    by_label: BTreeMap<usize, usize>,
}

impl Contingency {
    fn count(clustering: &Clustering, labels: &[usize]) -> Self {
        let mut t = Self { joint: BTreeMap::new(), by_cluster: BTreeMap::new(), by_label: BTreeMap::new() };
        for (&c, &l) in clustering.assignment.iter().zip(labels) {
            *t.joint.entry((c, l)).or_default() += 1;
            *t.by_cluster.entry(c).or_default() += 1;
            *t.by_label.entry(l).or_default() += 1;
        }
        t
    }
}

fn pairs<'a>(counts: impl Iterator<Item = &'a usize>) -> f64 {
    counts.map(|&c| c * c.saturating_sub(1) / 2).sum::<usize>() as f64
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// `2·I(Ω; ℂ) / (H(Ω) + H(ℂ))`; 1 when both partitions are trivial.
pub fn nmi(clustering: &Clustering, labels: &[usize]) -> Result<f64> {
    check_lengths(clustering, labels)?;
    let n = labels.len() as f64;
    if labels.is_empty() {
        return Err(Error::contract("nmi of an empty sample"));
    }
    let Contingency { joint, by_cluster, by_label } = Contingency::count(clustering, labels);
    let h_c = entropy(by_cluster.values().copied(), n);
    let h_l = entropy(by_label.values().copied(), n);
    if h_c + h_l == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(c, l), &j)| {
            let pj = j as f64 / n;
            pj * (pj * n * n / (by_cluster[&c] as f64 * by_label[&l] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (h_c + h_l)).clamp(0.0, 1.0))
}

/// Pairwise precision/recall F1 over all unordered sample pairs.
pub fn f1_pairwise(clustering: &Clustering, labels: &[usize]) -> Result<f64> {
    check_lengths(clustering, labels)?;
    let Contingency { joint, by_cluster, by_label } = Contingency::count(clustering, labels);
    let tp = pairs(joint.values());
    let same_cluster = pairs(by_cluster.values());
    let same_label = pairs(by_label.values());
    let precision = if same_cluster > 0.0 { tp / same_cluster } else { 0.0 };
    let recall = if same_label > 0.0 { tp / same_label } else { 0.0 };
    Ok(if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::dim("spearman", format!("lengths {} and {}", x.len(), y.len())));
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut num, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        sx += (a - mean) * (a - mean);
        sy += (b - mean) * (b - mean);
    }
    if sx == 0.0 || sy == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (sx * sy).sqrt())
}

/// Retrieval and clustering scores of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub recall: Vec<(usize, f64)>,
    pub map: f64,
    pub nmi: f64,
    pub f1: f64,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v)
    }
}

/// All metrics on one embedding set. Clustering uses one cluster per
/// distinct label.
pub fn evaluate<S: Scalar>(emb: &EmbeddingBatch<S>, ks: &[usize], seed: u64) -> Result<MetricsReport> {
    let ret = RankedRetrieval::from_embeddings(emb)?;
    let recalls = ret.recall_at_k(ks)?;
    let map = mean_average_precision(&ret)?;
    let mut classes = emb.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let clustering = kmeans(emb, classes.len(), seed)?;
    Ok(MetricsReport {
        recall: ks.iter().copied().zip(recalls).collect(),
        map,
        nmi: nmi(&clustering, &emb.labels)?,
        f1: f1_pairwise(&clustering, &emb.labels)?,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.recall {
            writeln!(f, "recall@{k}={v:.6}")?;
        }
        writeln!(f, "map={:.6}", self.map)?;
        writeln!(f, "nmi={:.6}", self.nmi)?;
        writeln!(f, "f1={:.6}", self.f1)
    }
}

impl FromStr for MetricsReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut recall = Vec::new();
        let (mut map, mut nmi, mut f1) = (None, None, None);
        for (i, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::ParseLine { line: i + 1, message: m.to_string() };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value"))?;
            let value: f64 = value.parse().map_err(|_| err("value is not a number"))?;
            match key {
                "map" => map = Some(value),
                "nmi" => nmi = Some(value),
                "f1" => f1 = Some(value),
                _ => {
                    let k =
                        key.strip_prefix("recall@").and_then(|k| k.parse().ok()).ok_or_else(|| err("unknown key"))?;
                    recall.push((k, value));
                }
            }
        }
        let missing = |k: &str| Error::ParseLine { line: 0, message: format!("missing key {k}") };
        Ok(Self {
            recall,
            map: map.ok_or_else(|| missing("map"))?,
            nmi: nmi.ok_or_else(|| missing("nmi"))?,
            f1: f1.ok_or_else(|| missing("f1"))?,
        })
    }
}
