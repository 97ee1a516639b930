//! Brute-force retrieval metrics written from their definitions, sharing
//! no code with the library.

/// 1-based rank of gallery item `j` for query `q`: one plus the number of
/// other items that are closer, or equally close with a smaller index.
fn rank(d: &[Vec<f64>], q: usize, j: usize) -> usize {
    1 + (0..d.len()).filter(|&i| i != q && i != j && (d[q][i] < d[q][j] || (d[q][i] == d[q][j] && i < j))).count()
}

pub fn recall_at(d: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let hits = (0..n).filter(|&q| (0..n).any(|j| j != q && labels[j] == labels[q] && rank(d, q, j) <= k)).count();
    hits as f64 / n as f64
}

/// Precision at each relevant item's rank, averaged over relevant items
/// (accumulated in rank order), then over queries.
pub fn mean_ap(d: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for q in 0..n {
        let mut relevant_ranks: Vec<usize> =
            (0..n).filter(|&j| j != q && labels[j] == labels[q]).map(|j| rank(d, q, j)).collect();
        relevant_ranks.sort_unstable();
        let mut sum = 0.0;
        for (seen, &r) in relevant_ranks.iter().enumerate() {
            sum += (seen + 1) as f64 / r as f64;
        }
        if !relevant_ranks.is_empty() {
            total += sum / relevant_ranks.len() as f64;
        }
    }
    total / n as f64
}
