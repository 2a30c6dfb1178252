//! Exact k-nearest-neighbor search under L2.
//!
//! Neighbors are ordered by `(distance, index)`, so ties resolve to the lower
//! bank index in both the fast search and the brute-force oracle.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance, or `None` once the running sum exceeds `bound`.
fn bounded_squared_distance(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    let mut acc = 0.0;
    for (xs, ys) in a.chunks(8).zip(b.chunks(8)) {
        for (x, y) in xs.iter().zip(ys) {
            acc += (x - y) * (x - y);
        }
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

/// The `k` nearest of `candidates` (indices into the row-major `vectors`
/// of width `dim`) to `query`, with partial-distance early exit.
pub fn knn_exact(vectors: &[f64], dim: usize, candidates: &[usize], query: &[f64], k: usize) -> Vec<Neighbor> {
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    // Sorted ascending by (squared distance, index); at most k entries.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for &i in candidates {
        let bound = if best.len() == k { best[k - 1].0 } else { f64::INFINITY };
        let Some(d) = bounded_squared_distance(&vectors[i * dim..(i + 1) * dim], query, bound) else {
            continue;
        };
        if best.len() == k && (d, i) >= best[k - 1] {
            continue;
        }
        let pos = best.partition_point(|e| *e < (d, i));
        best.insert(pos, (d, i));
        best.truncate(k);
    }
    best.into_iter()
        .map(|(d, index)| Neighbor {
            index,
            distance: d.sqrt(),
        })
        .collect()
}

/// All-pairs oracle: every distance computed, fully sorted.
pub fn knn_brute_force(vectors: &[f64], dim: usize, candidates: &[usize], query: &[f64], k: usize) -> Vec<Neighbor> {
    let mut all: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| (squared_distance(&vectors[i * dim..(i + 1) * dim], query), i))
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    all.into_iter()
        .take(k)
        .map(|(d, index)| Neighbor {
            index,
            distance: d.sqrt(),
        })
        .collect()
}
