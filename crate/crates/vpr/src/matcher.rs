//! Local-feature matching between two images.
//!
//! Matching is deliberately simple: cosine similarity between unit-norm
//! local features, mutual nearest neighbours, and the match count as the
//! re-ranking score. There is no geometric verification stage; the match
//! count alone decides the final order.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::grid::LocalFeatureGrid;

/// Dense pairwise similarity between every query location and every
/// candidate location. `rows` indexes the query grid, `cols` the candidate.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "similarity matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Computes dot products between all location pairs. Features are unit
/// norm, so these are cosine similarities.
pub fn similarity_matrix(
    query: &LocalFeatureGrid,
    candidate: &LocalFeatureGrid,
) -> Result<SimilarityMatrix> {
    if query.channels() != candidate.channels() {
        return Err(Error::shape(format!(
            "feature dimension mismatch: query has {} channels, candidate has {}",
            query.channels(),
            candidate.channels()
        )));
    }
    let rows = query.locations();
    let cols = candidate.locations();
    let dim = query.channels();
    let mut data = vec![0.0; rows * cols];
    similarity_matrix_flat(query.data(), candidate.data(), rows, cols, dim, &mut data);
    SimilarityMatrix::from_vec(rows, cols, data)
}

/// Flat-slice similarity kernel, generic over element precision so the
/// benchmark can compare f32 and f64 matching.
pub fn similarity_matrix_flat<T: Float>(
    query: &[T],
    candidate: &[T],
    rows: usize,
    cols: usize,
    dim: usize,
    out: &mut [T],
) {
    assert_eq!(query.len(), rows * dim);
    assert_eq!(candidate.len(), cols * dim);
    assert_eq!(out.len(), rows * cols);
    for u in 0..rows {
        let qf = &query[u * dim..(u + 1) * dim];
        let row = &mut out[u * cols..(u + 1) * cols];
        for (v, slot) in row.iter_mut().enumerate() {
            let cf = &candidate[v * dim..(v + 1) * dim];
            let mut acc = T::zero();
            for d in 0..dim {
                acc = acc + qf[d] * cf[d];
            }
            *slot = acc;
        }
    }
}

/// One mutual-nearest-neighbour pair: query location `u` matched candidate
/// location `v` with the stored similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub query_loc: usize,
    pub candidate_loc: usize,
    pub similarity: f64,
}

fn argmax_strict<T: Float>(values: impl Iterator<Item = T>) -> usize {
    let mut best_idx = 0;
    let mut best = T::neg_infinity();
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    best_idx
}

/// Finds all pairs (u, v) where v is u's best candidate and u is v's best
/// query, i.e. the pair is each other's nearest neighbour. Ties resolve to
/// the lowest index on both axes, so the result is deterministic.
pub fn mutual_nn_matches(sim: &SimilarityMatrix) -> Vec<Match> {
    let (rows, cols) = (sim.rows(), sim.cols());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let mut col_best = vec![0usize; cols];
    for (v, best) in col_best.iter_mut().enumerate() {
        *best = argmax_strict((0..rows).map(|u| sim.at(u, v)));
    }
    let mut matches = Vec::new();
    for u in 0..rows {
        let v = argmax_strict((0..cols).map(|v| sim.at(u, v)));
        if col_best[v] == u {
            matches.push(Match {
                query_loc: u,
                candidate_loc: v,
                similarity: sim.at(u, v),
            });
        }
    }
    matches
}

/// Counts mutual nearest neighbours directly on a flat similarity matrix
/// without materialising the match list. Used by the benchmark.
pub fn mutual_nn_count_flat<T: Float>(sim: &[T], rows: usize, cols: usize) -> usize {
    assert_eq!(sim.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return 0;
    }
    let mut col_best = vec![0usize; cols];
    for (v, best) in col_best.iter_mut().enumerate() {
        *best = argmax_strict((0..rows).map(|u| sim[u * cols + v]));
    }
    let mut count = 0;
    for u in 0..rows {
        let v = argmax_strict(sim[u * cols..(u + 1) * cols].iter().copied());
        if col_best[v] == u {
            count += 1;
        }
    }
    count
}

/// Re-rank score of a candidate: the number of mutual matches against the
/// query.
pub fn rerank_score(query: &LocalFeatureGrid, candidate: &LocalFeatureGrid) -> Result<usize> {
    let sim = similarity_matrix(query, candidate)?;
    Ok(mutual_nn_matches(&sim).len())
}

/// Orders candidates by descending match count; equal counts fall back to
/// ascending global distance, then to the original candidate order.
pub fn rerank_order(match_counts: &[usize], global_distances: &[f64]) -> Result<Vec<usize>> {
    if match_counts.len() != global_distances.len() {
        return Err(Error::invalid(format!(
            "rerank needs one distance per candidate: {} counts vs {} distances",
            match_counts.len(),
            global_distances.len()
        )));
    }
    let mut order: Vec<usize> = (0..match_counts.len()).collect();
    order.sort_by(|&a, &b| {
        match_counts[b]
            .cmp(&match_counts[a])
            .then(global_distances[a].total_cmp(&global_distances[b]))
    });
    Ok(order)
}
