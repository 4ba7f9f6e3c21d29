//! Dynamic time warping with cosine frame distance.
//!
//! Steps are `(1,0)`, `(0,1)` and `(1,1)` with unit weight, both endpoints are
//! pinned, and the accumulated cost of the best path is divided by the number
//! of cells on that path. Among equal-cost paths the shortest wins.

use crate::corpus::FrameSlice;
use crate::error::{Error, Result};

/// Path-length-normalized alignment cost, in `[0, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DtwCost(pub f64);

impl DtwCost {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine distance from a precomputed dot product and norms. A zero vector is
/// at distance 1 from everything. Rounding residue around parallel vectors is
/// snapped to exactly 0.
#[inline]
pub fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    let denom = norm_a * norm_b;
    if denom == 0.0 {
        return 1.0;
    }
    let d = 1.0 - dot / denom;
    if d < PARALLEL_EPS {
        0.0
    } else {
        d.min(2.0)
    }
}

const PARALLEL_EPS: f64 = 1e-12;

/// `1 - a.b / (|a||b|)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    cosine_from_parts(dot(a, b), norm(a), norm(b))
}

/// Pairwise cosine distances between the rows of `a` and the rows of `b`,
/// row-major `a.len() x b.len()`.
pub fn distance_matrix(a: FrameSlice<'_>, b: FrameSlice<'_>) -> Vec<f64> {
    let b_norms: Vec<f64> = b.rows().map(norm).collect();
    let mut out = Vec::with_capacity(a.len() * b.len());
    for ra in a.rows() {
        let na = norm(ra);
        for (rb, &nb) in b.rows().zip(&b_norms) {
            out.push(cosine_from_parts(dot(ra, rb), na, nb));
        }
    }
    out
}

/// Accumulated `(cost, path cells)`; compared lexicographically.
#[derive(Clone, Copy)]
struct Cell {
    cost: f64,
    len: u32,
}

#[inline]
fn better(a: Cell, b: Cell) -> Cell {
    if b.cost < a.cost || (b.cost == a.cost && b.len < a.len) {
        b
    } else {
        a
    }
}

/// Runs the DP over a row-major `rows x cols` distance matrix and, for every
/// query prefix length `i + 1`, writes the normalized cost of aligning that
/// prefix to the whole reference into `out[i]`.
pub fn prefix_costs(dist: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    assert!(rows > 0 && cols > 0 && dist.len() >= rows * cols && out.len() >= rows);
    let mut prev = vec![Cell { cost: 0.0, len: 0 }; cols];
    let mut cur = prev.clone();
    for i in 0..rows {
        let row = &dist[i * cols..(i + 1) * cols];
        for j in 0..cols {
            let c = row[j];
            let best = match (i, j) {
                (0, 0) => Cell { cost: 0.0, len: 0 },
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => better(better(prev[j - 1], prev[j]), cur[j - 1]),
            };
            cur[j] = Cell {
                cost: best.cost + c,
                len: best.len + 1,
            };
        }
        let last = cur[cols - 1];
        out[i] = last.cost / f64::from(last.len);
        std::mem::swap(&mut prev, &mut cur);
    }
}

/// Normalized DTW cost between two non-empty frame runs.
pub fn dtw_cost(a: FrameSlice<'_>, b: FrameSlice<'_>) -> Result<DtwCost> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Format("dtw needs non-empty sequences".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Format(format!(
            "dtw dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dist = distance_matrix(a, b);
    let mut out = vec![0.0; a.len()];
    prefix_costs(&dist, a.len(), b.len(), &mut out);
    Ok(DtwCost(out[a.len() - 1]))
}
