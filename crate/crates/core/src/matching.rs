//! Mask similarity and one-to-one assignment of prediction slots to
//! ground-truth masks.

use crate::config::SimilarityMode;
use crate::error::{Error, Result};

/// Smoothing term that keeps Dice defined on empty masks.
pub const DICE_EPS: f64 = 1e-6;

/// `2 * sum(m * m_hat) / (sum(m) + sum(m_hat) + eps)`.
pub fn dice(m: &[f64], m_hat: &[f64]) -> Result<f64> {
    if m.len() != m_hat.len() {
        return Err(Error::Dimension(format!("dice: mask lengths {} and {}", m.len(), m_hat.len())));
    }
    let (mut inter, mut a, mut b) = (0.0, 0.0, 0.0);
    for (&x, &y) in m.iter().zip(m_hat) {
        inter += x * y;
        a += x;
        b += y;
    }
    Ok(2.0 * inter / (a + b + DICE_EPS))
}

/// Similarity of one ground-truth mask of class `class` to one prediction.
pub fn mask_similarity(m: &[f64], class: usize, m_hat: &[f64], p_hat: &[f64]) -> Result<f64> {
    let p = *p_hat
        .get(class)
        .ok_or_else(|| Error::Contract(format!("class {class} outside distribution of length {}", p_hat.len())))?;
    Ok(p * dice(m, m_hat)?)
}

/// Combines class probability and Dice under the chosen mode.
pub fn combine(p: f64, dice: f64, mode: SimilarityMode) -> f64 {
    match mode {
        SimilarityMode::Product => p * dice,
        SimilarityMode::Sum => 0.5 * (p + dice),
    }
}

/// Dice between every ground-truth mask (`gt[K][P]`) and every predicted mask
/// (`pred[N][P]`), as a `K x N` table.
pub fn dice_table(gt: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let sums: Vec<f64> = pred.iter().map(|m| m.iter().sum()).collect();
    gt.iter()
        .map(|m| {
            let area: f64 = m.iter().sum();
            pred.iter()
                .zip(&sums)
                .map(|(mh, &s)| {
                    if mh.len() != m.len() {
                        return Err(Error::Dimension(format!("dice: mask lengths {} and {}", m.len(), mh.len())));
                    }
                    let inter: f64 = m.iter().zip(mh).filter(|(&a, _)| a != 0.0).map(|(a, b)| a * b).sum();
                    Ok(2.0 * inter / (area + s + DICE_EPS))
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    /// `(gt index, slot index)` in ground-truth order.
    pub pairs: Vec<(usize, usize)>,
    pub similarities: Vec<f64>,
    /// Unmatched slots, ascending.
    pub negatives: Vec<usize>,
}

impl MatchAssignment {
    pub fn total(&self) -> f64 {
        self.similarities.iter().sum()
    }

    /// Slot matched to each ground-truth index.
    pub fn slot_of(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| p.1)
    }
}

/// Maximum-similarity injective assignment of rows (ground truth) to columns
/// (slots). Among optimal assignments the lexicographically smallest
/// sequence of column indices is returned.
pub fn hungarian_match(sim: &[Vec<f64>]) -> Result<MatchAssignment> {
    let k = sim.len();
    let n = sim.first().map_or(0, Vec::len);
    if sim.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("similarity rows differ in length".into()));
    }
    if k > n {
        return Err(Error::Contract(format!("{k} ground-truth masks exceed {n} slots")));
    }
    if sim.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Contract("similarity matrix has non-finite entries".into()));
    }
    let all_rows: Vec<usize> = (0..k).collect();
    let mut free: Vec<usize> = (0..n).collect();
    let best = optimum(sim, &all_rows, &free);
    // Only rounding from summing k terms in different orders counts as a tie.
    let tol = 4.0 * (k as f64 + 1.0) * f64::EPSILON * (1.0 + best.abs());

    let mut pairs = Vec::with_capacity(k);
    let mut fixed = 0.0;
    for i in 0..k {
        let rest_rows = &all_rows[i + 1..];
        let mut chosen = None;
        for (pos, &j) in free.iter().enumerate() {
            let others: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let rest = optimum(sim, rest_rows, &others);
            if fixed + sim[i][j] + rest >= best - tol {
                chosen = Some(pos);
                break;
            }
        }
        // The optimum is always completable; fall back to the solver's own
        // choice only if rounding defeats every candidate.
        let pos = chosen.unwrap_or_else(|| {
            let cols = solve(sim, &all_rows[i..], &free);
            free.iter().position(|&c| c == cols[0]).expect("solver returns a free column")
        });
        let j = free.remove(pos);
        fixed += sim[i][j];
        pairs.push((i, j));
    }
    let similarities = pairs.iter().map(|&(i, j)| sim[i][j]).collect();
    Ok(MatchAssignment { pairs, similarities, negatives: free })
}

/// Optimal total over the given rows and columns (rows <= columns).
fn optimum(sim: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    solve(sim, rows, cols).iter().zip(rows).map(|(&c, &r)| sim[r][c]).sum()
}

/// Column chosen for each row by a maximum-total assignment.
fn solve(sim: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    let max = rows.iter().flat_map(|&r| cols.iter().map(move |&c| sim[r][c])).fold(f64::NEG_INFINITY, f64::max);
    let cost = |i: usize, j: usize| max - sim[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}
