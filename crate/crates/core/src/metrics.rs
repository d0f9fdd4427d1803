//! Clustering accuracy under optimal label matching, and normalized mutual
//! information.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// NMI normalization recorded next to reported scores.
pub const NMI_NORMALIZATION: &str = "geometric";

/// Counts of (predicted cluster, true class) pairs. Rows are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        check_lengths(pred, truth)?;
        let rows = pred.iter().max().map_or(0, |m| m + 1);
        let cols = truth.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0; rows * cols];
        for (&p, &t) in pred.iter().zip(truth) {
            counts[p * cols + t] += 1;
        }
        Ok(ConfusionMatrix { rows, cols, counts })
    }

    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.counts[r * self.cols + c]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::usage(format!(
            "label vectors differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::usage("label vectors are empty"));
    }
    Ok(())
}

/// Optimal assignment on a square (padded) cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `cols[r]` is the column matched to padded row `r`.
    pub cols: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching.
///
/// Rectangular inputs are padded with zero-cost rows or columns. Among all
/// optimal matchings, the lexicographically smallest column sequence is
/// returned.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    if cost.ndim() != 2 {
        return Err(Error::shape(format!("cost matrix must be 2-D, got {:?}", cost.shape())));
    }
    if !cost.all_finite() {
        return Err(Error::domain("cost matrix contains non-finite entries"));
    }
    let (r, c) = (cost.rows(), cost.cols());
    let n = r.max(c);
    let mut sq = vec![0.0; n * n];
    for i in 0..r {
        for j in 0..c {
            sq[i * n + j] = cost.at(i, j);
        }
    }
    if n == 0 {
        return Ok(Assignment {
            cols: Vec::new(),
            cost: 0.0,
        });
    }

    let best = solve(&sq, n).1;
    let scale = 1.0 + sq.iter().fold(0.0f64, |m, x| m.max(x.abs())) * n as f64;
    let tol = 1e-9 * scale;

    // Fix rows in order to the smallest column that keeps the optimum reachable.
    let mut cols = Vec::with_capacity(n);
    let mut used = vec![false; n];
    let mut fixed_cost = 0.0;
    for row in 0..n {
        let free_rows: Vec<usize> = (row + 1..n).collect();
        let mut chosen = None;
        for col in (0..n).filter(|&j| !used[j]) {
            let free_cols: Vec<usize> = (0..n).filter(|&j| !used[j] && j != col).collect();
            let m = free_rows.len();
            let mut sub = Vec::with_capacity(m * m);
            for &i in &free_rows {
                for &j in &free_cols {
                    sub.push(sq[i * n + j]);
                }
            }
            let rest = if m == 0 { 0.0 } else { solve(&sub, m).1 };
            let here = fixed_cost + sq[row * n + col] + rest;
            if here <= best + tol {
                chosen = Some(col);
                break;
            }
        }
        let col = chosen.expect("some column always attains the optimum");
        used[col] = true;
        fixed_cost += sq[row * n + col];
        cols.push(col);
    }
    Ok(Assignment {
        cols,
        cost: fixed_cost,
    })
}

/// Potential-based O(n^3) assignment. Returns (row -> col, cost).
fn solve(a: &[f64], n: usize) -> (Vec<usize>, f64) {
    // 1-based arrays; column 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
            for j in 0..=n {
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
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    let cost = (0..n).map(|i| a[i * n + row_to_col[i]]).sum();
    (row_to_col, cost)
}

/// Fraction of objects correctly labeled under the best injective
/// cluster-to-class matching.
pub fn acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let cm = ConfusionMatrix::new(pred, truth)?;
    let cost = Tensor::new(
        vec![cm.rows, cm.cols],
        cm.counts.iter().map(|&c| -(c as f64)).collect(),
    )?;
    let a = hungarian(&cost)?;
    let matched: u64 = a
        .cols
        .iter()
        .enumerate()
        .filter(|&(r, &c)| r < cm.rows && c < cm.cols)
        .map(|(r, &c)| cm.get(r, c))
        .sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the geometric mean of the two entropies
/// (natural log). Two single-cluster partitions score 1; a single-cluster
/// partition against anything else scores 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let cm = ConfusionMatrix::new(pred, truth)?;
    let n = pred.len() as f64;
    let row_sums: Vec<u64> = (0..cm.rows)
        .map(|r| (0..cm.cols).map(|c| cm.get(r, c)).sum())
        .collect();
    let col_sums: Vec<u64> = (0..cm.cols)
        .map(|c| (0..cm.rows).map(|r| cm.get(r, c)).sum())
        .collect();
    let hp = entropy(&row_sums, n);
    let ht = entropy(&col_sums, n);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for r in 0..cm.rows {
        for c in 0..cm.cols {
            let nij = cm.get(r, c);
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            mi += nij / n * (n * nij / (row_sums[r] as f64 * col_sums[c] as f64)).ln();
        }
    }
    Ok((mi / (hp * ht).sqrt()).clamp(0.0, 1.0))
}
