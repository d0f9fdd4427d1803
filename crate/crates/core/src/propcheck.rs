//! Cluster-count bounds after fusion, and a brute-force verifier over
//! idealized encoders.
//!
//! Each view sees the `k` ground-truth clusters through a partition: clusters
//! in the same cell are coincident in that view. An encoder labels the cells
//! of each view with representation ids; a fused cluster is identified by the
//! tuple of its ids across views.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};

/// Largest `k` accepted by the brute-force search.
pub const MAX_BRUTE_K: usize = 6;
/// Largest view count accepted by the brute-force search.
pub const MAX_BRUTE_VIEWS: usize = 3;

/// Partitions of clusters `0..k`, one per view.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ViewPartitions {
    pub k: usize,
    /// `cells[v][c]`: cell index of cluster `c` in view `v`; cells are
    /// numbered in order of first appearance.
    pub cells: Vec<Vec<usize>>,
}

impl ViewPartitions {
    /// From explicit cell lists (0-based clusters).
    pub fn from_blocks(k: usize, views: &[Vec<Vec<usize>>]) -> Result<Self> {
        let mut cells = Vec::with_capacity(views.len());
        for (v, blocks) in views.iter().enumerate() {
            let mut of = vec![usize::MAX; k];
            for (b, block) in blocks.iter().enumerate() {
                if block.is_empty() {
                    return Err(Error::usage(format!("view {v}: empty cell")));
                }
                for &c in block {
                    if c >= k || of[c] != usize::MAX {
                        return Err(Error::usage(format!(
                            "view {v}: cluster {c} out of range or repeated"
                        )));
                    }
                    of[c] = b;
                }
            }
            if of.contains(&usize::MAX) {
                return Err(Error::usage(format!("view {v}: cells do not cover all clusters")));
            }
            cells.push(of);
        }
        Self::from_assignments(k, cells)
    }

    /// From per-view cluster-to-cell maps with arbitrary cell labels.
    pub fn from_assignments(k: usize, views: Vec<Vec<usize>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::usage("k must be positive"));
        }
        if views.is_empty() {
            return Err(Error::usage("at least one view is required"));
        }
        let mut cells = Vec::with_capacity(views.len());
        for (v, a) in views.into_iter().enumerate() {
            if a.len() != k {
                return Err(Error::usage(format!(
                    "view {v} assigns {} clusters, expected {k}",
                    a.len()
                )));
            }
            cells.push(canonical(&a));
        }
        Ok(ViewPartitions { k, cells })
    }

    /// The five-cluster toy: {1,2,3}{4,5} and {1}{2,4}{3,5}.
    pub fn toy5() -> Self {
        Self::from_blocks(
            5,
            &[
                vec![vec![0, 1, 2], vec![3, 4]],
                vec![vec![0], vec![1, 3], vec![2, 4]],
            ],
        )
        .expect("valid partitions")
    }

    /// The three-cluster toy: {1}{2,3} and {1,2}{3}.
    pub fn toy3() -> Self {
        Self::from_blocks(3, &[vec![vec![0], vec![1, 2]], vec![vec![0, 1], vec![2]]])
            .expect("valid partitions")
    }

    pub fn n_views(&self) -> usize {
        self.cells.len()
    }

    /// Cells per view.
    pub fn counts(&self) -> Vec<usize> {
        self.cells
            .iter()
            .map(|a| a.iter().max().map_or(0, |m| m + 1))
            .collect()
    }

    /// Size of the coarsest common refinement.
    pub fn meet_size(&self) -> usize {
        let tuples: HashSet<Vec<usize>> = (0..self.k)
            .map(|c| self.cells.iter().map(|a| a[c]).collect())
            .collect();
        tuples.len()
    }

    /// Cluster lists of each cell of view `v`.
    pub fn blocks(&self, v: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.counts()[v]];
        for (c, &cell) in self.cells[v].iter().enumerate() {
            out[cell].push(c);
        }
        out
    }
}

/// Relabels so that labels appear in increasing order of first use.
fn canonical(a: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    a.iter()
        .map(|&x| match map.iter().find(|(from, _)| *from == x) {
            Some(&(_, to)) => to,
            None => {
                let to = map.len();
                map.push((x, to));
                to
            }
        })
        .collect()
}

fn check_counts(k: usize, kv: &[usize]) -> Result<()> {
    if kv.is_empty() {
        return Err(Error::usage("cluster counts per view must be non-empty"));
    }
    if let Some(&bad) = kv.iter().find(|&&c| c == 0 || c > k) {
        return Err(Error::usage(format!("per-view count {bad} outside 1..={k}")));
    }
    Ok(())
}

/// `min(k, (min_v k_v)^V)`.
pub fn kappa_aligned(k: usize, kv: &[usize]) -> Result<usize> {
    check_counts(k, kv)?;
    let smallest = *kv.iter().min().expect("non-empty");
    let mut p = 1usize;
    for _ in 0..kv.len() {
        p = p.saturating_mul(smallest);
    }
    Ok(k.min(p))
}

/// `min(k, prod_v k_v)`.
pub fn kappa_unaligned(k: usize, kv: &[usize]) -> Result<usize> {
    check_counts(k, kv)?;
    Ok(k.min(kv.iter().fold(1usize, |p, &c| p.saturating_mul(c))))
}

/// Restricted growth strings of length `n`: one per set partition of `0..n`.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, n: usize, max: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        let limit = if cur.is_empty() { 0 } else { max + 1 };
        for x in 0..=limit {
            cur.push(x);
            rec(cur, n, max.max(x), out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), n, 0, &mut out);
    out
}

/// Best achievable fused cluster count and one labeling attaining it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BruteForce {
    pub count: usize,
    /// `witness[v][cell]`: representation id given to each cell of view `v`.
    pub witness: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct KappaResult {
    pub kappa_aligned: usize,
    pub kappa_unaligned: usize,
    pub brute_aligned: Option<BruteForce>,
    pub brute_unaligned: Option<BruteForce>,
}

fn distinct_tuples(parts: &ViewPartitions, labels: &[Vec<usize>]) -> usize {
    let tuples: HashSet<Vec<usize>> = (0..parts.k)
        .map(|c| {
            parts
                .cells
                .iter()
                .zip(labels)
                .map(|(a, l)| l[a[c]])
                .collect()
        })
        .collect();
    tuples.len()
}

/// Exhaustive search over encoder labelings.
///
/// Coincident clusters always share an id. With `aligned`, every view must
/// give each id the same number of ground-truth clusters.
pub fn brute_force_kappa(parts: &ViewPartitions, aligned: bool) -> Result<BruteForce> {
    if parts.k > MAX_BRUTE_K || parts.n_views() > MAX_BRUTE_VIEWS {
        return Err(Error::usage(format!(
            "brute force supports k <= {MAX_BRUTE_K} and at most {MAX_BRUTE_VIEWS} views, got k = {} and {} views",
            parts.k,
            parts.n_views()
        )));
    }
    let counts = parts.counts();
    let sizes: Vec<Vec<usize>> = (0..parts.n_views())
        .map(|v| parts.blocks(v).iter().map(Vec::len).collect())
        .collect();
    let mut best = BruteForce {
        count: 0,
        witness: Vec::new(),
    };
    let mut labels: Vec<Vec<usize>> = Vec::with_capacity(parts.n_views());
    // Ids of the first view are only meaningful up to renaming.
    for first in set_partitions(counts[0]) {
        labels.clear();
        labels.push(first.clone());
        if aligned {
            let mut budget = vec![0usize; parts.k];
            for (cell, &id) in first.iter().enumerate() {
                budget[id] += sizes[0][cell];
            }
            search_aligned(parts, &sizes, 1, &budget, &mut labels, &mut best);
        } else {
            search_free(parts, &counts, 1, &mut labels, &mut best);
        }
        if best.count == parts.k {
            break;
        }
    }
    Ok(best)
}

fn record(parts: &ViewPartitions, labels: &[Vec<usize>], best: &mut BruteForce) {
    let n = distinct_tuples(parts, labels);
    if n > best.count {
        best.count = n;
        best.witness = labels.to_vec();
    }
}

fn search_free(
    parts: &ViewPartitions,
    counts: &[usize],
    v: usize,
    labels: &mut Vec<Vec<usize>>,
    best: &mut BruteForce,
) {
    if v == parts.n_views() {
        record(parts, labels, best);
        return;
    }
    // only equality within a view matters when views are not aligned
    for l in set_partitions(counts[v]) {
        labels.push(l);
        search_free(parts, counts, v + 1, labels, best);
        labels.pop();
        if best.count == parts.k {
            return;
        }
    }
}

fn search_aligned(
    parts: &ViewPartitions,
    sizes: &[Vec<usize>],
    v: usize,
    budget: &[usize],
    labels: &mut Vec<Vec<usize>>,
    best: &mut BruteForce,
) {
    if v == parts.n_views() {
        record(parts, labels, best);
        return;
    }
    fn assign(
        parts: &ViewPartitions,
        sizes: &[Vec<usize>],
        v: usize,
        cell: usize,
        remaining: &mut Vec<usize>,
        budget: &[usize],
        cur: &mut Vec<usize>,
        labels: &mut Vec<Vec<usize>>,
        best: &mut BruteForce,
    ) {
        if best.count == parts.k {
            return;
        }
        if cell == sizes[v].len() {
            // budgets are exhausted exactly because sizes sum to k
            labels.push(cur.clone());
            search_aligned(parts, sizes, v + 1, budget, labels, best);
            labels.pop();
            return;
        }
        let s = sizes[v][cell];
        for id in 0..remaining.len() {
            if remaining[id] >= s {
                remaining[id] -= s;
                cur.push(id);
                assign(parts, sizes, v, cell + 1, remaining, budget, cur, labels, best);
                cur.pop();
                remaining[id] += s;
            }
        }
    }
    let mut remaining = budget.to_vec();
    let mut cur = Vec::with_capacity(sizes[v].len());
    assign(parts, sizes, v, 0, &mut remaining, budget, &mut cur, labels, best);
}

/// Formula values next to brute-force counts for one instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PropositionReport {
    pub k: usize,
    pub cells: Vec<Vec<usize>>,
    pub view_counts: Vec<usize>,
    pub formula_aligned: usize,
    pub formula_unaligned: usize,
    pub brute_aligned: BruteForce,
    pub brute_unaligned: BruteForce,
    pub tight_aligned: bool,
    pub tight_unaligned: bool,
}

impl PropositionReport {
    pub fn kappa(&self) -> KappaResult {
        KappaResult {
            kappa_aligned: self.formula_aligned,
            kappa_unaligned: self.formula_unaligned,
            brute_aligned: Some(self.brute_aligned.clone()),
            brute_unaligned: Some(self.brute_unaligned.clone()),
        }
    }
}

/// Checks that brute-force counts never exceed the closed-form bounds.
pub fn verify_proposition(parts: &ViewPartitions) -> Result<PropositionReport> {
    let kv = parts.counts();
    let fa = kappa_aligned(parts.k, &kv)?;
    let fu = kappa_unaligned(parts.k, &kv)?;
    let ba = brute_force_kappa(parts, true)?;
    let bu = brute_force_kappa(parts, false)?;
    if ba.count > fa || bu.count > fu {
        return Err(Error::PropositionViolation(format!(
            "k = {}, cells {:?}: brute force aligned {} vs bound {fa}, unaligned {} vs bound {fu}",
            parts.k, parts.cells, ba.count, bu.count
        )));
    }
    Ok(PropositionReport {
        k: parts.k,
        cells: parts.cells.clone(),
        view_counts: kv,
        formula_aligned: fa,
        formula_unaligned: fu,
        tight_aligned: ba.count == fa,
        tight_unaligned: bu.count == fu,
        brute_aligned: ba,
        brute_unaligned: bu,
    })
}

/// Totals of an exhaustive sweep over all two-view partition pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SweepSummary {
    pub instances: usize,
    pub violations: usize,
    pub tight_aligned: usize,
    pub tight_unaligned: usize,
    /// Instances where unaligned brute force differs from the meet size.
    pub meet_mismatches: usize,
}

/// Every pair of partitions of `0..k` for `k` in `1..=k_max`.
pub fn sweep_two_views(k_max: usize) -> Result<SweepSummary> {
    let mut s = SweepSummary::default();
    for k in 1..=k_max {
        let all = set_partitions(k);
        for a in &all {
            for b in &all {
                let parts = ViewPartitions::from_assignments(k, vec![a.clone(), b.clone()])?;
                s.instances += 1;
                match verify_proposition(&parts) {
                    Ok(r) => {
                        s.tight_aligned += r.tight_aligned as usize;
                        s.tight_unaligned += r.tight_unaligned as usize;
                        if r.brute_unaligned.count != parts.meet_size().min(k) {
                            s.meet_mismatches += 1;
                        }
                    }
                    Err(Error::PropositionViolation(_)) => s.violations += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(s)
}
