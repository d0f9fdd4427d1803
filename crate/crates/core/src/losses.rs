//! Clustering and contrastive losses.
//!
//! The clustering loss is the three-term divergence-based objective on the
//! soft assignments `alpha` and the hidden representation `h`:
//!
//! * `L1`: Cauchy-Schwarz style ratio of between-cluster to within-cluster
//!   kernel mass, averaged over cluster pairs.
//! * `L2`: mean inner product between assignment vectors of different objects.
//! * `L3`: the `L1` ratio evaluated on the simplex affinities
//!   `m_ij = exp(-||alpha_i - e_j||^2)`.
//!
//! The contrastive loss compares cosine similarities between views of the same
//! object (positives) with similarities to objects assigned to other clusters
//! (negatives). It is scaled by `delta` and by the detached minimum fusion weight.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to `sqrt(a_i^T K a_i * a_j^T K a_j)` and to cosine norms.
pub const DENOM_FLOOR: f64 = 1e-12;
/// Lower bound for the kernel bandwidth.
pub const SIGMA_FLOOR: f64 = 1e-9;
pub const DEFAULT_SIGMA_REL: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub delta: f64,
    pub negatives: usize,
    pub negative_sampling: bool,
    pub adaptive_weight: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            delta: 0.1,
            negatives: 25,
            negative_sampling: true,
            adaptive_weight: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::usage(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::usage(format!(
                "delta must be non-negative, got {}",
                self.delta
            )));
        }
        if self.negatives == 0 {
            return Err(Error::usage("negatives per positive pair must be at least 1"));
        }
        Ok(())
    }
}

/// Which clustering-loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            l1: true,
            l2: true,
            l3: true,
        }
    }
}

impl LossTerms {
    pub fn any(&self) -> bool {
        self.l1 || self.l2 || self.l3
    }

    /// The seven non-empty term subsets, full set first.
    pub fn all_nonempty() -> Vec<LossTerms> {
        let mut out: Vec<LossTerms> = (1..8u8)
            .rev()
            .map(|bits| LossTerms {
                l1: bits & 1 != 0,
                l2: bits & 2 != 0,
                l3: bits & 4 != 0,
            })
            .collect();
        out.sort_by_key(|t| std::cmp::Reverse(t.l1 as u8 + t.l2 as u8 + t.l3 as u8));
        out
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [(self.l1, "L1"), (self.l2, "L2"), (self.l3, "L3")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        names.join("+")
    }
}

/// Scalar loss values for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub cluster: f64,
    pub contrastive: f64,
    pub gate: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l1,
            self.l2,
            self.l3,
            self.cluster,
            self.contrastive,
            self.gate,
            self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }

    /// Element-wise mean of a set of breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.l1 += b.l1;
            acc.l2 += b.l2;
            acc.l3 += b.l3;
            acc.cluster += b.cluster;
            acc.contrastive += b.contrastive;
            acc.gate += b.gate;
            acc.total += b.total;
        }
        LossBreakdown {
            l1: acc.l1 / n,
            l2: acc.l2 / n,
            l3: acc.l3 / n,
            cluster: acc.cluster / n,
            contrastive: acc.contrastive / n,
            gate: acc.gate / n,
            total: acc.total / n,
        }
    }
}

// ---- kernel -------------------------------------------------------------

/// `rel` times the median pairwise Euclidean distance between rows of `h`.
///
/// For an even number of pairs the median is the mean of the two middle
/// values. The result is floored at [`SIGMA_FLOOR`].
pub fn compute_sigma(h: &Tensor, rel: f64) -> Result<f64> {
    if h.ndim() != 2 || h.rows() < 2 {
        return Err(Error::usage(format!(
            "sigma needs at least 2 rows, got shape {:?}",
            h.shape()
        )));
    }
    let n = h.rows();
    // direct differences: exact up to summation order, unlike the gram form
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for (a, b) in h.row(i).iter().zip(h.row(j)) {
                acc += (a - b) * (a - b);
            }
            d.push(acc.sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    };
    Ok((rel * median).max(SIGMA_FLOOR))
}

/// `kappa_ab = exp(-||h_a - h_b||^2 / (2 sigma^2))`.
pub fn gaussian_kernel(g: &mut Graph, h: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::usage(format!("sigma must be positive, got {sigma}")));
    }
    let d = g.pairwise_sq_dists(h)?;
    let s = g.scale(d, -1.0 / (2.0 * sigma * sigma))?;
    g.exp(s)
}

// ---- clustering loss ----------------------------------------------------

fn check_assignments(g: &Graph, a: Var, kappa: Option<Var>) -> Result<(usize, usize)> {
    let s = g.shape(a);
    if s.len() != 2 {
        return Err(Error::shape(format!("assignments must be n x k, got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    if k < 2 {
        return Err(Error::usage(format!("need k >= 2 clusters, got {k}")));
    }
    if let Some(kp) = kappa {
        if g.shape(kp) != [n, n] {
            return Err(Error::shape(format!(
                "kernel shape {:?} does not match {n} objects",
                g.shape(kp)
            )));
        }
    }
    Ok((n, k))
}

/// `min(max(x, 0), 1)`. The ratios are bounded analytically; this only removes
/// rounding excursions of an ulp or so, where the exact gradient is zero anyway.
fn unit_interval(g: &mut Graph, x: Var) -> Result<Var> {
    let lo = g.relu(x)?;
    let over = g.add_scalar(x, -1.0)?;
    let over = g.relu(over)?;
    g.sub(lo, over)
}

/// Mean over cluster pairs `i < j` of
/// `a_i^T K a_j / sqrt(a_i^T K a_i * a_j^T K a_j)` for the columns of `a`.
fn cs_ratio(g: &mut Graph, a: Var, kappa: Var, k: usize) -> Result<Var> {
    let ka = g.matmul(kappa, a)?;
    let at = g.transpose(a)?;
    let m = g.matmul(at, ka)?;
    let eye = g.constant(Tensor::identity(k));
    let diag = g.mul(m, eye)?;
    let diag = g.sum(diag, Some(1))?;
    let col = g.reshape(diag, &[k, 1])?;
    let row = g.reshape(diag, &[1, k])?;
    let outer = g.mul(col, row)?;
    let den = g.sqrt(outer)?;
    let den = g.clamp_min(den, DENOM_FLOOR)?;
    let ratio = g.div(m, den)?;
    let ratio = unit_interval(g, ratio)?;
    let pairs = (k * (k - 1) / 2) as f64;
    let mut mask = Tensor::zeros(&[k, k]);
    for i in 0..k {
        for j in (i + 1)..k {
            mask.data_mut()[i * k + j] = 1.0 / pairs;
        }
    }
    let mask = g.constant(mask);
    let masked = g.mul(ratio, mask)?;
    g.sum(masked, None)
}

/// Separability and compactness term.
pub fn ddc_l1(g: &mut Graph, alpha: Var, kappa: Var) -> Result<Var> {
    let (_, k) = check_assignments(g, alpha, Some(kappa))?;
    cs_ratio(g, alpha, kappa, k)
}

/// Orthogonality of assignment vectors of different objects.
pub fn ddc_l2(g: &mut Graph, alpha: Var) -> Result<Var> {
    let s = g.shape(alpha);
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::usage(format!("L2 needs at least 2 objects, got {s:?}")));
    }
    let n = s[0] as f64;
    // sum_{i<j} a_i.a_j = (||sum_i a_i||^2 - sum_i ||a_i||^2) / 2
    let colsum = g.sum(alpha, Some(0))?;
    let sq = g.square(colsum)?;
    let total = g.sum(sq, None)?;
    let own = g.square(alpha)?;
    let own = g.sum(own, None)?;
    let cross = g.sub(total, own)?;
    let l2 = g.scale(cross, 1.0 / (n * (n - 1.0)))?;
    unit_interval(g, l2)
}

/// `m_ij = exp(-||alpha_i - e_j||^2)`.
pub fn simplex_affinity(g: &mut Graph, alpha: Var) -> Result<Var> {
    let n = g.shape(alpha)[0];
    let sq = g.square(alpha)?;
    let norms = g.sum(sq, Some(1))?;
    let norms = g.reshape(norms, &[n, 1])?;
    // -(||a||^2 - 2 a_j + 1)
    let twice = g.scale(alpha, 2.0)?;
    let e = g.sub(twice, norms)?;
    let e = g.add_scalar(e, -1.0)?;
    g.exp(e)
}

/// Simplex-corner closeness term.
pub fn ddc_l3(g: &mut Graph, alpha: Var, kappa: Var) -> Result<Var> {
    let (_, k) = check_assignments(g, alpha, Some(kappa))?;
    let m = simplex_affinity(g, alpha)?;
    cs_ratio(g, m, kappa, k)
}

// ---- contrastive loss ---------------------------------------------------

/// Cosine similarities between all views of all objects.
///
/// The result has shape `[V, V, n, n]`; entry `(v, u, i, j)` is the cosine of
/// the angle between `z_i^(v)` and `z_j^(u)`.
pub fn cosine_similarities(g: &mut Graph, reps: &[Var]) -> Result<Var> {
    if reps.is_empty() {
        return Err(Error::usage("no representations"));
    }
    let shape = g.shape(reps[0]).to_vec();
    if shape.len() != 2 || reps.iter().any(|&r| g.shape(r) != shape.as_slice()) {
        return Err(Error::shape("representations must share an n x d shape"));
    }
    let n = shape[0];
    let mut unit = Vec::with_capacity(reps.len());
    for &z in reps {
        let sq = g.square(z)?;
        let norm = g.sum(sq, Some(1))?;
        let norm = g.sqrt(norm)?;
        let norm = g.clamp_min(norm, DENOM_FLOOR)?;
        let norm = g.reshape(norm, &[n, 1])?;
        unit.push(g.div(z, norm)?);
    }
    let transposed: Vec<Var> = unit
        .iter()
        .map(|&u| g.transpose(u))
        .collect::<Result<_>>()?;
    let mut blocks = Vec::with_capacity(reps.len() * reps.len());
    for &zv in &unit {
        for &zu_t in &transposed {
            blocks.push(g.matmul(zv, zu_t)?);
        }
    }
    let v = reps.len();
    g.concat(&blocks, &[v, v, n, n])
}

/// Flat index of `s^(vu)_ij` in the `[V, V, n, n]` similarity tensor.
pub fn sim_index(n_views: usize, n: usize, v: usize, u: usize, i: usize, j: usize) -> usize {
    ((v * n_views + u) * n + i) * n + j
}

/// A candidate negative similarity for object `i`: the cosine between
/// `z_i^(view_i)` and `z_object^(view_other)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NegRef {
    pub object: usize,
    pub view_i: usize,
    pub view_other: usize,
}

/// Candidate negatives for every object.
///
/// With `cluster_aware`, object `j` contributes only if its hard assignment
/// (row argmax, ties to the lowest cluster) differs from that of `i`;
/// otherwise every other object in the batch contributes.
pub fn build_negative_pool(alpha: &Tensor, n_views: usize, cluster_aware: bool) -> Vec<Vec<NegRef>> {
    let n = alpha.rows();
    let labels = alpha.row_argmax();
    (0..n)
        .map(|i| {
            let mut pool = Vec::new();
            for j in (0..n).filter(|&j| j != i) {
                if cluster_aware && labels[j] == labels[i] {
                    continue;
                }
                for a in 0..n_views {
                    for b in 0..n_views {
                        pool.push(NegRef {
                            object: j,
                            view_i: a,
                            view_other: b,
                        });
                    }
                }
            }
            pool
        })
        .collect()
}

/// One `(i, u, v)` term of the contrastive loss with its chosen negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedTerm {
    pub object: usize,
    pub u: usize,
    pub v: usize,
    pub negatives: Vec<NegRef>,
}

/// Chooses negatives for every contributing `(i, u, v)` with `u != v`.
///
/// With negative sampling on, `cfg.negatives` entries are drawn from the
/// cluster-aware pool: without replacement when the pool is large enough,
/// with replacement otherwise. With it off, the whole unfiltered pool is used.
/// Objects with an empty pool contribute no terms.
pub fn plan_contrastive<R: Rng + ?Sized>(
    alpha: &Tensor,
    n_views: usize,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Vec<PlannedTerm> {
    let pools = build_negative_pool(alpha, n_views, cfg.negative_sampling);
    let mut plan = Vec::new();
    for (i, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            continue;
        }
        for u in 0..n_views {
            for v in (0..n_views).filter(|&v| v != u) {
                let negatives = if !cfg.negative_sampling {
                    pool.clone()
                } else if pool.len() >= cfg.negatives {
                    index::sample(rng, pool.len(), cfg.negatives)
                        .into_iter()
                        .map(|t| pool[t])
                        .collect()
                } else {
                    (0..cfg.negatives)
                        .map(|_| pool[rng.random_range(0..pool.len())])
                        .collect()
                };
                plan.push(PlannedTerm {
                    object: i,
                    u,
                    v,
                    negatives,
                });
            }
        }
    }
    plan
}

/// Contrastive loss for a fixed plan of positives and negatives.
///
/// Each term is `-log(exp(s_pos / tau) / sum_neg exp(s' / tau))`; the positive
/// is not part of the denominator. Terms are averaged over the plan.
pub fn contrastive_from_plan(
    g: &mut Graph,
    reps: &[Var],
    plan: &[PlannedTerm],
    tau: f64,
) -> Result<Var> {
    if reps.len() < 2 {
        return Err(Error::usage(format!(
            "contrastive loss needs at least 2 views, got {}",
            reps.len()
        )));
    }
    if plan.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let width = plan[0].negatives.len();
    if width == 0 || plan.iter().any(|t| t.negatives.len() != width) {
        return Err(Error::usage("every planned term needs the same non-zero negative count"));
    }
    let n_views = reps.len();
    let n = g.shape(reps[0])[0];
    let sims = cosine_similarities(g, reps)?;
    let pos_idx: Vec<usize> = plan
        .iter()
        .map(|t| sim_index(n_views, n, t.u, t.v, t.object, t.object))
        .collect();
    let neg_idx: Vec<usize> = plan
        .iter()
        .flat_map(|t| {
            t.negatives
                .iter()
                .map(move |r| sim_index(n_views, n, r.view_i, r.view_other, t.object, r.object))
        })
        .collect();
    let rows = plan.len();
    let pos = g.gather(sims, pos_idx, &[rows])?;
    let neg = g.gather(sims, neg_idx, &[rows, width])?;
    let neg = g.scale(neg, 1.0 / tau)?;
    let lse = g.row_logsumexp(neg)?;
    let pos = g.scale(pos, 1.0 / tau)?;
    let terms = g.sub(lse, pos)?;
    g.mean(terms, None)
}

/// Samples negatives with `rng` and evaluates the contrastive loss.
pub fn contrastive_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    reps: &[Var],
    alpha: &Tensor,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Var> {
    if reps.len() < 2 {
        return Err(Error::usage(format!(
            "contrastive loss needs at least 2 views, got {}",
            reps.len()
        )));
    }
    cfg.validate()?;
    let plan = plan_contrastive(alpha, reps.len(), cfg, rng);
    contrastive_from_plan(g, reps, &plan, cfg.tau)
}

// ---- total --------------------------------------------------------------

/// Graph handles of the individual loss terms; absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub l1: Option<Var>,
    pub l2: Option<Var>,
    pub l3: Option<Var>,
    pub contrastive: Option<Var>,
}

/// `L = L_cluster + delta * gate * L_contrastive`.
///
/// The gate is the minimum fusion weight with its gradient stopped, or the
/// constant 1 when the adaptive weight is disabled. Without a contrastive
/// config the total is the clustering loss alone.
pub fn total_loss(
    g: &mut Graph,
    parts: LossParts,
    weights: Var,
    cfg: Option<&ContrastiveConfig>,
) -> Result<(Var, LossBreakdown)> {
    let mut b = LossBreakdown::default();
    let mut cluster: Option<Var> = None;
    for (term, slot) in [
        (parts.l1, &mut b.l1),
        (parts.l2, &mut b.l2),
        (parts.l3, &mut b.l3),
    ] {
        if let Some(t) = term {
            *slot = g.value(t).item()?;
            cluster = Some(match cluster {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
    }
    let mut total = cluster.unwrap_or_else(|| g.scalar(0.0));
    b.cluster = g.value(total).item()?;
    b.gate = 1.0;
    if let (Some(c), Some(cfg)) = (parts.contrastive, cfg) {
        b.contrastive = g.value(c).item()?;
        let gate = if cfg.adaptive_weight {
            let w = g.min(weights, None)?;
            g.detach(w)
        } else {
            g.scalar(1.0)
        };
        b.gate = g.value(gate).item()?;
        let scaled = g.mul(gate, c)?;
        let scaled = g.scale(scaled, cfg.delta)?;
        total = g.add(total, scaled)?;
    }
    b.total = g.value(total).item()?;
    Ok((total, b))
}

/// Computes every enabled loss term for a forward pass.
///
/// `sigma` is derived from the current hidden representation and treated as
/// a constant.
pub fn batch_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    out: &crate::model::ForwardOutput,
    terms: LossTerms,
    sigma_rel: f64,
    contrastive: Option<&ContrastiveConfig>,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    let mut parts = LossParts::default();
    if terms.l1 || terms.l3 {
        let sigma = compute_sigma(g.value(out.hidden), sigma_rel)?;
        let kappa = gaussian_kernel(g, out.hidden, sigma)?;
        if terms.l1 {
            parts.l1 = Some(ddc_l1(g, out.alpha, kappa)?);
        }
        if terms.l3 {
            parts.l3 = Some(ddc_l3(g, out.alpha, kappa)?);
        }
    }
    if terms.l2 {
        parts.l2 = Some(ddc_l2(g, out.alpha)?);
    }
    if let Some(cfg) = contrastive {
        let alpha = g.value(out.alpha).clone();
        parts.contrastive = Some(contrastive_loss(g, &out.reps, &alpha, cfg, rng)?);
    }
    total_loss(g, parts, out.weights, contrastive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn value(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn sigma_examples() {
        let h = mat(&[vec![0.0, 0.0], vec![6.0, 8.0]]);
        assert!((compute_sigma(&h, 0.15).unwrap() - 1.5).abs() < 1e-15);
        let same = Tensor::full(&[4, 3], 2.5);
        assert_eq!(compute_sigma(&same, 0.15).unwrap(), SIGMA_FLOOR);
        assert!(compute_sigma(&mat(&[vec![1.0]]), 0.15).is_err());
    }

    #[test]
    fn kernel_examples() {
        let mut g = Graph::new();
        let same = g.constant(Tensor::full(&[3, 2], 1.0));
        let k = gaussian_kernel(&mut g, same, 0.5).unwrap();
        assert!(g.value(k).data().iter().all(|&x| x == 1.0));

        let sigma = 0.7;
        let d = sigma * 2f64.sqrt();
        let h = g.constant(mat(&[vec![0.0], vec![d]]));
        let k = gaussian_kernel(&mut g, h, sigma).unwrap();
        assert!((g.value(k).at(0, 1) - (-1f64).exp()).abs() < 1e-15);
        assert!(gaussian_kernel(&mut g, h, 0.0).is_err());
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::new();
        // hard assignments, block-diagonal kernel with zero cross-block
        let a = g.constant(mat(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]));
        let block = mat(&[
            vec![1.0, 0.5, 0.0, 0.0],
            vec![0.5, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.3],
            vec![0.0, 0.0, 0.3, 1.0],
        ]);
        let kb = g.constant(block);
        let l = ddc_l1(&mut g, a, kb).unwrap();
        assert_eq!(value(&g, l), 0.0);

        let ones = g.constant(Tensor::full(&[4, 4], 1.0));
        let l = ddc_l1(&mut g, a, ones).unwrap();
        assert!((value(&g, l) - 1.0).abs() < 1e-15);

        let single = g.constant(Tensor::full(&[4, 1], 1.0));
        assert!(matches!(ddc_l1(&mut g, single, ones), Err(Error::Usage(_))));
    }

    #[test]
    fn l2_examples() {
        let mut g = Graph::new();
        let same = g.constant(mat(&[vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]]));
        let l = ddc_l2(&mut g, same).unwrap();
        assert!((value(&g, l) - 1.0).abs() < 1e-15);
        let orth = g.constant(mat(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]));
        let l = ddc_l2(&mut g, orth).unwrap();
        assert_eq!(value(&g, l), 0.0);
        let one = g.constant(mat(&[vec![1.0, 0.0]]));
        assert!(ddc_l2(&mut g, one).is_err());
    }

    #[test]
    fn l3_examples() {
        let mut g = Graph::new();
        let corners = mat(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        let a = g.constant(corners);
        let ones = g.constant(Tensor::full(&[4, 4], 1.0));
        let l = ddc_l3(&mut g, a, ones).unwrap();
        assert!((value(&g, l) - 1.0).abs() < 1e-12);

        // m columns vanish across blocks when alpha sits far outside the simplex
        let far = g.constant(mat(&[
            vec![1.0, -30.0],
            vec![1.0, -30.0],
            vec![-30.0, 1.0],
            vec![-30.0, 1.0],
        ]));
        let block = g.constant(mat(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
        ]));
        let l = ddc_l3(&mut g, far, block).unwrap();
        assert!(value(&g, l) < 1e-300);
    }

    #[test]
    fn simplex_affinity_is_one_at_corners() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[vec![0.0, 1.0, 0.0], vec![0.2, 0.3, 0.5]]));
        let m = simplex_affinity(&mut g, a).unwrap();
        let m = g.value(m);
        assert_eq!(m.at(0, 1), 1.0);
        assert!(m.data().iter().all(|&x| x > 0.0 && x <= 1.0));
        assert!(m.at(1, 2) < 1.0);
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[vec![1.0, 0.0], vec![2.0, 2.0]]));
        let b = g.constant(mat(&[vec![3.0, 0.0], vec![0.0, 5.0]]));
        let s = cosine_similarities(&mut g, &[a, b]).unwrap();
        let s = g.value(s);
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
        let at = |v, u, i, j| s.data()[sim_index(2, 2, v, u, i, j)];
        assert!((at(0, 1, 0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(at(0, 1, 0, 1), 0.0);
        assert!((at(0, 0, 1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pool_examples() {
        let same = mat(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.6, 0.4]]);
        assert!(build_negative_pool(&same, 2, true).iter().all(Vec::is_empty));
        assert!(build_negative_pool(&same, 2, false).iter().all(|p| p.len() == 8));

        let split = mat(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let pools = build_negative_pool(&split, 2, true);
        assert_eq!(pools[0].len(), 4);
        assert!(pools[0].iter().all(|r| r.object == 1));
        assert!(pools[1].iter().all(|r| r.object == 0));
    }

    #[test]
    fn single_negative_log_ratio() {
        // One object per cluster, V = 2: each pool has 4 candidates; ask for 1.
        let mut g = Graph::new();
        let z1 = g.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let z2 = g.constant(mat(&[vec![1.0, 1.0], vec![1.0, 0.0]]));
        let alpha = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let plan = vec![PlannedTerm {
            object: 0,
            u: 0,
            v: 1,
            negatives: vec![NegRef {
                object: 1,
                view_i: 0,
                view_other: 0,
            }],
        }];
        let l = contrastive_from_plan(&mut g, &[z1, z2], &plan, 0.1).unwrap();
        // s = cos(z1_0, z2_0) = 1/sqrt 2, s' = cos(z1_0, z1_1) = 0
        let expected = (0.0 - 0.5f64.sqrt()) / 0.1;
        assert!((value(&g, l) - expected).abs() < 1e-12);
        let _ = alpha;
    }

    #[test]
    fn equal_positive_and_negative_give_zero() {
        let mut g = Graph::new();
        let z1 = g.constant(mat(&[vec![1.0, 0.0], vec![1.0, 0.0]]));
        let z2 = g.constant(mat(&[vec![2.0, 0.0], vec![3.0, 0.0]]));
        let plan = vec![PlannedTerm {
            object: 0,
            u: 0,
            v: 1,
            negatives: vec![NegRef {
                object: 1,
                view_i: 1,
                view_other: 0,
            }],
        }];
        let l = contrastive_from_plan(&mut g, &[z1, z2], &plan, 0.1).unwrap();
        assert!(value(&g, l).abs() < 1e-12);
    }

    #[test]
    fn contrastive_needs_two_views() {
        let mut g = Graph::new();
        let z = g.constant(mat(&[vec![1.0], vec![2.0]]));
        let alpha = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = contrastive_loss(&mut g, &[z], &alpha, &ContrastiveConfig::default(), &mut rng);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn sampling_respects_pool_size() {
        let alpha = mat(&[
            vec![0.9, 0.1],
            vec![0.1, 0.9],
            vec![0.2, 0.8],
            vec![0.7, 0.3],
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ContrastiveConfig {
            negatives: 5,
            ..Default::default()
        };
        // object 0 has 2 candidates x 4 view pairs = 8 >= 5: drawn without replacement
        let plan = plan_contrastive(&alpha, 2, &cfg, &mut rng);
        assert_eq!(plan.len(), 8);
        for t in &plan {
            assert_eq!(t.negatives.len(), 5);
            let mut uniq = t.negatives.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 5);
        }
        let cfg = ContrastiveConfig {
            negatives: 25,
            ..Default::default()
        };
        let plan = plan_contrastive(&alpha, 2, &cfg, &mut rng);
        assert!(plan.iter().all(|t| t.negatives.len() == 25));

        let off = ContrastiveConfig {
            negative_sampling: false,
            ..Default::default()
        };
        let plan = plan_contrastive(&alpha, 2, &off, &mut rng);
        assert!(plan.iter().all(|t| t.negatives.len() == 12));
    }

    #[test]
    fn total_examples() {
        let mut g = Graph::new();
        let weights = g.param(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let l1 = g.scalar(0.3);
        let l2 = g.scalar(0.2);
        let c = g.scalar(4.0);
        let parts = LossParts {
            l1: Some(l1),
            l2: Some(l2),
            l3: None,
            contrastive: Some(c),
        };
        let cfg = ContrastiveConfig {
            delta: 0.0,
            ..Default::default()
        };
        let (_, b) = total_loss(&mut g, parts, weights, Some(&cfg)).unwrap();
        assert!((b.total - 0.5).abs() < 1e-15);
        assert_eq!(b.gate, 0.5);

        let cfg = ContrastiveConfig {
            delta: 2.0,
            ..Default::default()
        };
        let (_, b) = total_loss(&mut g, parts, weights, Some(&cfg)).unwrap();
        assert!((b.total - (0.5 + 2.0 * 0.5 * 4.0)).abs() < 1e-12);
        assert!((b.cluster - (b.l1 + b.l2 + b.l3)).abs() < 1e-12);

        let cfg = ContrastiveConfig {
            delta: 2.0,
            adaptive_weight: false,
            ..Default::default()
        };
        let (_, b) = total_loss(&mut g, parts, weights, Some(&cfg)).unwrap();
        assert_eq!(b.gate, 1.0);
        let (_, b) = total_loss(&mut g, parts, weights, None).unwrap();
        assert_eq!(b.total, b.cluster);
    }

    #[test]
    fn term_subsets() {
        let all = LossTerms::all_nonempty();
        assert_eq!(all.len(), 7);
        assert_eq!(all[0], LossTerms::default());
        assert!(all.iter().all(LossTerms::any));
        assert_eq!(all[0].label(), "L1+L2+L3");
    }
}
