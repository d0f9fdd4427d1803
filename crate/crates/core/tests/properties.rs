//! Randomized invariants.

use mvc_core::autodiff::clip_global_norm;
use mvc_core::losses::{
    build_negative_pool, contrastive_from_plan, ddc_l1, ddc_l2, ddc_l3, gaussian_kernel,
    plan_contrastive, ContrastiveConfig,
};
use mvc_core::metrics::{acc, hungarian, nmi};
use mvc_core::propcheck::{brute_force_kappa, kappa_aligned, kappa_unaligned, ViewPartitions};
use mvc_core::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: std::ops::Range<usize>, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(lo..hi, n * cols)
            .prop_map(move |d| Tensor::new(vec![n, cols], d).unwrap())
    })
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

fn scalar(f: impl FnOnce(&mut Graph) -> mvc_core::Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).item().unwrap()
}

fn softmax_rows(g: &mut Graph, logits: &Tensor) -> Var {
    let l = g.constant(logits.clone());
    g.row_softmax(l).unwrap()
}

/// L1, L2 and L3 with a kernel over `h`.
fn ddc_terms(logits: &Tensor, h: &Tensor) -> [f64; 3] {
    let mut g = Graph::new();
    let a = softmax_rows(&mut g, logits);
    let hv = g.constant(h.clone());
    let k = gaussian_kernel(&mut g, hv, 1.0).unwrap();
    let l1 = ddc_l1(&mut g, a, k).unwrap();
    let l2 = ddc_l2(&mut g, a).unwrap();
    let l3 = ddc_l3(&mut g, a, k).unwrap();
    [l1, l2, l3].map(|v| g.value(v).item().unwrap())
}

fn permute_cols(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|i| perm.iter().map(|&c| t.at(i, c)).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ddc_terms_bounded(logits in matrix(2..12, 3, -8.0, 8.0), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Tensor::new(vec![logits.rows(), 4], (0..logits.rows() * 4).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect()).unwrap();
        for v in ddc_terms(&logits, &h) {
            prop_assert!(v.is_finite());
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{v}");
        }
    }

    #[test]
    fn ddc_invariant_to_cluster_relabeling(logits in matrix(3..10, 3, -4.0, 4.0), h in matrix(10..11, 2, -2.0, 2.0)) {
        let h = Tensor::from_rows(&(0..logits.rows()).map(|i| h.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let base = ddc_terms(&logits, &h);
        let moved = ddc_terms(&permute_cols(&logits, &[2, 0, 1]), &h);
        for (a, b) in base.iter().zip(moved) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_invariant_to_logit_shift(logits in matrix(1..8, 4, -20.0, 20.0), c in -50.0f64..50.0) {
        let shifted = Tensor::new(logits.shape().to_vec(), logits.data().iter().map(|x| x + c).collect()).unwrap();
        let mut g = Graph::new();
        let a = softmax_rows(&mut g, &logits);
        let b = softmax_rows(&mut g, &shifted);
        let (a, b) = (g.value(a), g.value(b));
        for i in 0..a.rows() {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..4 {
                prop_assert!((a.at(i, j) - b.at(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_symmetric_zero_diagonal(h in matrix(1..10, 3, -5.0, 5.0)) {
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let d = g.pairwise_sq_dists(x).unwrap();
        let d = g.value(d);
        for i in 0..h.rows() {
            prop_assert_eq!(d.at(i, i), 0.0);
            for j in 0..h.rows() {
                prop_assert_eq!(d.at(i, j), d.at(j, i));
                prop_assert!(d.at(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn kernel_rotation_invariant(h in matrix(2..8, 2, -3.0, 3.0), theta in 0.0f64..6.3) {
        let (s, c) = theta.sin_cos();
        let rot: Vec<Vec<f64>> = (0..h.rows()).map(|i| {
            let (x, y) = (h.at(i, 0), h.at(i, 1));
            vec![c * x - s * y, s * x + c * y]
        }).collect();
        let rot = Tensor::from_rows(&rot).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(h), g.constant(rot));
        let ka = gaussian_kernel(&mut g, a, 0.8).unwrap();
        let kb = gaussian_kernel(&mut g, b, 0.8).unwrap();
        for (x, y) in g.value(ka).data().iter().zip(g.value(kb).data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn clipped_norm_bounded(raw in prop::collection::vec(-100.0f64..100.0, 1..30), max in 0.01f64..10.0) {
        let half = raw.len() / 2;
        let mut grads = vec![Tensor::vector(raw[..half].to_vec()), Tensor::vector(raw[half..].to_vec())];
        let before = clip_global_norm(&mut grads, max).unwrap();
        let after = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        prop_assert!(after <= max + 1e-12);
        if before <= max {
            prop_assert_eq!(after, before);
        }
    }

    #[test]
    fn contrastive_scale_invariant(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let reps: Vec<Tensor> = (0..2).map(|_| Tensor::new(vec![n, 3], (0..n * 3).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap()).collect();
        let alpha = Tensor::new(vec![n, 2], (0..n).flat_map(|i| if i % 2 == 0 { [0.9, 0.1] } else { [0.2, 0.8] }).collect()).unwrap();
        let cfg = ContrastiveConfig { negatives: 4, ..Default::default() };
        let plan = plan_contrastive(&alpha, 2, &cfg, &mut rng);
        let loss = |k: f64| scalar(|g| {
            let r: Vec<Var> = reps.iter().map(|t| g.constant(Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * k).collect()).unwrap())).collect();
            contrastive_from_plan(g, &r, &plan, cfg.tau)
        });
        prop_assert!((loss(1.0) - loss(scale)).abs() < 1e-10);
    }

    #[test]
    fn no_same_cluster_negatives(logits in matrix(2..16, 3, -3.0, 3.0), seed in any::<u64>(), m in 1usize..30) {
        let mut g = Graph::new();
        let a = softmax_rows(&mut g, &logits);
        let alpha = g.value(a).clone();
        let hard: Vec<usize> = (0..alpha.rows()).map(|i| {
            let r = alpha.row(i);
            (0..3).fold(0, |b, c| if r[c] > r[b] { c } else { b })
        }).collect();
        for pool in build_negative_pool(&alpha, 2, true).iter().enumerate() {
            for r in pool.1 {
                prop_assert_ne!(hard[r.object], hard[pool.0]);
            }
        }
        let cfg = ContrastiveConfig { negatives: m, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in plan_contrastive(&alpha, 2, &cfg, &mut rng) {
            prop_assert_eq!(t.negatives.len(), m);
            for r in &t.negatives {
                prop_assert_ne!(hard[r.object], hard[t.object]);
                prop_assert_ne!(r.object, t.object);
            }
        }
    }

    #[test]
    fn acc_bounds_and_relabel_invariance(pred in labels(12, 4), truth in labels(12, 4), shift in 1usize..4) {
        let a = acc(&pred, &truth).unwrap();
        // some cyclic relabeling always matches at least a quarter
        prop_assert!((0.25 - 1e-12..=1.0).contains(&a));
        let relabeled: Vec<usize> = pred.iter().map(|p| (p + shift) % 4).collect();
        prop_assert_eq!(a, acc(&relabeled, &truth).unwrap());
        prop_assert_eq!(acc(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn nmi_symmetric_and_bounded(pred in labels(15, 4), truth in labels(15, 3)) {
        let a = nmi(&pred, &truth).unwrap();
        let b = nmi(&truth, &pred).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn hungarian_beats_any_permutation(costs in prop::collection::vec(0.0f64..10.0, 25), seed in any::<u64>()) {
        let c = Tensor::new(vec![5, 5], costs).unwrap();
        let best = hungarian(&c).unwrap();
        let identity: f64 = (0..5).map(|i| c.at(i, i)).sum();
        prop_assert!(best.cost <= identity + 1e-12);
        let mut perm: Vec<usize> = (0..5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let other: f64 = (0..5).map(|i| c.at(i, perm[i])).sum();
        prop_assert!(best.cost <= other + 1e-12);
        let got: f64 = (0..5).map(|i| c.at(i, best.cols[i])).sum();
        prop_assert!((got - best.cost).abs() < 1e-9);
    }

    #[test]
    fn aligned_bound_below_unaligned(k in 1usize..12, kv in prop::collection::vec(1usize..12, 1..4)) {
        let kv: Vec<usize> = kv.into_iter().map(|c| c.min(k)).collect();
        prop_assert!(kappa_aligned(k, &kv).unwrap() <= kappa_unaligned(k, &kv).unwrap());
    }

    #[test]
    fn refining_a_view_never_shrinks_meet(k in 2usize..7, views in prop::collection::vec(prop::collection::vec(0usize..6, 6), 1..3), split in 0usize..6) {
        let views: Vec<Vec<usize>> = views.into_iter().map(|v| v[..k].iter().map(|c| c % k).collect()).collect();
        let base = ViewPartitions::from_assignments(k, views.clone()).unwrap();
        // move one cluster into a fresh cell of view 0
        let mut refined = views.clone();
        let target = split % k;
        let used: std::collections::BTreeSet<usize> = refined[0].iter().copied().collect();
        if let Some(fresh) = (0..k).find(|c| !used.contains(c)) {
            refined[0][target] = fresh;
            let finer = ViewPartitions::from_assignments(k, refined).unwrap();
            prop_assert!(finer.meet_size() >= base.meet_size());
            for aligned in [false, true] {
                let before = brute_force_kappa(&base, aligned).unwrap().count;
                let after = brute_force_kappa(&finer, aligned).unwrap().count;
                prop_assert!(after >= before, "aligned={} {} -> {}", aligned, before, after);
            }
            let (a, b) = (base.counts(), finer.counts());
            prop_assert!(kappa_unaligned(k, &b).unwrap() >= kappa_unaligned(k, &a).unwrap());
        }
    }
}
