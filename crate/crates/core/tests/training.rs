//! End-to-end behavior of short training runs.

use mvc_core::data::{generate_toy, ToySpec};
use mvc_core::losses::LossTerms;
use mvc_core::model::ModelState;
use mvc_core::trainer::{train_once, ModelKind, TrainConfig};

fn l2_only(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(ModelKind::Simvc);
    cfg.epochs = epochs;
    cfg.loss_terms = LossTerms {
        l1: false,
        l2: true,
        l3: false,
    };
    cfg
}

#[test]
fn l2_alone_decreases_over_first_epochs() {
    let ds = generate_toy(&ToySpec::five_cluster(0)).unwrap();
    let cfg = l2_only(10);
    let mut monotone = 0;
    for seed in 0..20 {
        let (_, rec) = train_once(&cfg, &ds, seed).unwrap();
        let l2: Vec<f64> = rec.epochs.iter().map(|e| e.l2).collect();
        if l2.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 18, "{monotone} of 20 seeds monotone");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ds = generate_toy(&ToySpec::three_cluster(1).with_samples(40)).unwrap();
    let mut cfg = TrainConfig::new(ModelKind::Comvc);
    cfg.epochs = 2;
    cfg.batch_size = 30;
    let (model, _) = train_once(&cfg, &ds, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mvck");
    model.save(&path).unwrap();
    let back = ModelState::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), model.to_bytes().unwrap());
    let (a, b) = (model.infer(&ds.views).unwrap(), back.infer(&ds.views).unwrap());
    assert_eq!(a.predictions(), b.predictions());
    assert_eq!(model.fusion_weights(), back.fusion_weights());
}

#[test]
fn clipping_bounds_every_update() {
    let ds = generate_toy(&ToySpec::three_cluster(2).with_samples(30)).unwrap();
    let mut cfg = TrainConfig::new(ModelKind::Comvc);
    cfg.epochs = 3;
    cfg.batch_size = 30;
    cfg.max_grad_norm = 1e-3;
    let (_, rec) = train_once(&cfg, &ds, 0).unwrap();
    assert!(rec.max_grad_norm_pre_clip > cfg.max_grad_norm);
    assert!(rec.max_grad_norm_post_clip <= cfg.max_grad_norm + 1e-12);
}

#[test]
fn same_seed_same_record() {
    let ds = generate_toy(&ToySpec::three_cluster(3).with_samples(30)).unwrap();
    let mut cfg = TrainConfig::new(ModelKind::Comvc);
    cfg.epochs = 2;
    cfg.batch_size = 45;
    let (_, a) = train_once(&cfg, &ds, 9).unwrap();
    let (_, b) = train_once(&cfg, &ds, 9).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
