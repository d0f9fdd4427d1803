//! Adam optimization, single training runs and the multi-run protocol.
//!
//! A protocol trains `runs` models from seeds `seed..seed+runs` and keeps the
//! one with the lowest selection score. Runs are independent and execute on
//! the rayon pool.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{clip_global_norm, Graph, Var};
use crate::data::{corrupt_view, mean_feature_std, training_batches, MultiViewDataset};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, ContrastiveConfig, LossBreakdown, LossTerms, DEFAULT_SIGMA_REL};
use crate::metrics::{acc, nmi, NMI_NORMALIZATION};
use crate::model::{
    init_model, Mode, ModelSpec, ModelState, DEFAULT_ENCODER_LAYERS, DEFAULT_HEAD_HIDDEN,
    INIT_SCHEME,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Weighted-mean fusion with the clustering loss only.
    Simvc,
    /// Adds the selective contrastive alignment term.
    Comvc,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Simvc => "simvc",
            ModelKind::Comvc => "comvc",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simvc" => Ok(ModelKind::Simvc),
            "comvc" => Ok(ModelKind::Comvc),
            _ => Err(Error::usage(format!("mode must be simvc or comvc, got {s:?}"))),
        }
    }
}

/// Architecture settings; view widths come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Defaults to the number of label classes.
    pub n_clusters: Option<usize>,
    pub encoder_layers: Vec<usize>,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_clusters: None,
            encoder_layers: DEFAULT_ENCODER_LAYERS.to_vec(),
            head_hidden: DEFAULT_HEAD_HIDDEN,
        }
    }
}

/// Step decay: the learning rate is multiplied by `factor` every `step` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decay {
    pub step: usize,
    pub factor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: ModelKind,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub max_grad_norm: f64,
    pub decay: Option<Decay>,
    pub contrastive: ContrastiveConfig,
    pub loss_terms: LossTerms,
    pub sigma_rel: f64,
    pub runs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: ModelKind::Simvc,
            model: ModelConfig::default(),
            batch_size: 100,
            epochs: 100,
            learning_rate: 1e-3,
            adam: AdamParams::default(),
            max_grad_norm: 5.0,
            decay: None,
            contrastive: ContrastiveConfig::default(),
            loss_terms: LossTerms::default(),
            sigma_rel: DEFAULT_SIGMA_REL,
            runs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn new(mode: ModelKind) -> Self {
        TrainConfig {
            mode,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !self.loss_terms.any() {
            return Err(Error::usage("at least one of L1, L2, L3 must be enabled"));
        }
        if self.epochs == 0 {
            return Err(Error::usage("epochs must be >= 1"));
        }
        if self.runs == 0 {
            return Err(Error::usage("runs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::usage("batch_size must be >= 2"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::usage("learning_rate must be finite and >= 0"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::usage("max_grad_norm must be positive"));
        }
        if !(self.sigma_rel > 0.0) {
            return Err(Error::usage("sigma_rel must be positive"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::usage("adam betas must lie in [0, 1) and eps must be positive"));
        }
        if let Some(d) = self.decay {
            if d.step == 0 || !(d.factor > 0.0) {
                return Err(Error::usage("decay step must be >= 1 and factor positive"));
            }
        }
        self.contrastive.validate()
    }

    /// SHA-256 over the JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn model_spec(&self, ds: &MultiViewDataset) -> Result<ModelSpec> {
        let k = match self.model.n_clusters {
            Some(k) => k,
            None => ds.n_classes().ok_or_else(|| {
                Error::usage("model.n_clusters is unset and the dataset has no labels")
            })?,
        };
        let spec = ModelSpec {
            view_dims: ds.dims(),
            n_clusters: k,
            encoder_layers: self.model.encoder_layers.clone(),
            head_hidden: self.model.head_hidden,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.decay {
            Some(d) => self.learning_rate * d.factor.powi((epoch / d.step) as i32),
            None => self.learning_rate,
        }
    }
}

// ---- Adam -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}, state {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = hp.beta1 * *mj + (1.0 - hp.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = hp.beta2 * *vj + (1.0 - hp.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((x, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

// ---- single run -----------------------------------------------------------

/// Outcome of one training run.
///
/// `wall_time_s` is not serialized so that records of identical runs are
/// byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub mode: ModelKind,
    /// Mean loss breakdown of each completed epoch.
    pub epochs: Vec<LossBreakdown>,
    pub fusion_weights: Vec<f64>,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    /// `None` for aborted runs.
    pub selection_score: Option<f64>,
    /// Diagnostic for runs stopped by a non-finite loss or gradient.
    pub aborted: Option<String>,
    pub max_grad_norm_pre_clip: f64,
    pub max_grad_norm_post_clip: f64,
    pub config_hash: String,
    pub init_scheme: String,
    pub nmi_normalization: String,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn is_aborted(&self) -> bool {
        self.aborted.is_some()
    }
}

/// Final-epoch mean L1 when L1 is enabled, else the sum of the enabled terms.
pub fn selection_score(last: &LossBreakdown, terms: LossTerms) -> f64 {
    if terms.l1 {
        return last.l1;
    }
    let mut s = 0.0;
    if terms.l2 {
        s += last.l2;
    }
    if terms.l3 {
        s += last.l3;
    }
    s
}

fn check_dataset(cfg: &TrainConfig, ds: &MultiViewDataset) -> Result<ModelSpec> {
    cfg.validate()?;
    if cfg.mode == ModelKind::Comvc && ds.n_views() < 2 {
        return Err(Error::usage("comvc needs at least two views"));
    }
    if cfg.batch_size > ds.n() {
        return Err(Error::usage(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            ds.n()
        )));
    }
    cfg.model_spec(ds)
}

/// Trains one model from `seed`.
///
/// A non-finite loss or gradient stops the run; the returned record carries
/// the diagnostic and no selection score.
pub fn train_once(
    cfg: &TrainConfig,
    ds: &MultiViewDataset,
    seed: u64,
) -> Result<(ModelState, RunRecord)> {
    let start = Instant::now();
    let spec = check_dataset(cfg, ds)?;
    let mut model = init_model(&spec, seed)?;
    let mut adam = AdamState::new(model.parameters());
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
    sample_rng.set_stream(u64::MAX);
    let contrastive = (cfg.mode == ModelKind::Comvc).then_some(&cfg.contrastive);

    let mut record = RunRecord {
        seed,
        mode: cfg.mode,
        epochs: Vec::with_capacity(cfg.epochs),
        fusion_weights: Vec::new(),
        acc: None,
        nmi: None,
        selection_score: None,
        aborted: None,
        max_grad_norm_pre_clip: 0.0,
        max_grad_norm_post_clip: 0.0,
        config_hash: cfg.hash(),
        init_scheme: INIT_SCHEME.to_string(),
        nmi_normalization: NMI_NORMALIZATION.to_string(),
        wall_time_s: 0.0,
    };

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut batch_losses = Vec::new();
        for (b, idx) in training_batches(ds.n(), cfg.batch_size, seed, epoch)?
            .iter()
            .enumerate()
        {
            let mut g = Graph::new();
            let params = model.bind(&mut g);
            let xs: Vec<Var> = ds
                .gather(idx)
                .into_iter()
                .map(|t| g.constant(t))
                .collect();
            let step = model
                .forward(&mut g, &params, &xs, Mode::Train)
                .and_then(|out| {
                    batch_loss(
                        &mut g,
                        &out,
                        cfg.loss_terms,
                        cfg.sigma_rel,
                        contrastive,
                        &mut sample_rng,
                    )
                });
            let (loss, breakdown) = match step {
                Ok(v) => v,
                // overflow inside the forward pass surfaces as a domain error
                Err(Error::Domain(msg)) => {
                    record.aborted = Some(format!(
                        "non-finite forward pass at epoch {epoch}, batch {b}: {msg}"
                    ));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !breakdown.is_finite() {
                record.aborted = Some(format!(
                    "non-finite loss at epoch {epoch}, batch {b}: {breakdown:?}"
                ));
                break 'epochs;
            }
            g.backward(loss)?;
            let mut grads: Vec<Tensor> = params
                .ordered()
                .iter()
                .map(|&v| {
                    g.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
                })
                .collect();
            let pre = clip_global_norm(&mut grads, cfg.max_grad_norm)?;
            if !pre.is_finite() {
                record.aborted = Some(format!(
                    "non-finite gradient norm at epoch {epoch}, batch {b}"
                ));
                break 'epochs;
            }
            let post = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            record.max_grad_norm_pre_clip = record.max_grad_norm_pre_clip.max(pre);
            record.max_grad_norm_post_clip = record.max_grad_norm_post_clip.max(post);
            adam_step(&mut model.parameters_mut(), &grads, &mut adam, lr, &cfg.adam)?;
            batch_losses.push(breakdown);
            // finite gradients can still overflow a parameter under a huge step
            if !model.parameters().iter().all(|t| t.all_finite()) {
                record.aborted = Some(format!(
                    "non-finite parameter after update at epoch {epoch}, batch {b}"
                ));
                break 'epochs;
            }
        }
        record.epochs.push(LossBreakdown::mean(&batch_losses));
    }

    model.mode = Mode::Inference;
    record.fusion_weights = model.fusion_weights();
    if record.aborted.is_none() {
        let last = record.epochs.last().expect("epochs >= 1");
        record.selection_score = Some(selection_score(last, cfg.loss_terms));
        let inf = model.infer(&ds.views)?;
        if let Some(labels) = &ds.labels {
            let pred = inf.predictions();
            record.acc = Some(acc(&pred, labels)?);
            record.nmi = Some(nmi(&pred, labels)?);
        }
    }
    record.wall_time_s = start.elapsed().as_secs_f64();
    Ok((model, record))
}

// ---- protocol -------------------------------------------------------------

/// Index of the lowest selection score; aborted runs are skipped and ties go
/// to the earliest run.
pub fn select_best(records: &[RunRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        if let Some(s) = r.selection_score {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

pub struct ProtocolResult {
    pub best: ModelState,
    pub best_index: usize,
    pub records: Vec<RunRecord>,
}

impl ProtocolResult {
    pub fn best_record(&self) -> &RunRecord {
        &self.records[self.best_index]
    }
}

/// Runs `cfg.runs` trainings with consecutive seeds and keeps the best.
pub fn train_protocol(cfg: &TrainConfig, ds: &MultiViewDataset) -> Result<ProtocolResult> {
    check_dataset(cfg, ds)?;
    let results: Vec<(ModelState, RunRecord)> = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|i| train_once(cfg, ds, cfg.seed.wrapping_add(i)))
        .collect::<Result<_>>()?;
    let (models, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let best_index = select_best(&records).ok_or_else(|| {
        Error::Training(format!(
            "all {} runs aborted; first diagnostic: {}",
            records.len(),
            records[0].aborted.as_deref().unwrap_or("none")
        ))
    })?;
    let best = models.into_iter().nth(best_index).expect("index in range");
    Ok(ProtocolResult {
        best,
        best_index,
        records,
    })
}

// ---- experiments ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub std: f64,
    /// `std` divided by the mean per-feature std of the clean view.
    pub relative_std: f64,
    pub fusion_weights: Vec<f64>,
    pub noisy_view_weight: f64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
}

/// Trains the protocol once per noise level on a corrupted copy of `view`.
pub fn noise_sweep(
    cfg: &TrainConfig,
    ds: &MultiViewDataset,
    view: usize,
    stds: &[f64],
    noise_seed: u64,
) -> Result<Vec<NoiseRow>> {
    if stds.is_empty() {
        return Err(Error::usage("noise sweep needs at least one std"));
    }
    if view >= ds.n_views() {
        return Err(Error::usage(format!(
            "view {view} out of range for {} views",
            ds.n_views()
        )));
    }
    let base = mean_feature_std(ds, view);
    stds.iter()
        .map(|&std| {
            let noisy = corrupt_view(ds, view, std, noise_seed)?;
            let res = train_protocol(cfg, &noisy)?;
            let r = res.best_record();
            Ok(NoiseRow {
                std,
                relative_std: if base > 0.0 { std / base } else { 0.0 },
                fusion_weights: r.fusion_weights.clone(),
                noisy_view_weight: r.fusion_weights[view],
                acc: r.acc,
                nmi: r.nmi,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: ModelKind,
    pub label: String,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub selection_score: Option<f64>,
    pub fusion_weights: Vec<f64>,
    pub aborted_runs: usize,
}

fn ablation_row(cfg: &TrainConfig, ds: &MultiViewDataset, label: String) -> Result<AblationRow> {
    let res = train_protocol(cfg, ds)?;
    let r = res.best_record();
    Ok(AblationRow {
        model: cfg.mode,
        label,
        acc: r.acc,
        nmi: r.nmi,
        selection_score: r.selection_score,
        fusion_weights: r.fusion_weights.clone(),
        aborted_runs: res.records.iter().filter(|r| r.is_aborted()).count(),
    })
}

/// CoMVC with each combination of negative sampling and adaptive weight.
pub fn ablate_contrastive(cfg: &TrainConfig, ds: &MultiViewDataset) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for sampling in [true, false] {
        for adaptive in [true, false] {
            let mut c = cfg.clone();
            c.mode = ModelKind::Comvc;
            c.contrastive.negative_sampling = sampling;
            c.contrastive.adaptive_weight = adaptive;
            let label = format!(
                "negative_sampling={} adaptive_weight={}",
                on_off(sampling),
                on_off(adaptive)
            );
            rows.push(ablation_row(&c, ds, label)?);
        }
    }
    Ok(rows)
}

/// One row per non-empty subset of {L1, L2, L3} for the given model.
pub fn ablate_loss_terms(
    cfg: &TrainConfig,
    ds: &MultiViewDataset,
    mode: ModelKind,
) -> Result<Vec<AblationRow>> {
    LossTerms::all_nonempty()
        .into_iter()
        .map(|terms| {
            let mut c = cfg.clone();
            c.mode = mode;
            c.loss_terms = terms;
            ablation_row(&c, ds, terms.label())
        })
        .collect()
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}
