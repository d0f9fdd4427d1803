//! Per-view fully connected encoders, softmax-weighted fusion and the
//! clustering head.
//!
//! Parameters live in [`ModelState`] as plain tensors. For every forward pass
//! they are bound into a fresh [`Graph`] with [`ModelState::bind`]; gradients
//! come back in the same order as [`ModelState::parameters`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::binfmt::{put_f64, put_f64s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ENCODER_LAYERS: [usize; 3] = [512, 512, 256];
pub const DEFAULT_HEAD_HIDDEN: usize = 100;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Label recorded alongside runs so the initialization scheme is reproducible.
pub const INIT_SCHEME: &str = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))";

const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub view_dims: Vec<usize>,
    pub n_clusters: usize,
    pub encoder_layers: Vec<usize>,
    pub head_hidden: usize,
}

impl ModelSpec {
    /// Default architecture: encoders 512-512-256 and a 100-unit head.
    pub fn new(view_dims: Vec<usize>, n_clusters: usize) -> Self {
        ModelSpec {
            view_dims,
            n_clusters,
            encoder_layers: DEFAULT_ENCODER_LAYERS.to_vec(),
            head_hidden: DEFAULT_HEAD_HIDDEN,
        }
    }

    pub fn n_views(&self) -> usize {
        self.view_dims.len()
    }

    pub fn rep_dim(&self) -> usize {
        *self.encoder_layers.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_dims.is_empty() {
            return Err(Error::usage("model needs at least one view"));
        }
        if self.n_clusters < 2 {
            return Err(Error::usage(format!(
                "model needs k >= 2 clusters, got {}",
                self.n_clusters
            )));
        }
        if self.view_dims.contains(&0) {
            return Err(Error::usage("view dimensions must be positive"));
        }
        if self.encoder_layers.is_empty() || self.encoder_layers.contains(&0) {
            return Err(Error::usage("encoder layer widths must be non-empty and positive"));
        }
        if self.head_hidden == 0 {
            return Err(Error::usage("head width must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Inference,
}

/// Fully connected layer computing `x W + b`, with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let weight = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out))
            .expect("fan_in x fan_out");
        let bias = Tensor::vector(draw(fan_out));
        Linear { weight, bias }
    }
}

/// Per-view encoder networks.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub views: Vec<Vec<Linear>>,
}

/// Unnormalized fusion logits; the weights are their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub logits: Tensor,
}

impl FusionWeights {
    pub fn uniform(n_views: usize) -> Self {
        FusionWeights {
            logits: Tensor::zeros(&[n_views]),
        }
    }

    /// Normalized weights, positive and summing to one.
    pub fn weights(&self) -> Vec<f64> {
        softmax(self.logits.data())
    }
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::full(&[width], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// FC -> ReLU -> batch norm producing `h`, then FC -> softmax producing `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringHead {
    pub hidden: Linear,
    pub bn: BatchNorm,
    pub output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub encoders: EncoderStack,
    pub fusion: FusionWeights,
    pub head: ClusteringHead,
    pub mode: Mode,
}

/// Graph handles for every parameter of a [`ModelState`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub encoders: Vec<Vec<(Var, Var)>>,
    pub fusion_logits: Var,
    pub hidden: (Var, Var),
    pub bn: (Var, Var),
    pub output: (Var, Var),
}

impl BoundParams {
    /// Handles in the order of [`ModelState::parameters`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layers in &self.encoders {
            for &(w, b) in layers {
                out.push(w);
                out.push(b);
            }
        }
        out.push(self.fusion_logits);
        for (a, b) in [self.hidden, self.bn, self.output] {
            out.push(a);
            out.push(b);
        }
        out
    }
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub reps: Vec<Var>,
    pub weights: Var,
    pub fused: Var,
    pub hidden: Var,
    pub alpha: Var,
}

/// Plain-tensor results of inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub reps: Vec<Tensor>,
    pub fused: Tensor,
    pub hidden: Tensor,
    pub alpha: Tensor,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        self.alpha.row_argmax()
    }
}

/// Deterministic initialization; fusion logits start at zero.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = spec
        .view_dims
        .iter()
        .map(|&d| {
            let mut fan_in = d;
            spec.encoder_layers
                .iter()
                .map(|&w| {
                    let l = Linear::init(fan_in, w, &mut rng);
                    fan_in = w;
                    l
                })
                .collect()
        })
        .collect();
    let hidden = Linear::init(spec.rep_dim(), spec.head_hidden, &mut rng);
    let output = Linear::init(spec.head_hidden, spec.n_clusters, &mut rng);
    Ok(ModelState {
        spec: spec.clone(),
        encoders: EncoderStack { views },
        fusion: FusionWeights::uniform(spec.n_views()),
        head: ClusteringHead {
            hidden,
            bn: BatchNorm::new(spec.head_hidden),
            output,
        },
        mode: Mode::Train,
    })
}

impl ModelState {
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layers in &self.encoders.views {
            for l in layers {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out.push(&self.fusion.logits);
        let h = &self.head;
        out.extend([
            &h.hidden.weight,
            &h.hidden.bias,
            &h.bn.gamma,
            &h.bn.beta,
            &h.output.weight,
            &h.output.bias,
        ]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layers in &mut self.encoders.views {
            for l in layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.fusion.logits);
        let h = &mut self.head;
        out.extend([
            &mut h.hidden.weight,
            &mut h.hidden.bias,
            &mut h.bn.gamma,
            &mut h.bn.beta,
            &mut h.output.weight,
            &mut h.output.bias,
        ]);
        out
    }

    pub fn fusion_weights(&self) -> Vec<f64> {
        self.fusion.weights()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut lin = |l: &Linear| (g.param(l.weight.clone()), g.param(l.bias.clone()));
        let encoders = self
            .encoders
            .views
            .iter()
            .map(|layers| layers.iter().map(&mut lin).collect())
            .collect();
        let hidden = lin(&self.head.hidden);
        let output = lin(&self.head.output);
        let bn = (
            g.param(self.head.bn.gamma.clone()),
            g.param(self.head.bn.beta.clone()),
        );
        let fusion_logits = g.param(self.fusion.logits.clone());
        BoundParams {
            encoders,
            fusion_logits,
            hidden,
            bn,
            output,
        }
    }

    fn check_views(&self, shapes: &[&[usize]]) -> Result<usize> {
        if shapes.len() != self.spec.n_views() {
            return Err(Error::shape(format!(
                "model has {} views, batch has {}",
                self.spec.n_views(),
                shapes.len()
            )));
        }
        let n = shapes[0].first().copied().unwrap_or(0);
        for (v, (s, &d)) in shapes.iter().zip(&self.spec.view_dims).enumerate() {
            if s.len() != 2 || s[0] != n || s[1] != d {
                return Err(Error::shape(format!(
                    "view {v}: expected [{n}, {d}], got {s:?}"
                )));
            }
        }
        Ok(n)
    }

    /// Full forward pass. In train mode the batch-norm running statistics are updated.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        p: &BoundParams,
        views: &[Var],
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let reps = self.encode(g, p, views)?;
        let (fused, weights) = fuse(g, p.fusion_logits, &reps)?;
        let (hidden, alpha) = assign(g, p, &mut self.head, fused, mode)?;
        Ok(ForwardOutput {
            reps,
            weights,
            fused,
            hidden,
            alpha,
        })
    }

    /// Maps each view through its encoder.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, views: &[Var]) -> Result<Vec<Var>> {
        let shapes: Vec<Vec<usize>> = views.iter().map(|&v| g.shape(v).to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        self.check_views(&refs)?;
        views
            .iter()
            .zip(&p.encoders)
            .map(|(&x, layers)| {
                let mut z = x;
                for &(w, b) in layers {
                    let a = g.matmul(z, w)?;
                    let a = g.add(a, b)?;
                    z = g.relu(a)?;
                }
                Ok(z)
            })
            .collect()
    }

    /// Inference-mode forward pass on plain tensors; rows are processed independently.
    pub fn infer(&self, views: &[Tensor]) -> Result<Inference> {
        let shapes: Vec<&[usize]> = views.iter().map(Tensor::shape).collect();
        self.check_views(&shapes)?;
        let mut g = Graph::new();
        let p = self.bind_constants(&mut g);
        let xs: Vec<Var> = views.iter().map(|t| g.constant(t.clone())).collect();
        let reps = self.encode(&mut g, &p, &xs)?;
        let (fused, _) = fuse(&mut g, p.fusion_logits, &reps)?;
        let mut head = self.head.clone();
        let (hidden, alpha) = assign(&mut g, &p, &mut head, fused, Mode::Inference)?;
        Ok(Inference {
            reps: reps.iter().map(|&r| g.value(r).clone()).collect(),
            fused: g.value(fused).clone(),
            hidden: g.value(hidden).clone(),
            alpha: g.value(alpha).clone(),
        })
    }

    fn bind_constants(&self, g: &mut Graph) -> BoundParams {
        let mut lin = |l: &Linear| (g.constant(l.weight.clone()), g.constant(l.bias.clone()));
        let encoders = self
            .encoders
            .views
            .iter()
            .map(|layers| layers.iter().map(&mut lin).collect())
            .collect();
        let hidden = lin(&self.head.hidden);
        let output = lin(&self.head.output);
        let bn = (
            g.constant(self.head.bn.gamma.clone()),
            g.constant(self.head.bn.beta.clone()),
        );
        let fusion_logits = g.constant(self.fusion.logits.clone());
        BoundParams {
            encoders,
            fusion_logits,
            hidden,
            bn,
            output,
        }
    }
}

/// Weighted average of view representations with softmax-normalized weights.
///
/// Returns the fused representation and the `1 x V` weight row.
pub fn fuse(g: &mut Graph, logits: Var, reps: &[Var]) -> Result<(Var, Var)> {
    if reps.is_empty() {
        return Err(Error::usage("fusion needs at least one representation"));
    }
    let v = reps.len();
    if g.value(logits).numel() != v {
        return Err(Error::shape(format!(
            "{} fusion logits for {v} views",
            g.value(logits).numel()
        )));
    }
    let shape = g.shape(reps[0]).to_vec();
    if reps.iter().any(|&r| g.shape(r) != shape.as_slice()) {
        return Err(Error::shape("fused representations differ in shape"));
    }
    let row = g.reshape(logits, &[1, v])?;
    let weights = g.row_softmax(row)?;
    let mut fused = None;
    for (i, &z) in reps.iter().enumerate() {
        let w = g.gather(weights, vec![i], &[])?;
        let term = g.mul(z, w)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((fused.expect("non-empty"), weights))
}

/// Clustering head: returns the hidden representation `h` and soft assignments `alpha`.
pub fn assign(
    g: &mut Graph,
    p: &BoundParams,
    head: &mut ClusteringHead,
    fused: Var,
    mode: Mode,
) -> Result<(Var, Var)> {
    let n = g.shape(fused)[0];
    if mode == Mode::Train && n < 2 {
        return Err(Error::usage(
            "train-mode batch normalization needs at least 2 samples",
        ));
    }
    let a = g.matmul(fused, p.hidden.0)?;
    let a = g.add(a, p.hidden.1)?;
    let a = g.relu(a)?;
    let normed = match mode {
        Mode::Train => {
            let mean = g.mean(a, Some(0))?;
            let centered = g.sub(a, mean)?;
            let sq = g.square(centered)?;
            let var = g.mean(sq, Some(0))?;
            let std = g.add_scalar(var, head.bn.eps)?;
            let std = g.sqrt(std)?;
            let xhat = g.div(centered, std)?;

            let bn = &mut head.bn;
            let m = bn.momentum;
            let unbias = n as f64 / (n as f64 - 1.0);
            let batch_mean = g.value(mean).data().to_vec();
            let batch_var = g.value(var).data().to_vec();
            for (r, b) in bn.running_mean.data_mut().iter_mut().zip(&batch_mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in bn.running_var.data_mut().iter_mut().zip(&batch_var) {
                *r = (1.0 - m) * *r + m * b * unbias;
            }
            xhat
        }
        Mode::Inference => {
            let mean = g.constant(head.bn.running_mean.clone());
            let std = g.constant(head.bn.running_var.map(|v| (v + head.bn.eps).sqrt()));
            let centered = g.sub(a, mean)?;
            g.div(centered, std)?
        }
    };
    let scaled = g.mul(normed, p.bn.0)?;
    let hidden = g.add(scaled, p.bn.1)?;
    let logits = g.matmul(hidden, p.output.0)?;
    let logits = g.add(logits, p.output.1)?;
    let alpha = g.row_softmax(logits)?;
    Ok((hidden, alpha))
}

// ---- checkpoints --------------------------------------------------------

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    put_u32(out, to_u32(t.ndim(), "tensor rank")?);
    for &d in t.shape() {
        put_u32(out, to_u32(d, "tensor extent")?);
    }
    put_f64s(out, t.data());
    Ok(())
}

fn read_tensor(r: &mut Reader<'_>, expected: &[usize], what: &str) -> Result<Tensor> {
    let rank = r.u32(what)? as usize;
    if rank > 8 {
        return r.fail(format!("{what}: implausible rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32(what)? as usize);
    }
    if shape != expected {
        return r.fail(format!("{what}: shape {shape:?}, expected {expected:?}"));
    }
    let data = r.f64s(shape.iter().product(), what)?;
    Tensor::new(shape, data)
}

impl ModelState {
    /// Serializes to the MVCK checkpoint format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, to_u32(s.n_views(), "views")?);
        put_u32(&mut out, to_u32(s.n_clusters, "clusters")?);
        for &d in &s.view_dims {
            put_u32(&mut out, to_u32(d, "view dim")?);
        }
        put_u32(&mut out, to_u32(s.encoder_layers.len(), "encoder depth")?);
        for &w in &s.encoder_layers {
            put_u32(&mut out, to_u32(w, "encoder width")?);
        }
        put_u32(&mut out, to_u32(s.head_hidden, "head width")?);
        put_f64(&mut out, self.head.bn.momentum);
        put_f64(&mut out, self.head.bn.eps);
        let params = self.parameters();
        put_u32(&mut out, to_u32(params.len() + 2, "tensor count")?);
        for t in params {
            put_tensor(&mut out, t)?;
        }
        put_tensor(&mut out, &self.head.bn.running_mean)?;
        put_tensor(&mut out, &self.head.bn.running_var)?;
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return r.fail(format!("unsupported checkpoint version {version}"));
        }
        let n_views = r.u32("view count")? as usize;
        let n_clusters = r.u32("cluster count")? as usize;
        if n_views > 1024 {
            return r.fail(format!("implausible view count {n_views}"));
        }
        let mut view_dims = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            view_dims.push(r.u32("view dim")? as usize);
        }
        let depth = r.u32("encoder depth")? as usize;
        if depth > 1024 {
            return r.fail(format!("implausible encoder depth {depth}"));
        }
        let mut encoder_layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            encoder_layers.push(r.u32("encoder width")? as usize);
        }
        let head_hidden = r.u32("head width")? as usize;
        let momentum = r.f64("bn momentum")?;
        let eps = r.f64("bn eps")?;
        let spec = ModelSpec {
            view_dims,
            n_clusters,
            encoder_layers,
            head_hidden,
        };
        let at = r.offset();
        spec.validate().map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;

        // Shapes come from a freshly initialized model of the same architecture.
        let mut state = init_model(&spec, 0)?;
        let count = r.u32("tensor count")? as usize;
        let expected = state.parameters().len() + 2;
        if count != expected {
            return r.fail(format!("{count} tensors, expected {expected}"));
        }
        for (i, slot) in state.parameters_mut().into_iter().enumerate() {
            let shape = slot.shape().to_vec();
            *slot = read_tensor(&mut r, &shape, &format!("parameter {i}"))?;
        }
        let w = spec.head_hidden;
        state.head.bn.running_mean = read_tensor(&mut r, &[w], "running mean")?;
        state.head.bn.running_var = read_tensor(&mut r, &[w], "running variance")?;
        state.head.bn.momentum = momentum;
        state.head.bn.eps = eps;
        state.mode = Mode::Inference;
        r.finish()?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(dims: Vec<usize>, k: usize) -> ModelSpec {
        ModelSpec {
            view_dims: dims,
            n_clusters: k,
            encoder_layers: vec![8, 6],
            head_hidden: 5,
        }
    }

    fn random_views(spec: &ModelSpec, n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec.view_dims
            .iter()
            .map(|&d| {
                Tensor::new(
                    vec![n, d],
                    (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn initial_weights_are_uniform() {
        let m = init_model(&ModelSpec::new(vec![2, 2], 5), 1).unwrap();
        assert_eq!(m.fusion_weights(), vec![0.5, 0.5]);
        let m = init_model(&small_spec(vec![1, 2, 3], 2), 1).unwrap();
        for w in m.fusion_weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let s = small_spec(vec![3, 4], 3);
        assert_eq!(init_model(&s, 9).unwrap(), init_model(&s, 9).unwrap());
        assert_ne!(init_model(&s, 9).unwrap(), init_model(&s, 10).unwrap());
        assert!(init_model(&small_spec(vec![], 3), 0).is_err());
        assert!(init_model(&small_spec(vec![2], 1), 0).is_err());
        assert!(init_model(&small_spec(vec![0], 2), 0).is_err());
    }

    #[test]
    fn default_widths() {
        let s = ModelSpec::new(vec![7, 3], 4);
        let m = init_model(&s, 0).unwrap();
        let out = m.infer(&random_views(&s, 3, 0)).unwrap();
        assert_eq!(out.reps[0].shape(), &[3, 256]);
        assert_eq!(out.hidden.shape(), &[3, 100]);
        assert_eq!(out.alpha.shape(), &[3, 4]);
    }

    #[test]
    fn zero_encoder_gives_zero_reps() {
        let s = small_spec(vec![3, 2], 2);
        let mut m = init_model(&s, 0).unwrap();
        for layers in &mut m.encoders.views {
            for l in layers {
                l.weight = Tensor::zeros(l.weight.shape());
                l.bias = Tensor::zeros(l.bias.shape());
            }
        }
        let out = m.infer(&random_views(&s, 1, 3)).unwrap();
        assert!(out.reps.iter().all(|r| r.data().iter().all(|&x| x == 0.0)));
        assert_eq!(out.reps[0].shape(), &[1, 6]);
    }

    #[test]
    fn encode_rejects_bad_dims() {
        let s = small_spec(vec![3, 2], 2);
        let m = init_model(&s, 0).unwrap();
        let mut views = random_views(&s, 4, 0);
        views[1] = Tensor::zeros(&[4, 5]);
        assert!(matches!(m.infer(&views), Err(Error::Shape(_))));
        assert!(matches!(m.infer(&views[..1]), Err(Error::Shape(_))));
    }

    #[test]
    fn fuse_examples() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[2]));
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![3.0, 6.0]]).unwrap());
        let (f, w) = fuse(&mut g, logits, &[a, b]).unwrap();
        assert_eq!(g.value(f).data(), &[2.0, 4.0]);
        assert_eq!(g.value(w).data(), &[0.5, 0.5]);

        let skew = g.param(Tensor::vector(vec![3.0, -1.0]));
        let (f, _) = fuse(&mut g, skew, &[a, a]).unwrap();
        for (x, y) in g.value(f).data().iter().zip([1.0, 2.0]) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(fuse(&mut g, logits, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn fuse_gradient_reaches_logits_and_reps() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::vector(vec![0.3, -0.2]));
        let a = g.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = g.param(Tensor::from_rows(&[vec![-1.0, 0.5]]).unwrap());
        let (f, _) = fuse(&mut g, logits, &[a, b]).unwrap();
        let s = g.sum(f, None).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(logits).unwrap().data().iter().all(|x| x.abs() > 0.0));
        assert!(g.grad(a).is_some() && g.grad(b).is_some());
    }

    #[test]
    fn train_mode_needs_two_samples() {
        let s = small_spec(vec![2], 2);
        let mut m = init_model(&s, 0).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let x = g.constant(random_views(&s, 1, 0).remove(0));
        assert!(matches!(
            m.forward(&mut g, &p, &[x], Mode::Train),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn train_mode_batch_norm_centres_features() {
        let s = small_spec(vec![3, 2], 3);
        let mut m = init_model(&s, 4).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let xs: Vec<Var> = random_views(&s, 16, 5)
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let out = m.forward(&mut g, &p, &xs, Mode::Train).unwrap();
        // gamma = 1 and beta = 0 at init, so h is the normalized activation
        let h = g.value(out.hidden);
        for c in 0..h.cols() {
            let mean: f64 = (0..h.rows()).map(|r| h.at(r, c)).sum::<f64>() / h.rows() as f64;
            assert!(mean.abs() < 1e-8, "feature {c} mean {mean}");
        }
        let a = g.value(out.alpha);
        for r in 0..a.rows() {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_ne!(m.head.bn.running_mean, Tensor::zeros(&[5]));
    }

    #[test]
    fn inference_is_batch_independent() {
        let s = small_spec(vec![3, 2], 3);
        let mut m = init_model(&s, 4).unwrap();
        m.head.bn.running_mean = Tensor::full(&[5], 0.2);
        m.head.bn.running_var = Tensor::full(&[5], 1.7);
        let views = random_views(&s, 7, 8);
        let full = m.infer(&views).unwrap();
        for i in 0..7 {
            let single: Vec<Tensor> = views.iter().map(|v| v.select_rows(&[i])).collect();
            let one = m.infer(&single).unwrap();
            assert_eq!(one.alpha.row(0), full.alpha.row(i));
            assert_eq!(one.hidden.row(0), full.hidden.row(i));
        }
    }

    #[test]
    fn shifting_logits_changes_nothing() {
        let s = small_spec(vec![3, 2], 3);
        let mut m = init_model(&s, 2).unwrap();
        m.fusion.logits = Tensor::vector(vec![0.4, -1.1]);
        let views = random_views(&s, 5, 1);
        let base = m.infer(&views).unwrap();
        m.fusion.logits = Tensor::vector(vec![0.4 + 7.5, -1.1 + 7.5]);
        let shifted = m.infer(&views).unwrap();
        for (a, b) in base.alpha.data().iter().zip(shifted.alpha.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = small_spec(vec![3, 2], 3);
        let mut m = init_model(&s, 6).unwrap();
        m.head.bn.running_var = Tensor::full(&[5], 0.9);
        m.mode = Mode::Inference;
        let bytes = m.to_bytes().unwrap();
        let back = ModelState::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let views = random_views(&s, 4, 2);
        assert_eq!(m.infer(&views).unwrap(), back.infer(&views).unwrap());

        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(
                ModelState::from_bytes(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ModelState::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
