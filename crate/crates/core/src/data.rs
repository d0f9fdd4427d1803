//! Multi-view datasets: synthetic toy data, noise corruption, file IO and
//! mini-batching.
//!
//! # MVD1 layout (little-endian)
//!
//! ```text
//! "MVD1" | u32 version = 1 | u32 n | u32 V | V x u32 dims | u8 has_labels
//!        | V blocks of n*dim f64, row-major | [n x u32 labels]
//! ```

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binfmt::{put_f64s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MVD1_MAGIC: &[u8; 4] = b"MVD1";
const MVD1_VERSION: u32 = 1;

/// `n` objects observed through `V` views, with optional ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub name: String,
    /// One `n x d_v` matrix per view.
    pub views: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub provenance: String,
}

impl MultiViewDataset {
    pub fn new(
        name: impl Into<String>,
        views: Vec<Tensor>,
        labels: Option<Vec<usize>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let ds = MultiViewDataset {
            name: name.into(),
            views,
            labels,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::usage("dataset has no views"));
        }
        let n = self.views[0].shape().first().copied().unwrap_or(0);
        for (v, t) in self.views.iter().enumerate() {
            if t.ndim() != 2 || t.rows() != n {
                return Err(Error::shape(format!(
                    "view {v} has shape {:?}, expected {n} rows",
                    t.shape()
                )));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::shape(format!("{} labels for {n} objects", l.len())));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.views[0].rows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.views.iter().map(Tensor::cols).collect()
    }

    /// Number of distinct labels, if labeled.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Per-view row subsets.
    pub fn gather(&self, idx: &[usize]) -> Vec<Tensor> {
        self.views.iter().map(|v| v.select_rows(idx)).collect()
    }
}

// ---- toy data -------------------------------------------------------------

/// A 2-D Gaussian component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterGaussian {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

/// Parameters of a two-view, two-dimensional Gaussian toy dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub samples_per_cluster: usize,
    /// `views[v][c]`: distribution of cluster `c` in view `v`.
    pub views: Vec<Vec<ClusterGaussian>>,
    pub seed: u64,
}

const GROUP_SEPARATION: f64 = 6.0;
const DEFAULT_SAMPLES: usize = 200;

/// Elongated covariance: standard deviations 1 and 0.25, rotated by `angle`.
fn elongated(angle: f64) -> [[f64; 2]; 2] {
    let (s, c) = angle.sin_cos();
    let (major, minor) = (1.0f64, 0.25f64);
    let (a, b) = (major * major, minor * minor);
    [
        [a * c * c + b * s * s, (a - b) * c * s],
        [(a - b) * c * s, a * s * s + b * c * c],
    ]
}

fn toy_from_groups(group_means: &[Vec<[f64; 2]>], seed: u64) -> ToySpec {
    let k = group_means[0].len();
    let views = group_means
        .iter()
        .map(|means| {
            means
                .iter()
                .enumerate()
                .map(|(c, &mean)| ClusterGaussian {
                    mean,
                    cov: elongated(c as f64 * std::f64::consts::PI / k as f64),
                })
                .collect()
        })
        .collect();
    ToySpec {
        samples_per_cluster: DEFAULT_SAMPLES,
        views,
        seed,
    }
}

impl ToySpec {
    /// Five clusters. View 1: clusters (1,2,3) and (4,5) coincide.
    /// View 2: cluster 1 alone, (2,4) and (3,5) coincide.
    pub fn five_cluster(seed: u64) -> Self {
        let s = GROUP_SEPARATION;
        let (a, b) = ([0.0, 0.0], [s, 0.0]);
        let (p, q, r) = ([0.0, 0.0], [s, 0.0], [s / 2.0, s * 3f64.sqrt() / 2.0]);
        toy_from_groups(&[vec![a, a, a, b, b], vec![p, q, r, q, r]], seed)
    }

    /// Three clusters. View 1: cluster 1 alone, (2,3) coincide.
    /// View 2: (1,2) coincide, cluster 3 alone.
    pub fn three_cluster(seed: u64) -> Self {
        let s = GROUP_SEPARATION;
        let (a, b) = ([0.0, 0.0], [s, 0.0]);
        toy_from_groups(&[vec![a, b, b], vec![a, a, b]], seed)
    }

    /// Default spec for `k` in {3, 5}.
    pub fn preset(k: usize, seed: u64) -> Result<Self> {
        match k {
            3 => Ok(Self::three_cluster(seed)),
            5 => Ok(Self::five_cluster(seed)),
            _ => Err(Error::usage(format!("toy presets exist for k = 3 or 5, not {k}"))),
        }
    }

    pub fn with_samples(mut self, per_cluster: usize) -> Self {
        self.samples_per_cluster = per_cluster;
        self
    }

    /// Multiplies every covariance by `factor`.
    pub fn with_cov_scale(mut self, factor: f64) -> Self {
        for comps in &mut self.views {
            for g in comps.iter_mut() {
                for row in g.cov.iter_mut() {
                    for x in row.iter_mut() {
                        *x *= factor;
                    }
                }
            }
        }
        self
    }

    pub fn k(&self) -> usize {
        self.views.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.views.is_empty() {
            return Err(Error::usage("toy spec needs at least one view and one cluster"));
        }
        if self.samples_per_cluster == 0 {
            return Err(Error::usage("samples per cluster must be positive"));
        }
        for (v, comps) in self.views.iter().enumerate() {
            if comps.len() != k {
                return Err(Error::usage(format!(
                    "view {v} defines {} clusters, expected {k}",
                    comps.len()
                )));
            }
            for (c, g) in comps.iter().enumerate() {
                let [[a, b], [b2, d]] = g.cov;
                let scale = a.abs().max(d.abs()).max(f64::MIN_POSITIVE);
                let symmetric = (b - b2).abs() <= 1e-12 * scale;
                let pd = a > 0.0 && a * d - b * b2 > 0.0;
                if !(symmetric && pd) || !g.mean.iter().all(|m| m.is_finite()) {
                    return Err(Error::usage(format!(
                        "view {v} cluster {c}: covariance {:?} is not symmetric positive definite",
                        g.cov
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Samples the toy dataset; objects are ordered by cluster.
pub fn generate_toy(spec: &ToySpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let k = spec.k();
    let n = k * spec.samples_per_cluster;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data: Vec<Vec<f64>> = vec![Vec::with_capacity(2 * n); spec.views.len()];
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        for _ in 0..spec.samples_per_cluster {
            labels.push(c);
            for (v, comps) in spec.views.iter().enumerate() {
                let g = &comps[c];
                let [[a, b], [_, d]] = g.cov;
                // Cholesky factor of the 2x2 covariance
                let l00 = a.sqrt();
                let l10 = b / l00;
                let l11 = (d - l10 * l10).max(0.0).sqrt();
                let z0: f64 = StandardNormal.sample(&mut rng);
                let z1: f64 = StandardNormal.sample(&mut rng);
                data[v].push(g.mean[0] + l00 * z0);
                data[v].push(g.mean[1] + l10 * z0 + l11 * z1);
            }
        }
    }
    let views = data
        .into_iter()
        .map(|d| Tensor::new(vec![n, 2], d))
        .collect::<Result<_>>()?;
    MultiViewDataset::new(
        format!("toy{k}"),
        views,
        Some(labels),
        format!(
            "generate_toy k={k} samples_per_cluster={} seed={}",
            spec.samples_per_cluster, spec.seed
        ),
    )
}

/// Adds i.i.d. Gaussian noise with standard deviation `noise_std` to one view.
pub fn corrupt_view(
    ds: &MultiViewDataset,
    view: usize,
    noise_std: f64,
    seed: u64,
) -> Result<MultiViewDataset> {
    if view >= ds.n_views() {
        return Err(Error::usage(format!(
            "view index {view} out of range for {} views",
            ds.n_views()
        )));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::usage(format!("noise std must be finite and >= 0, got {noise_std}")));
    }
    let mut out = ds.clone();
    out.provenance = format!("{}; noise view={view} std={noise_std} seed={seed}", ds.provenance);
    if noise_std == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in out.views[view].data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x += noise_std * z;
    }
    Ok(out)
}

/// Population standard deviation of every entry of one view.
pub fn view_std(ds: &MultiViewDataset, view: usize) -> f64 {
    let d = ds.views[view].data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean over features of each feature's standard deviation in one view.
pub fn mean_feature_std(ds: &MultiViewDataset, view: usize) -> f64 {
    let t = &ds.views[view];
    let (n, d) = (t.rows(), t.cols());
    let mut total = 0.0;
    for c in 0..d {
        let mean = (0..n).map(|r| t.at(r, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (t.at(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

// ---- batching -------------------------------------------------------------

/// Shuffled index batches for one training epoch; the final partial batch is dropped.
pub fn training_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    check_batch(n, batch_size)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// In-order batches covering all `n` objects, last batch possibly short.
pub fn eval_batches(n: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    let order: Vec<usize> = (0..n).collect();
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn check_batch(n: usize, batch_size: usize) -> Result<()> {
    if batch_size < 2 {
        return Err(Error::usage(format!("batch size must be >= 2, got {batch_size}")));
    }
    if batch_size > n {
        return Err(Error::usage(format!(
            "batch size {batch_size} exceeds dataset size {n}"
        )));
    }
    Ok(())
}

/// Per-view tensors for each training batch of an epoch.
pub fn batches(
    ds: &MultiViewDataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<Tensor>>> {
    Ok(training_batches(ds.n(), batch_size, seed, epoch)?
        .iter()
        .map(|idx| ds.gather(idx))
        .collect())
}

// ---- file formats ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Mvd1,
    /// JSON manifest listing one CSV file per view and an optional label file.
    CsvManifest,
}

impl DataFormat {
    /// `.json` selects the CSV manifest, anything else MVD1.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => DataFormat::CsvManifest,
            _ => DataFormat::Mvd1,
        }
    }
}

/// CSV manifest: paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvManifest {
    #[serde(default)]
    pub name: Option<String>,
    pub views: Vec<CsvView>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvView {
    pub path: PathBuf,
    pub dim: usize,
}

pub fn to_mvd1(ds: &MultiViewDataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MVD1_MAGIC);
    put_u32(&mut out, MVD1_VERSION);
    put_u32(&mut out, to_u32(ds.n(), "n")?);
    put_u32(&mut out, to_u32(ds.n_views(), "V")?);
    for d in ds.dims() {
        put_u32(&mut out, to_u32(d, "dim")?);
    }
    out.push(ds.labels.is_some() as u8);
    for v in &ds.views {
        put_f64s(&mut out, v.data());
    }
    if let Some(labels) = &ds.labels {
        for &l in labels {
            put_u32(&mut out, to_u32(l, "label")?);
        }
    }
    Ok(out)
}

pub fn from_mvd1(buf: &[u8], name: &str) -> Result<MultiViewDataset> {
    let mut r = Reader::new(buf);
    r.magic(MVD1_MAGIC)?;
    let version = r.u32("version")?;
    if version != MVD1_VERSION {
        return r.fail(format!("unsupported MVD1 version {version}"));
    }
    let n = r.u32("n")? as usize;
    let v = r.u32("view count")? as usize;
    if v == 0 {
        return r.fail("dataset has no views");
    }
    let mut dims = Vec::with_capacity(v.min(1024));
    for _ in 0..v {
        dims.push(r.u32("view dim")? as usize);
    }
    let has_labels = match r.u8("label flag")? {
        0 => false,
        1 => true,
        other => return r.fail(format!("label flag must be 0 or 1, got {other}")),
    };
    let mut views = Vec::with_capacity(v);
    for (i, &d) in dims.iter().enumerate() {
        let len = n.checked_mul(d).ok_or_else(|| Error::Format {
            offset: r.offset(),
            msg: "view size overflows".into(),
        })?;
        let data = r.f64s(len, &format!("view {i} data"))?;
        views.push(Tensor::new(vec![n, d], data)?);
    }
    let labels = if has_labels {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u32("labels")? as usize);
        }
        Some(l)
    } else {
        None
    };
    r.finish()?;
    MultiViewDataset::new(name, views, labels, format!("MVD1 file {name}"))
}

fn read_csv_matrix(path: &Path, dim: Option<usize>) -> Result<(usize, Vec<f64>, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format {
                offset: 0,
                msg: format!("{}: {other:?}", path.display()),
            },
        })?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = dim;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format {
            offset: e.position().map_or(0, |p| p.byte()),
            msg: format!("{}: {e}", path.display()),
        })?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Format {
                offset,
                msg: format!(
                    "{}: row {rows} has {} fields, expected {w}",
                    path.display(),
                    rec.len()
                ),
            });
        }
        for field in rec.iter() {
            let x: f64 = field.parse().map_err(|_| Error::Format {
                offset,
                msg: format!("{}: row {rows}: not a number: {field:?}", path.display()),
            })?;
            data.push(x);
        }
        rows += 1;
    }
    Ok((rows, data, width.unwrap_or(0)))
}

pub fn load_csv_manifest(path: &Path) -> Result<MultiViewDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CsvManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: 0,
        msg: format!("{}: {e}", path.display()),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(manifest.views.len());
    for (i, v) in manifest.views.iter().enumerate() {
        let p = base.join(&v.path);
        let (rows, data, _) = read_csv_matrix(&p, Some(v.dim))?;
        views.push(Tensor::new(vec![rows, v.dim], data).map_err(|_| Error::Format {
            offset: 0,
            msg: format!("view {i}: {} does not hold {} columns", p.display(), v.dim),
        })?);
    }
    let labels = match &manifest.labels {
        None => None,
        Some(lp) => {
            let p = base.join(lp);
            let (_, data, width) = read_csv_matrix(&p, None)?;
            if width > 1 {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("{}: labels must be a single column", p.display()),
                });
            }
            let mut labels = Vec::with_capacity(data.len());
            for x in data {
                if x < 0.0 || x.fract() != 0.0 {
                    return Err(Error::Format {
                        offset: 0,
                        msg: format!("{}: label {x} is not a non-negative integer", p.display()),
                    });
                }
                labels.push(x as usize);
            }
            Some(labels)
        }
    };
    let name = manifest
        .name
        .clone()
        .unwrap_or_else(|| path.display().to_string());
    MultiViewDataset::new(name, views, labels, format!("CSV manifest {}", path.display())).map_err(
        |e| Error::Format {
            offset: 0,
            msg: format!("{}: {e}", path.display()),
        },
    )
}

pub fn load(path: &Path, format: DataFormat) -> Result<MultiViewDataset> {
    match format {
        DataFormat::Mvd1 => {
            let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("dataset");
            from_mvd1(&buf, name)
        }
        DataFormat::CsvManifest => load_csv_manifest(path),
    }
}

/// Writes MVD1 bytes.
pub fn save(ds: &MultiViewDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_mvd1(ds)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn distinct_points(t: &Tensor) -> usize {
        let mut set = BTreeSet::new();
        for i in 0..t.rows() {
            // round to the nearest 1e-3 to merge numerically coincident samples
            let key: Vec<i64> = t.row(i).iter().map(|x| (x * 1e3).round() as i64).collect();
            set.insert(key);
        }
        set.len()
    }

    #[test]
    fn five_cluster_shape() {
        let ds = generate_toy(&ToySpec::five_cluster(7)).unwrap();
        assert_eq!(ds.n(), 1000);
        assert_eq!(ds.n_views(), 2);
        assert_eq!(ds.dims(), vec![2, 2]);
        let labels = ds.labels.as_ref().unwrap();
        for c in 0..5 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 200);
        }
    }

    #[test]
    fn collapsed_covariances_show_partition_structure() {
        let ds = generate_toy(&ToySpec::five_cluster(1).with_cov_scale(1e-12)).unwrap();
        assert_eq!(distinct_points(&ds.views[0]), 2);
        assert_eq!(distinct_points(&ds.views[1]), 3);
        let labels = ds.labels.clone().unwrap();
        let point = |v: usize, c: usize| {
            let i = labels.iter().position(|&l| l == c).unwrap();
            ds.views[v].row(i).iter().map(|x| x.round() as i64).collect::<Vec<_>>()
        };
        // view 1: {1,2,3} {4,5}; view 2: {1} {2,4} {3,5}
        assert_eq!(point(0, 0), point(0, 2));
        assert_ne!(point(0, 0), point(0, 3));
        assert_eq!(point(1, 1), point(1, 3));
        assert_eq!(point(1, 2), point(1, 4));
        assert_ne!(point(1, 0), point(1, 1));

        let ds = generate_toy(&ToySpec::three_cluster(1).with_cov_scale(1e-12)).unwrap();
        assert_eq!(distinct_points(&ds.views[0]), 2);
        assert_eq!(distinct_points(&ds.views[1]), 2);
    }

    #[test]
    fn toy_is_deterministic() {
        let a = generate_toy(&ToySpec::three_cluster(3)).unwrap();
        let b = generate_toy(&ToySpec::three_cluster(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_toy(&ToySpec::three_cluster(4)).unwrap();
        assert_ne!(a.views, c.views);
    }

    #[test]
    fn rejects_bad_covariance() {
        let mut spec = ToySpec::three_cluster(0);
        spec.views[0][1].cov = [[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(generate_toy(&spec), Err(Error::Usage(_))));
        let mut spec = ToySpec::three_cluster(0);
        spec.views[1][0].cov = [[1.0, 0.1], [0.0, 1.0]];
        assert!(generate_toy(&spec).is_err());
        assert!(ToySpec::preset(4, 0).is_err());
    }

    #[test]
    fn corrupt_examples() {
        let ds = generate_toy(&ToySpec::three_cluster(2)).unwrap();
        let same = corrupt_view(&ds, 1, 0.0, 5).unwrap();
        assert_eq!(same.views, ds.views);
        let noisy = corrupt_view(&ds, 1, 2.0, 5).unwrap();
        assert_eq!(noisy.views[0], ds.views[0]);
        assert_ne!(noisy.views[1], ds.views[1]);
        assert!(corrupt_view(&ds, 2, 1.0, 0).is_err());
        assert!(corrupt_view(&ds, 0, -1.0, 0).is_err());
    }

    #[test]
    fn noise_has_requested_spread() {
        // 5000 objects x 2 dims = 10^4 noise draws
        let ds = generate_toy(&ToySpec::five_cluster(2).with_samples(1000)).unwrap();
        let std = 1.7;
        let noisy = corrupt_view(&ds, 1, std, 11).unwrap();
        let diff: Vec<f64> = noisy.views[1]
            .data()
            .iter()
            .zip(ds.views[1].data())
            .map(|(a, b)| a - b)
            .collect();
        let n = diff.len() as f64;
        let mean = diff.iter().sum::<f64>() / n;
        let emp = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((emp - std).abs() / std < 0.05, "empirical std {emp}");
    }

    #[test]
    fn batching_rules() {
        assert_eq!(training_batches(250, 100, 0, 0).unwrap().len(), 2);
        let eval = eval_batches(250, 100).unwrap();
        assert_eq!(eval.iter().map(Vec::len).sum::<usize>(), 250);
        assert_eq!(eval.len(), 3);
        assert!(training_batches(50, 100, 0, 0).is_err());
        assert!(training_batches(50, 1, 0, 0).is_err());
        assert_ne!(
            training_batches(250, 100, 0, 0).unwrap(),
            training_batches(250, 100, 0, 1).unwrap()
        );
        assert_eq!(
            training_batches(250, 100, 4, 2).unwrap(),
            training_batches(250, 100, 4, 2).unwrap()
        );
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let all = training_batches(300, 100, 9, 3).unwrap().concat();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn mvd1_round_trip_and_truncation() {
        let ds = generate_toy(&ToySpec::three_cluster(8).with_samples(5)).unwrap();
        let bytes = to_mvd1(&ds).unwrap();
        let back = from_mvd1(&bytes, "x").unwrap();
        assert_eq!(back.views, ds.views);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(to_mvd1(&back).unwrap(), bytes);

        for cut in [0, 2, 17, bytes.len() - 3] {
            assert!(matches!(from_mvd1(&bytes[..cut], "x"), Err(Error::Format { .. })));
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            from_mvd1(&bad, "x"),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn csv_manifest_fixture() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "1.5,2\n-3,4e-1\n").unwrap();
        std::fs::write(dir.path().join("b.csv"), "7\n8\n").unwrap();
        std::fs::write(dir.path().join("y.csv"), "1\n0\n").unwrap();
        let manifest = r#"{"name": "tiny",
            "views": [{"path": "a.csv", "dim": 2}, {"path": "b.csv", "dim": 1}],
            "labels": "y.csv"}"#;
        let mp = dir.path().join("m.json");
        std::fs::write(&mp, manifest).unwrap();
        let ds = load(&mp, DataFormat::from_path(&mp)).unwrap();
        assert_eq!(ds.name, "tiny");
        assert_eq!(ds.views[0].data(), &[1.5, 2.0, -3.0, 0.4]);
        assert_eq!(ds.views[1].data(), &[7.0, 8.0]);
        assert_eq!(ds.labels, Some(vec![1, 0]));

        std::fs::write(&mp, r#"{"views": [{"path": "missing.csv", "dim": 1}]}"#).unwrap();
        assert!(matches!(load(&mp, DataFormat::CsvManifest), Err(Error::Io { .. })));
        std::fs::write(&mp, r#"{"views": [{"path": "a.csv", "dim": 3}]}"#).unwrap();
        assert!(matches!(load(&mp, DataFormat::CsvManifest), Err(Error::Format { .. })));
    }
}
