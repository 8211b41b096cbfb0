//! Datasets: seeded synthetic tasks, a fixed-record binary image format,
//! per-class subsets and additive input noise.

use std::path::Path;

use jacmatch_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    sample_shape: Vec<usize>,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
    stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(name: &str, sample_shape: &[usize], inputs: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let len: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || len == 0 {
            return Err(Error::InvalidArgument(format!("bad sample shape {sample_shape:?}")));
        }
        if inputs.len() != len * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values for {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset {
            name: name.into(),
            sample_shape: sample_shape.to_vec(),
            inputs,
            labels,
            classes,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.sample(i).to_vec()).collect()
    }

    pub fn stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    pub fn is_normalized(&self) -> bool {
        self.stats.is_some()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Batch tensor `(B, sample_shape..)` and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let n = self.sample_len();
        let mut v = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of range for {} examples", self.len())));
            }
            v.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        Ok((Tensor::new(v, &shape)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Channels for normalization: the leading axis of `(C, H, W)` samples,
    /// every feature of flat samples.
    fn channels(&self) -> (usize, usize) {
        if self.sample_shape.len() == 3 {
            (self.sample_shape[0], self.sample_shape[1] * self.sample_shape[2])
        } else {
            (self.sample_len(), 1)
        }
    }

    /// Per-channel mean and population standard deviation (1 where constant).
    pub fn compute_stats(&self) -> NormStats {
        let (c, per) = self.channels();
        let n = self.sample_len();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let count = (self.len() * per).max(1) as f64;
        for s in self.inputs.chunks(n) {
            for (j, &v) in s.iter().enumerate() {
                mean[j / per] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for s in self.inputs.chunks(n) {
            for (j, &v) in s.iter().enumerate() {
                sq[j / per] += (v - mean[j / per]).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean, std }
    }

    /// Normalizes with this dataset's own statistics.
    pub fn normalize(&mut self) -> Result<()> {
        let stats = self.compute_stats();
        self.normalize_with(&stats)
    }

    /// Normalizes with given statistics (e.g. the training set's). A dataset
    /// is normalized at most once.
    pub fn normalize_with(&mut self, stats: &NormStats) -> Result<()> {
        if self.stats.is_some() {
            return Err(Error::InvalidArgument(format!("dataset {} is already normalized", self.name)));
        }
        let (c, per) = self.channels();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::InvalidArgument(format!(
                "stats have {} channels, dataset has {c}",
                stats.mean.len()
            )));
        }
        let n = self.sample_len();
        for s in self.inputs.chunks_mut(n) {
            for (j, v) in s.iter_mut().enumerate() {
                *v = (*v - stats.mean[j / per]) / stats.std[j / per];
            }
        }
        self.stats = Some(stats.clone());
        Ok(())
    }

    fn select(&self, indices: &[usize], name: String) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Dataset {
            name,
            sample_shape: self.sample_shape.clone(),
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            stats: self.stats.clone(),
        }
    }

    pub fn manifest(&self, seed: Option<u64>) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            count: self.len(),
            classes: (0..self.classes).collect(),
            class_counts: self.class_counts(),
            sample_shape: self.sample_shape.clone(),
            stats: self.stats.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub count: usize,
    pub classes: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub sample_shape: Vec<usize>,
    pub stats: Option<NormStats>,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", from = "TaskKindRepr")]
pub enum TaskKind {
    /// `k` interleaved half-circle arcs in 2-D.
    TwoMoons { k: usize },
    /// `k` isotropic Gaussian clusters in `dim` dimensions.
    GaussianBlobs { k: usize, dim: usize },
    /// Two-class 4x4 checkerboard on `[0, 4)²`.
    Checkerboard,
}

// serde ignores unknown keys on unit variants of tagged enums
#[derive(Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
enum TaskKindRepr {
    TwoMoons { k: usize },
    GaussianBlobs { k: usize, dim: usize },
    Checkerboard {},
}

impl From<TaskKindRepr> for TaskKind {
    fn from(r: TaskKindRepr) -> Self {
        match r {
            TaskKindRepr::TwoMoons { k } => TaskKind::TwoMoons { k },
            TaskKindRepr::GaussianBlobs { k, dim } => TaskKind::GaussianBlobs { k, dim },
            TaskKindRepr::Checkerboard {} => TaskKind::Checkerboard,
        }
    }
}

impl TaskKind {
    pub fn classes(&self) -> usize {
        match *self {
            TaskKind::TwoMoons { k } | TaskKind::GaussianBlobs { k, .. } => k,
            TaskKind::Checkerboard => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            TaskKind::GaussianBlobs { dim, .. } => dim,
            _ => 2,
        }
    }
}

/// Shape of images the low-dimensional features are lifted into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Standard deviation of Gaussian jitter on the features.
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// When set, features are mapped linearly into images: each feature adds
    /// a signed Gaussian bump at a seeded position of every channel.
    #[serde(default)]
    pub image: Option<ImageShape>,
}

impl SyntheticTask {
    pub fn name(&self) -> String {
        let base = match self.kind {
            TaskKind::TwoMoons { k } => format!("two-moons-{k}"),
            TaskKind::GaussianBlobs { k, dim } => format!("gaussian-blobs-{k}x{dim}"),
            TaskKind::Checkerboard => "checkerboard-2d".into(),
        };
        match self.image {
            Some(s) => format!("{base}@{}x{}x{}", s.channels, s.height, s.width),
            None => base,
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self.image {
            Some(s) => vec![s.channels, s.height, s.width],
            None => vec![self.kind.dim()],
        }
    }
}

const LIFT_STREAM: u64 = 0x6c69_6674;
const BUMP_WIDTH: f64 = 1.5;

/// `(C*H*W) x D` lift matrix, row-major.
fn lift_matrix(shape: ImageShape, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LIFT_STREAM);
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let mut m = vec![0.0; c * h * w * dim];
    for ch in 0..c {
        for j in 0..dim {
            let cy = rng.random::<f64>() * h as f64;
            let cx = rng.random::<f64>() * w as f64;
            let amp = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for y in 0..h {
                for x in 0..w {
                    let r2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    m[((ch * h + y) * w + x) * dim + j] = amp * (-r2 / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp();
                }
            }
        }
    }
    m
}

fn blob_centers(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // rejection keeps centers at least 2 apart
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut tries = 0;
    while centers.len() < k {
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        tries += 1;
        if tries > 10_000 || centers.iter().all(|o| crate::bound::euclidean(o, &c) >= 2.0) {
            centers.push(c);
        }
    }
    centers
}

/// Clean feature vector of class `c`.
fn draw(kind: TaskKind, c: usize, centers: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        TaskKind::TwoMoons { .. } => {
            let t = rng.random::<f64>() * std::f64::consts::PI;
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            vec![c as f64 + t.cos(), sign * (t.sin() - 0.25)]
        }
        TaskKind::GaussianBlobs { .. } => centers[c].clone(),
        TaskKind::Checkerboard => loop {
            let p = [rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0];
            if (p[0].floor() as usize + p[1].floor() as usize) % 2 == c {
                break p.to_vec();
            }
        },
    }
}

/// Class-balanced, seeded, disjoint train and test splits. Inputs are not
/// normalized.
pub fn generate(task: &SyntheticTask, seed: u64) -> Result<(Dataset, Dataset)> {
    let k = task.kind.classes();
    if !(task.noise >= 0.0 && task.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {}", task.noise)));
    }
    if k < 2 || task.kind.dim() == 0 {
        return Err(Error::InvalidArgument(format!("degenerate task {:?}", task.kind)));
    }
    if task.train_per_class == 0 || task.test_per_class == 0 {
        return Err(Error::InvalidArgument("each split needs at least one example per class".into()));
    }
    if let Some(s) = task.image {
        if s.channels == 0 || s.height == 0 || s.width == 0 {
            return Err(Error::InvalidArgument(format!("bad image shape {s:?}")));
        }
    }
    let dim = task.kind.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = match task.kind {
        TaskKind::GaussianBlobs { k, dim } => blob_centers(k, dim, &mut rng),
        _ => Vec::new(),
    };
    let lift = task.image.map(|s| (s, lift_matrix(s, dim, seed)));
    let shape = task.sample_shape();
    let mut make = |per_class: usize, split: &str| -> Result<Dataset> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..per_class {
            for c in 0..k {
                let mut f = draw(task.kind, c, &centers, &mut rng);
                for v in f.iter_mut() {
                    *v += task.noise * rng.sample::<f64, _>(StandardNormal);
                }
                match &lift {
                    Some((s, m)) => {
                        let n = s.channels * s.height * s.width;
                        for p in 0..n {
                            inputs.push((0..dim).map(|j| m[p * dim + j] * f[j]).sum());
                        }
                    }
                    None => inputs.extend(f),
                }
                labels.push(c);
            }
        }
        Dataset::new(&format!("{}/{split}", task.name()), &shape, inputs, labels, k)
    };
    let train = make(task.train_per_class, "train")?;
    let test = make(task.test_per_class, "test")?;
    Ok((train, test))
}

/// Exactly `n` examples per class, drawn without replacement.
pub fn subset_per_class(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < n {
            return Err(Error::InsufficientClass {
                class,
                have: idx.len(),
                need: n,
            });
        }
        idx.shuffle(&mut rng);
        idx.truncate(n);
    }
    let order: Vec<usize> = (0..n).flat_map(|j| by_class.iter().map(move |c| c[j])).collect();
    Ok(ds.select(&order, format!("{}/{n}-per-class", ds.name)))
}

/// Record layout of a binary image file: `[label u8 | C*H*W pixel u8]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

/// Reads fixed-size records, scales pixels to `[0, 1]`, then normalizes
/// with the file's own per-channel statistics.
pub fn load_image_binary(path: &Path, layout: ImageLayout) -> Result<Dataset> {
    let mut ds = read_image_binary(path, layout)?;
    if !ds.is_empty() {
        ds.normalize()?;
    }
    Ok(ds)
}

/// Like [`load_image_binary`] but leaves the `[0, 1]` pixels unnormalized.
pub fn read_image_binary(path: &Path, layout: ImageLayout) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let px = layout.channels * layout.height * layout.width;
    if px == 0 {
        return Err(Error::InvalidArgument(format!("bad layout {layout:?}")));
    }
    let record = px + 1;
    let mut inputs = Vec::with_capacity(bytes.len() / record * px);
    let mut labels = Vec::with_capacity(bytes.len() / record);
    let mut off = 0usize;
    while off < bytes.len() {
        if off + record > bytes.len() {
            return Err(Error::Format {
                offset: off as u64,
                msg: format!("truncated record: {} of {record} bytes", bytes.len() - off),
            });
        }
        let label = bytes[off] as usize;
        if label >= layout.classes {
            return Err(Error::Format {
                offset: off as u64,
                msg: format!("label {label} >= {} classes", layout.classes),
            });
        }
        labels.push(label);
        inputs.extend(bytes[off + 1..off + record].iter().map(|&b| b as f64 / 255.0));
        off += record;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(
        &name,
        &[layout.channels, layout.height, layout.width],
        inputs,
        labels,
        layout.classes,
    )
}

/// Adds i.i.d. `N(0, σ²)` noise to every input value.
pub fn add_input_noise(ds: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = ds.clone();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in out.inputs.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}
