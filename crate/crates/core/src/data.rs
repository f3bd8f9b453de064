//! Datasets, partitioning across users, and small differentiable models.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Per-sample targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Real(Vec<f64>),
}

/// Row-major feature matrix with targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub num_features: usize,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(features: Vec<f64>, num_features: usize, targets: Targets) -> Result<Self> {
        if num_features == 0 || features.is_empty() || !features.len().is_multiple_of(num_features)
        {
            return Err(Error::Config(format!(
                "feature matrix of {} values does not split into rows of {num_features}",
                features.len()
            )));
        }
        let n = features.len() / num_features;
        let m = match &targets {
            Targets::Classes { labels, classes } => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::Config(format!(
                        "label {bad} not below {classes} classes"
                    )));
                }
                labels.len()
            }
            Targets::Real(y) => y.len(),
        };
        if m != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: m,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite feature".into()));
        }
        Ok(Dataset {
            features,
            num_features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.num_features
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { classes, .. } => Some(classes),
            Targets::Real(_) => None,
        }
    }

    pub fn label(&self, i: usize) -> usize {
        match &self.targets {
            Targets::Classes { labels, .. } => labels[i],
            Targets::Real(_) => 0,
        }
    }

    pub fn target(&self, i: usize) -> f64 {
        match &self.targets {
            Targets::Classes { labels, .. } => labels[i] as f64,
            Targets::Real(y) => y[i],
        }
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let f = self.num_features;
        let targets = match &self.targets {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: labels[start..end].to_vec(),
                classes: *classes,
            },
            Targets::Real(y) => Targets::Real(y[start..end].to_vec()),
        };
        Dataset {
            features: self.features[start * f..end * f].to_vec(),
            num_features: f,
            targets,
        }
    }

    /// Per-feature `(mean, sd)`; constant features get `sd = 1`.
    pub fn feature_stats(&self) -> Vec<(f64, f64)> {
        let (n, f) = (self.len() as f64, self.num_features);
        (0..f)
            .map(|j| {
                let col = self.features.iter().skip(j).step_by(f);
                let mean = col.clone().sum::<f64>() / n;
                let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
            })
            .collect()
    }

    /// Map every feature `v` to `(v - shift) / scale` with per-feature `(shift, scale)`.
    pub fn apply_scaling(&mut self, stats: &[(f64, f64)]) {
        for row in self.features.chunks_mut(self.num_features) {
            for (v, (mean, sd)) in row.iter_mut().zip(stats) {
                *v = (*v - mean) / sd;
            }
        }
    }

    /// Per-feature `(min, range)` mapping each feature onto `[0, 1]`;
    /// constant features get range 1.
    pub fn unit_range_stats(&self) -> Vec<(f64, f64)> {
        let f = self.num_features;
        (0..f)
            .map(|j| {
                let col = self.features.iter().skip(j).step_by(f);
                let lo = col.clone().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, if hi > lo { hi - lo } else { 1.0 })
            })
            .collect()
    }

    /// Shift and scale each feature to zero mean and unit variance.
    pub fn standardize(&mut self) -> Vec<(f64, f64)> {
        let stats = self.feature_stats();
        self.apply_scaling(&stats);
        stats
    }

    /// Write `f0,..,f{n-1},target` rows with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.num_features).map(|j| format!("f{j}")).collect();
        writeln!(out, "{},target", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", row.join(","), self.target(i))?;
        }
        Ok(())
    }
}

/// Gaussian class clusters: class means are `separation · N(0, I)`, samples
/// add unit-variance noise. Labels cycle through the classes.
pub fn gen_synthetic(n: usize, f: usize, classes: usize, separation: f64, seed: u64) -> Dataset {
    assert!(n >= 1 && f >= 1 && classes >= 1, "empty synthetic dataset");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..classes * f)
        .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * f);
    for &y in &labels {
        for j in 0..f {
            features.push(means[y * f + j] + rng.sample::<f64, _>(StandardNormal));
        }
    }
    Dataset {
        features,
        num_features: f,
        targets: Targets::Classes { labels, classes },
    }
}

/// Linear regression data `y = x·w_true + 0.1·noise` with standard normal
/// features. Returns the dataset and `w_true`.
pub fn gen_regression(n: usize, f: usize, seed: u64) -> (Dataset, Vec<f64>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let w_true: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
    let mut features = Vec::with_capacity(n * f);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        let noise: f64 = rng.sample(StandardNormal);
        y.push(x.iter().zip(&w_true).map(|(a, b)| a * b).sum::<f64>() + 0.1 * noise);
        features.extend(x);
    }
    let ds = Dataset {
        features,
        num_features: f,
        targets: Targets::Real(y),
    };
    (ds, w_true)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or_else(|| Error::IdxTruncated {
        path: path.to_path_buf(),
        needed: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Load an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let img = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lab = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    check_magic(&img, IDX_IMAGES, ip)?;
    check_magic(&lab, IDX_LABELS, lp)?;

    let n = read_be_u32(&img, 4, ip)? as usize;
    let rows = read_be_u32(&img, 8, ip)? as usize;
    let cols = read_be_u32(&img, 12, ip)? as usize;
    let m = read_be_u32(&lab, 4, lp)? as usize;
    if n != m {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: m,
        });
    }
    let f = rows * cols;
    let needed = 16 + n * f;
    if img.len() < needed {
        return Err(Error::IdxTruncated {
            path: ip.to_path_buf(),
            needed,
            found: img.len(),
        });
    }
    if lab.len() < 8 + n {
        return Err(Error::IdxTruncated {
            path: lp.to_path_buf(),
            needed: 8 + n,
            found: lab.len(),
        });
    }
    let features = img[16..needed].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(features, f, Targets::Classes { labels, classes })
}

/// What to do when `K · per_user` exceeds the dataset size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Replacement {
    Never,
    /// Draw without replacement until every sample is used once, then
    /// uniformly with replacement.
    #[default]
    WhenExhausted,
}

/// Assign `per_user` sample indices to each of `k` users.
pub fn partition_uniform(
    n: usize,
    k: usize,
    per_user: usize,
    seed: u64,
    replacement: Replacement,
) -> Result<Vec<Vec<usize>>> {
    let needed = k * per_user;
    if needed > n && replacement == Replacement::Never {
        return Err(Error::PartitionExhausted {
            needed,
            available: n,
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut next = perm.into_iter();
    Ok((0..k)
        .map(|_| {
            (0..per_user)
                .map(|_| next.next().unwrap_or_else(|| rng.random_range(0..n)))
                .collect()
        })
        .collect())
}

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// Softmax regression.
    Linear,
    /// One hidden ReLU layer.
    Mlp { hidden: usize },
    /// Squared loss with an L2 penalty `ρ_c/2 · ‖w‖²`; strongly convex.
    LeastSquares { rho_c: f64 },
}

/// One dense layer: `rows × cols` matrix and `rows` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Architecture over flat weight vectors. Layers are stored in order, each
/// as its row-major matrix followed by its bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub inputs: usize,
    pub outputs: usize,
}

pub const MAX_HIDDEN: usize = 64;

impl Model {
    pub fn new(kind: ModelKind, inputs: usize, outputs: usize) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config("model needs inputs and outputs".into()));
        }
        match kind {
            ModelKind::Mlp { hidden } if hidden == 0 || hidden > MAX_HIDDEN => {
                return Err(Error::Config(format!(
                    "hidden width {hidden} outside 1..={MAX_HIDDEN}"
                )))
            }
            ModelKind::LeastSquares { rho_c } if !(rho_c > 0.0) || outputs != 1 => {
                return Err(Error::Config(
                    "least squares needs one output and rho_c > 0".into(),
                ))
            }
            _ => {}
        }
        Ok(Model {
            kind,
            inputs,
            outputs,
        })
    }

    pub fn linear(inputs: usize, classes: usize) -> Self {
        Model::new(ModelKind::Linear, inputs, classes).expect("valid linear model")
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::Mlp { hidden } => vec![(hidden, self.inputs), (self.outputs, hidden)],
            _ => vec![(self.outputs, self.inputs)],
        }
    }

    pub fn dim(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c + r).sum()
    }

    pub fn unflatten(&self, w: &[f64]) -> Result<Vec<Layer>> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: w.len(),
            });
        }
        let mut at = 0;
        Ok(self
            .shapes()
            .into_iter()
            .map(|(rows, cols)| {
                let weights = w[at..at + rows * cols].to_vec();
                at += rows * cols;
                let bias = w[at..at + rows].to_vec();
                at += rows;
                Layer {
                    rows,
                    cols,
                    weights,
                    bias,
                }
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[Layer]) -> Result<Vec<f64>> {
        let shapes = self.shapes();
        if layers.len() != shapes.len()
            || layers.iter().zip(&shapes).any(|(l, &(r, c))| {
                l.rows != r || l.cols != c || l.weights.len() != r * c || l.bias.len() != r
            })
        {
            return Err(Error::Config("layer shapes do not match the model".into()));
        }
        Ok(layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect())
    }

    /// Zero weights for convex models; scaled Gaussian weights for the MLP
    /// so hidden units are not symmetric.
    pub fn init<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut w = vec![0.0; self.dim()];
        if let ModelKind::Mlp { hidden } = self.kind {
            let s1 = (1.0 / self.inputs as f64).sqrt();
            let s2 = (1.0 / hidden as f64).sqrt();
            let n1 = hidden * self.inputs;
            let off2 = n1 + hidden;
            for (i, v) in w.iter_mut().enumerate() {
                let s = if i < n1 {
                    s1
                } else if i >= off2 && i < off2 + self.outputs * hidden {
                    s2
                } else {
                    continue;
                };
                *v = s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        w
    }

    fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
        let cols = x.len();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            *o = b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// Output scores for one input.
    pub fn forward(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let (o, f) = (self.outputs, self.inputs);
        let mut z = vec![0.0; o];
        match self.kind {
            ModelKind::Mlp { hidden } => {
                let (w1, rest) = w.split_at(hidden * f);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(o * hidden);
                let mut a = vec![0.0; hidden];
                Self::affine(w1, b1, x, &mut a);
                a.iter_mut().for_each(|v| *v = v.max(0.0));
                Self::affine(w2, b2, &a, &mut z);
            }
            _ => {
                let (w1, b1) = w.split_at(o * f);
                Self::affine(w1, b1, x, &mut z);
            }
        }
        z
    }

    /// Mean loss over `batch` and its exact gradient. Softmax cross-entropy
    /// for classifiers; `½(x·w + b − y)²` plus the penalty for least squares.
    pub fn loss_and_grad(&self, w: &[f64], ds: &Dataset, batch: &[usize]) -> (f64, Vec<f64>) {
        assert!(!batch.is_empty(), "empty batch");
        assert_eq!(w.len(), self.dim(), "weight dimension");
        let (o, f) = (self.outputs, self.inputs);
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        let mut dz = vec![0.0; o];
        let hidden = match self.kind {
            ModelKind::Mlp { hidden } => hidden,
            _ => 0,
        };
        let mut a = vec![0.0; hidden];
        let mut da = vec![0.0; hidden];
        for &i in batch {
            let x = ds.row(i);
            let z = self.forward(w, x);
            loss += match self.kind {
                ModelKind::LeastSquares { .. } => {
                    dz[0] = z[0] - ds.target(i);
                    0.5 * dz[0] * dz[0]
                }
                _ => {
                    let y = ds.label(i);
                    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
                    for (c, d) in dz.iter_mut().enumerate() {
                        *d = (z[c] - zmax).exp() / sum - (c == y) as u8 as f64;
                    }
                    sum.ln() + zmax - z[y]
                }
            };
            if hidden == 0 {
                let (gw, gb) = grad.split_at_mut(o * f);
                for (r, d) in dz.iter().enumerate() {
                    gb[r] += d;
                    for (g, xv) in gw[r * f..(r + 1) * f].iter_mut().zip(x) {
                        *g += d * xv;
                    }
                }
            } else {
                let w1 = &w[..hidden * f];
                let b1 = &w[hidden * f..hidden * f + hidden];
                let w2 = &w[hidden * (f + 1)..hidden * (f + 1) + o * hidden];
                Self::affine(w1, b1, x, &mut a);
                let (g1, g2) = grad.split_at_mut(hidden * (f + 1));
                let (gw2, gb2) = g2.split_at_mut(o * hidden);
                da.iter_mut().for_each(|v| *v = 0.0);
                for (r, d) in dz.iter().enumerate() {
                    gb2[r] += d;
                    for h in 0..hidden {
                        gw2[r * hidden + h] += d * a[h].max(0.0);
                        da[h] += d * w2[r * hidden + h];
                    }
                }
                let (gw1, gb1) = g1.split_at_mut(hidden * f);
                for h in 0..hidden {
                    if a[h] <= 0.0 {
                        continue;
                    }
                    gb1[h] += da[h];
                    for (g, xv) in gw1[h * f..(h + 1) * f].iter_mut().zip(x) {
                        *g += da[h] * xv;
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        loss *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        if let ModelKind::LeastSquares { rho_c } = self.kind {
            loss += 0.5 * rho_c * w.iter().map(|v| v * v).sum::<f64>();
            for (g, v) in grad.iter_mut().zip(w) {
                *g += rho_c * v;
            }
        }
        (loss, grad)
    }

    /// Mean loss over the whole dataset.
    pub fn objective(&self, w: &[f64], ds: &Dataset) -> f64 {
        let all: Vec<usize> = (0..ds.len()).collect();
        self.loss_and_grad(w, ds, &all).0
    }

    /// Index of the largest score; ties go to the smallest index.
    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let z = self.forward(w, x);
        let mut best = 0;
        for (c, v) in z.iter().enumerate().skip(1) {
            if *v > z[best] {
                best = c;
            }
        }
        best
    }
}

/// Percentage of samples whose predicted class equals the label.
pub fn evaluate_accuracy(model: &Model, w: &[f64], ds: &Dataset) -> f64 {
    if ds.classes().is_none() || ds.is_empty() {
        return f64::NAN;
    }
    let correct = (0..ds.len())
        .filter(|&i| model.predict(w, ds.row(i)) == ds.label(i))
        .count();
    100.0 * correct as f64 / ds.len() as f64
}
