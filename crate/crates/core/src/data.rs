//! Datasets, label masking, synthetic generators, rescaling, weak image
//! augmentation and semi-supervised batch sampling.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{seeded_rng, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("feature range is degenerate (all values equal {0})")]
    DegenerateRange(f64),
    #[error("weak augmentation needs image-shaped rows; dataset `{0}` has none")]
    UnsupportedAugmentation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Image layout of a flattened row: height, width, channels (HWC order).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Feature rows with optional class-distribution labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub features: Array2<f64>,
    /// `None` marks a missing label.
    pub labels: Vec<Option<Vec<f64>>>,
    pub class_count: usize,
    pub feature_shape: Option<FeatureShape>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Vec<Option<Vec<f64>>>,
        class_count: usize,
        feature_shape: Option<FeatureShape>,
    ) -> Result<Self> {
        let name = name.into();
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(DataError::Invalid(format!("`{name}` has shape {n}x{d}")));
        }
        if class_count < 2 {
            return Err(DataError::Invalid(format!(
                "`{name}` needs at least 2 classes, got {class_count}"
            )));
        }
        if labels.len() != n {
            return Err(DataError::Invalid(format!(
                "`{name}` has {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(shape) = feature_shape {
            if shape.len() != d {
                return Err(DataError::Invalid(format!(
                    "feature shape {shape:?} does not match row width {d}"
                )));
            }
        }
        for (i, label) in labels.iter().enumerate() {
            if let Some(p) = label {
                let total: f64 = p.iter().sum();
                if p.len() != class_count
                    || p.iter().any(|&v| !(v >= 0.0))
                    || (total - 1.0).abs() > 1e-9
                {
                    return Err(DataError::Invalid(format!(
                        "row {i}: label {p:?} is not a distribution over {class_count} classes"
                    )));
                }
            }
        }
        Ok(Self {
            name,
            features,
            labels,
            class_count,
            feature_shape,
        })
    }

    /// Builds one-hot labels from class ids (`None` = missing).
    pub fn from_class_ids(
        name: impl Into<String>,
        features: Array2<f64>,
        ids: &[Option<usize>],
        class_count: usize,
        feature_shape: Option<FeatureShape>,
    ) -> Result<Self> {
        let mut labels = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            labels.push(match id {
                Some(c) if *c >= class_count => {
                    return Err(DataError::Invalid(format!(
                        "row {i}: class {c} out of range for {class_count} classes"
                    )))
                }
                Some(c) => Some(one_hot(*c, class_count)),
                None => None,
            });
        }
        Self::new(name, features, labels, class_count, feature_shape)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Argmax class of each present label (lowest index wins ties).
    pub fn class_ids(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .map(|l| l.as_ref().map(|p| argmax(p)))
            .collect()
    }

    /// Rows gathered in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            class_count: self.class_count,
            feature_shape: self.feature_shape,
        }
    }

    /// Randomly moves `frac` of the rows (rounded) into a held-out set.
    pub fn split_holdout(&self, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(DataError::Argument(format!(
                "holdout fraction {frac} outside [0, 1)"
            )));
        }
        let held = (self.len() as f64 * frac).round() as usize;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seeded_rng(seed));
        let (h, rest) = order.split_at(held);
        let (mut h, mut rest) = (h.to_vec(), rest.to_vec());
        h.sort_unstable();
        rest.sort_unstable();
        Ok((self.subset(&rest), self.subset(&h)))
    }

    /// Stacked one-hot / distribution targets for rows that must be labeled.
    pub fn targets(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.class_count));
        for (r, &i) in indices.iter().enumerate() {
            let p = self.labels[i]
                .as_ref()
                .unwrap_or_else(|| panic!("row {i} has no label"));
            out.row_mut(r).assign(&ArrayView1::from(p.as_slice()));
        }
        out
    }
}

pub fn one_hot(class: usize, class_count: usize) -> Vec<f64> {
    let mut v = vec![0.0; class_count];
    v[class] = 1.0;
    v
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Labeled / unlabeled partition of a training set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemiSplit {
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
    pub seed: u64,
}

/// Keeps `n_labeled` class-balanced labels and masks the rest.
///
/// Rows already unlabeled at the source always land in the unlabeled pool.
pub fn mask_labels(ds: &Dataset, n_labeled: usize, seed: u64) -> Result<SemiSplit> {
    let n = ds.len();
    if n_labeled > n {
        return Err(DataError::Argument(format!(
            "cannot keep {n_labeled} labels in a dataset of {n} rows"
        )));
    }
    if n_labeled < ds.class_count {
        log::warn!(
            "{n_labeled} labels for {} classes leaves some classes unlabeled",
            ds.class_count
        );
    }
    let mut rng = seeded_rng(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, c) in ds.class_ids().into_iter().enumerate() {
        if let Some(c) = c {
            by_class[c].push(i);
        }
    }
    let available: usize = by_class.iter().map(Vec::len).sum();
    if n_labeled > available {
        return Err(DataError::Argument(format!(
            "cannot keep {n_labeled} labels; only {available} rows carry one"
        )));
    }
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    let mut class_order: Vec<usize> = (0..ds.class_count).collect();
    class_order.shuffle(&mut rng);

    // Round-robin over a shuffled class order keeps counts within one of each other.
    let mut taken = vec![0usize; ds.class_count];
    let mut labeled = Vec::with_capacity(n_labeled);
    while labeled.len() < n_labeled {
        for &c in &class_order {
            if labeled.len() == n_labeled {
                break;
            }
            if taken[c] < by_class[c].len() {
                labeled.push(by_class[c][taken[c]]);
                taken[c] += 1;
            }
        }
    }
    labeled.sort_unstable();
    let mut is_labeled = vec![false; n];
    for &i in &labeled {
        is_labeled[i] = true;
    }
    let unlabeled = (0..n).filter(|&i| !is_labeled[i]).collect();
    Ok(SemiSplit {
        labeled_indices: labeled,
        unlabeled_indices: unlabeled,
        seed,
    })
}

/// Point on a noiseless moon; `t` runs over `[0, pi]`.
pub fn two_moons_point(moon: usize, t: f64) -> [f64; 2] {
    if moon == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    }
}

/// Two interleaved half circles with Gaussian noise, rows shuffled.
pub fn gen_two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(DataError::Argument(format!("two moons needs n >= 2, got {n}")));
    }
    if !(noise_sd >= 0.0) {
        return Err(DataError::Argument(format!("noise sd {noise_sd} < 0")));
    }
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, noise_sd).expect("finite sd");
    let counts = [n - n / 2, n / 2];
    let mut rows = Vec::with_capacity(n);
    for (moon, &count) in counts.iter().enumerate() {
        for k in 0..count {
            let t = if count > 1 {
                PI * k as f64 / (count - 1) as f64
            } else {
                0.0
            };
            let [x, y] = two_moons_point(moon, t);
            rows.push(([x, y], moon));
        }
    }
    rows.shuffle(&mut rng);
    let mut features = Array2::zeros((n, 2));
    let mut ids = Vec::with_capacity(n);
    for (i, ([x, y], c)) in rows.into_iter().enumerate() {
        features[[i, 0]] = x + noise.sample(&mut rng);
        features[[i, 1]] = y + noise.sample(&mut rng);
        ids.push(Some(c));
    }
    Dataset::from_class_ids("two_moons", features, &ids, 2, None)
}

/// Isotropic Gaussian clusters around `centers`, one class per center.
pub fn gen_blobs(
    n: usize,
    class_count: usize,
    centers: &[Vec<f64>],
    sd: f64,
    seed: u64,
) -> Result<Dataset> {
    if centers.len() != class_count {
        return Err(DataError::Argument(format!(
            "{} centers given for {class_count} classes",
            centers.len()
        )));
    }
    if !(sd >= 0.0) {
        return Err(DataError::Argument(format!("blob sd {sd} < 0")));
    }
    let d = centers.first().map_or(0, Vec::len);
    if centers.iter().any(|c| c.len() != d) {
        return Err(DataError::Argument("centers differ in dimension".into()));
    }
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, sd).expect("finite sd");
    let mut classes: Vec<usize> = (0..n).map(|i| i % class_count).collect();
    classes.shuffle(&mut rng);
    let mut features = Array2::zeros((n, d));
    for (i, &c) in classes.iter().enumerate() {
        for k in 0..d {
            features[[i, k]] = centers[c][k] + noise.sample(&mut rng);
        }
    }
    let ids: Vec<Option<usize>> = classes.into_iter().map(Some).collect();
    Dataset::from_class_ids("blobs", features, &ids, class_count, None)
}

/// Global affine min-max map fitted on one dataset and reusable on others.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rescaler {
    pub source_min: f64,
    pub source_max: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Rescaler {
    pub fn fit(ds: &Dataset, lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(DataError::Argument(format!("target range [{lo}, {hi}] is empty")));
        }
        let min = ds.features.fold(f64::INFINITY, |m, &v| m.min(v));
        let max = ds.features.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if !(max > min) {
            return Err(DataError::DegenerateRange(min));
        }
        Ok(Self {
            source_min: min,
            source_max: max,
            lo,
            hi,
        })
    }

    pub fn apply_value(&self, v: f64) -> f64 {
        self.lo + (v - self.source_min) * (self.hi - self.lo) / (self.source_max - self.source_min)
    }

    /// No clipping: values outside the fitted range map outside `[lo, hi]`.
    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        out.features.mapv_inplace(|v| self.apply_value(v));
        out
    }
}

/// Fits a [`Rescaler`] on `ds` and applies it.
pub fn rescale_features(ds: &Dataset, lo: f64, hi: f64) -> Result<(Dataset, Rescaler)> {
    let r = Rescaler::fit(ds, lo, hi)?;
    Ok((r.apply(ds), r))
}

fn reflect_index(p: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut q = p.rem_euclid(period);
    if q >= n {
        q = period - q;
    }
    q as usize
}

/// Reflect padding (edge pixel not repeated) of an HWC row.
pub fn reflect_pad(x: ArrayView1<f64>, shape: FeatureShape, pad: usize) -> Array3<f64> {
    let img = x
        .to_shape((shape.height, shape.width, shape.channels))
        .expect("row matches feature shape");
    let (ph, pw) = (shape.height + 2 * pad, shape.width + 2 * pad);
    Array3::from_shape_fn((ph, pw, shape.channels), |(r, c, ch)| {
        let sr = reflect_index(r as isize - pad as isize, shape.height);
        let sc = reflect_index(c as isize - pad as isize, shape.width);
        img[[sr, sc, ch]]
    })
}

pub fn flip_horizontal(x: ArrayView1<f64>, shape: FeatureShape) -> Array1<f64> {
    let img = x
        .to_shape((shape.height, shape.width, shape.channels))
        .expect("row matches feature shape");
    let flipped = img.slice(s![.., ..;-1, ..]).to_owned();
    Array1::from_iter(flipped.iter().copied())
}

/// Window of `shape` size at `(row, col)` in a padded image, flattened.
pub fn crop(padded: &Array3<f64>, offset: (usize, usize), shape: FeatureShape) -> Array1<f64> {
    let (r, c) = offset;
    let win = padded.slice(s![r..r + shape.height, c..c + shape.width, ..]);
    Array1::from_iter(win.iter().copied())
}

/// Flip (p = 0.5, when allowed), reflect-pad by 2, random crop back to size.
pub fn augment_weak(
    ds: &Dataset,
    x: ArrayView1<f64>,
    allow_flip: bool,
    rng: &mut Rng,
) -> Result<Array1<f64>> {
    const PAD: usize = 2;
    let shape = ds
        .feature_shape
        .ok_or_else(|| DataError::UnsupportedAugmentation(ds.name.clone()))?;
    let mut row = x.to_owned();
    if allow_flip && rng.random_bool(0.5) {
        row = flip_horizontal(row.view(), shape);
    }
    let padded = reflect_pad(row.view(), shape, PAD);
    let offset = (rng.random_range(0..=2 * PAD), rng.random_range(0..=2 * PAD));
    Ok(crop(&padded, offset, shape))
}

/// A batch split into labeled rows and unlabeled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SemiBatch {
    pub labeled_indices: Vec<usize>,
    pub labeled_features: Array2<f64>,
    pub labeled_targets: Array2<f64>,
    pub unlabeled_indices: Vec<usize>,
    pub unlabeled_features: Array2<f64>,
}

impl SemiBatch {
    pub fn len(&self) -> usize {
        self.labeled_indices.len() + self.unlabeled_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Epoch-wise reshuffled draw over a fixed index pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl PoolSampler {
    pub fn new(pool: Vec<usize>) -> Self {
        let cursor = pool.len();
        Self {
            order: pool,
            cursor,
        }
    }

    pub fn pool_len(&self) -> usize {
        self.order.len()
    }

    pub fn draw(&mut self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Draws `m_labeled + m_unlabeled` rows per batch, each pool cycled independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    labeled: PoolSampler,
    unlabeled: PoolSampler,
    m_labeled: usize,
    m_unlabeled: usize,
}

impl BatchSampler {
    pub fn new(split: &SemiSplit, m_labeled: usize, m_unlabeled: usize) -> Result<Self> {
        if m_labeled > 0 && split.labeled_indices.is_empty() {
            return Err(DataError::Argument(
                "labeled batch size > 0 but the labeled pool is empty".into(),
            ));
        }
        if m_unlabeled > 0 && split.unlabeled_indices.is_empty() {
            return Err(DataError::Argument(
                "unlabeled batch size > 0 but the unlabeled pool is empty".into(),
            ));
        }
        Ok(Self {
            labeled: PoolSampler::new(split.labeled_indices.clone()),
            unlabeled: PoolSampler::new(split.unlabeled_indices.clone()),
            m_labeled,
            m_unlabeled,
        })
    }

    pub fn sample(&mut self, ds: &Dataset, rng: &mut Rng) -> SemiBatch {
        let labeled_indices = self.labeled.draw(self.m_labeled, rng);
        let unlabeled_indices = self.unlabeled.draw(self.m_unlabeled, rng);
        SemiBatch {
            labeled_features: ds.features.select(Axis(0), &labeled_indices),
            labeled_targets: ds.targets(&labeled_indices),
            unlabeled_features: ds.features.select(Axis(0), &unlabeled_indices),
            labeled_indices,
            unlabeled_indices,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    #[serde(default)]
    name: Option<String>,
    class_count: usize,
    #[serde(default)]
    feature_shape: Option<FeatureShape>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes `f0,…,f{d-1},label` rows plus a `<file>.meta.json` sidecar.
/// Soft labels are written as their argmax; missing labels as `-1`.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fmt = |e: csv::Error| DataError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(fmt)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|k| format!("f{k}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(fmt)?;
    for (row, label) in ds.features.rows().into_iter().zip(ds.class_ids()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(label.map_or("-1".to_string(), |c| c.to_string()));
        w.write_record(&rec).map_err(fmt)?;
    }
    w.flush().map_err(io)?;
    let meta = Sidecar {
        name: Some(ds.name.clone()),
        class_count: ds.class_count,
        feature_shape: ds.feature_shape,
    };
    let text = serde_json::to_string_pretty(&meta).expect("sidecar serializes") + "\n";
    fs::write(sidecar_path(path), text).map_err(io)
}

/// Reads a dataset CSV; the sidecar is optional (class count then inferred).
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let fmt = |message: String| DataError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| fmt(e.to_string()))?;
    let header = r.headers().map_err(|e| fmt(e.to_string()))?.clone();
    let width = header.len();
    if width < 2 || header.get(width - 1) != Some("label") {
        return Err(fmt("header must be f0,…,f{d-1},label".into()));
    }
    for (k, h) in header.iter().take(width - 1).enumerate() {
        if h != format!("f{k}") {
            return Err(fmt(format!("column {k} is `{h}`, expected `f{k}`")));
        }
    }
    let d = width - 1;
    let mut values = Vec::new();
    let mut ids = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let lineno = line + 2;
        for k in 0..d {
            let v: f64 = rec[k]
                .trim()
                .parse()
                .map_err(|_| fmt(format!("line {lineno}: bad value `{}`", &rec[k])))?;
            values.push(v);
        }
        let lab: i64 = rec[d]
            .trim()
            .parse()
            .map_err(|_| fmt(format!("line {lineno}: bad label `{}`", &rec[d])))?;
        ids.push(match lab {
            -1 => None,
            c if c >= 0 => Some(c as usize),
            c => return Err(fmt(format!("line {lineno}: label {c} < -1"))),
        });
    }
    let n = ids.len();
    let features = Array2::from_shape_vec((n, d), values).map_err(|e| fmt(e.to_string()))?;
    let side = sidecar_path(path);
    let (name, class_count, feature_shape) = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|source| DataError::Io {
            path: side.clone(),
            source,
        })?;
        let meta: Sidecar = serde_json::from_str(&text).map_err(|e| DataError::Format {
            path: side.clone(),
            message: e.to_string(),
        })?;
        (meta.name, meta.class_count, meta.feature_shape)
    } else {
        let max = ids.iter().flatten().copied().max().unwrap_or(0);
        (None, (max + 1).max(2), None)
    };
    let name = name.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Dataset::from_class_ids(name, features, &ids, class_count, feature_shape)
}
