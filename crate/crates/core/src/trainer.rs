//! Run configuration, the batch-wise training step, evaluation, and
//! checkpoints.
//!
//! Each step draws a labeled/unlabeled batch, pseudo-labels the unlabeled
//! rows, builds a synthetic batch with the configured transform, evaluates
//! `L_T = CE + w_S(t)·L_S`, and takes one SGD step on `θ` (and on `ε` for
//! εmu). The EMA teacher is updated after every optimizer step and is used
//! for pseudo-labels and all evaluation.
//!
//! Randomness is split into independent seeded streams (data order,
//! transform draws, augmentation) so that changing e.g. `beta` leaves the
//! batch order untouched.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::data::{
    self, augment_weak, gen_blobs, gen_two_moons, mask_labels, BatchSampler, DataError, Dataset,
    Rescaler, SemiSplit,
};
use crate::metrics::{self, MetricsError, MetricsRecord};
use crate::model::{sgd_step, EmaTeacher, MlpClassifier, ModelError};
use crate::regularize::{
    self, consistency_transform, emu_targets_graph, emu_transform, mixup_transform, plan_mix,
    ramp_weight, supervised_ce, EpsilonParam, MixPlan, MixScope, PseudoLabelKind, PseudoLabeler,
    RegularizeError, StructuralLossKind, SyntheticBatch, TransformKind,
};
use crate::{derive_seed, seeded_rng, Rng};

const TAG_TRAIN: u64 = 1;
const TAG_TEST: u64 = 2;
const TAG_VALIDATION: u64 = 3;
const TAG_SPLIT: u64 = 4;
const TAG_PAIRS: u64 = 5;
const TAG_INIT: u64 = 6;
const TAG_DATA_STREAM: u64 = 7;
const TAG_TRANSFORM_STREAM: u64 = 8;
const TAG_AUGMENT_STREAM: u64 = 9;
const TAG_ORACLE: u64 = 10;
const TAG_QUALITY: u64 = 11;

pub const CHECKPOINT_FORMAT: &str = "structreg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: `{key}`: {message}")]
    Config { key: &'static str, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Regularize(#[from] RegularizeError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite {what} at step {step}; last good checkpoint: {}",
        last_checkpoint.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string()))]
    NonFinite {
        what: &'static str,
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn config_err(key: &'static str, message: impl Into<String>) -> TrainError {
    TrainError::Config {
        key,
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// `θ ← θ − α(∇ + wd·θ)` applied in the update.
    Decoupled,
    /// `0.5·wd·‖W‖²` added to the differentiated objective.
    Coupled,
}

/// Initial `ε`: an absolute radius, or `"<p>%"` of the average inter-pair distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonInit {
    Absolute(f64),
    Relative(String),
}

impl EpsilonInit {
    pub fn resolve(&self, avg_pair_distance: f64) -> Result<f64> {
        match self {
            EpsilonInit::Absolute(v) => Ok(*v),
            EpsilonInit::Relative(s) => {
                let pct = s
                    .trim()
                    .strip_suffix('%')
                    .and_then(|p| p.trim().parse::<f64>().ok())
                    .ok_or_else(|| {
                        config_err("epsilon_init", format!("`{s}` is neither a number nor `<p>%`"))
                    })?;
                Ok(pct / 100.0 * avg_pair_distance)
            }
        }
    }
}

/// Everything a run needs. Defaults are desk-scale (20 epochs of 1024 batches).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub blob_centers: Vec<Vec<f64>>,
    pub blob_sd: f64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub rescale: bool,
    pub rescale_lo: f64,
    pub rescale_hi: f64,
    pub augment: bool,
    pub flip: bool,
    pub n_labeled: usize,
    pub validation_frac: f64,
    pub m_labeled: usize,
    pub m_unlabeled: usize,
    pub total_batches: u64,
    pub batches_per_epoch: u64,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
    pub ema_decay: f64,
    pub prediction_decay: f64,
    pub beta: f64,
    pub w_s_max: f64,
    /// `None`: `16 · 1024 / batches_per_epoch` epochs.
    pub ramp_epochs: Option<f64>,
    pub epsilon_init: EpsilonInit,
    /// `None`: largest pair distance seen in the inter-pair sample.
    pub epsilon_max: Option<f64>,
    pub epsilon_learnable: bool,
    pub transform: TransformKind,
    pub structural_loss: StructuralLossKind,
    pub pseudo_labeler: PseudoLabelKind,
    pub mix_scope: MixScope,
    pub consistency_noise_sd: f64,
    pub seed: u64,
    pub data_seed: Option<u64>,
    pub split_seed: Option<u64>,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub label_quality: bool,
    pub oracle_batches: u64,
    pub oracle_weight_decay: f64,
    pub quality_rows: usize,
    pub inter_pair_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::TwoMoons,
            n_train: 1000,
            n_test: 1000,
            noise_sd: 0.1,
            blob_centers: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            blob_sd: 0.5,
            train_path: None,
            test_path: None,
            rescale: true,
            rescale_lo: -1.0,
            rescale_hi: 1.0,
            augment: false,
            flip: true,
            n_labeled: 6,
            validation_frac: 0.0,
            m_labeled: 64,
            m_unlabeled: 64,
            total_batches: 20_480,
            batches_per_epoch: 1024,
            hidden: vec![64, 64],
            lr: 0.02,
            weight_decay: 0.0,
            weight_decay_mode: WeightDecayMode::Decoupled,
            ema_decay: 0.999,
            prediction_decay: 0.6,
            beta: 1.0,
            w_s_max: 10.0,
            ramp_epochs: None,
            epsilon_init: EpsilonInit::Relative("25%".into()),
            epsilon_max: None,
            epsilon_learnable: true,
            transform: TransformKind::Emu,
            structural_loss: StructuralLossKind::Mse,
            pseudo_labeler: PseudoLabelKind::EmaWeights,
            mix_scope: MixScope::All,
            consistency_noise_sd: 0.1,
            seed: 0,
            data_seed: None,
            split_seed: None,
            eval_interval: 1024,
            checkpoint_interval: 0,
            label_quality: true,
            oracle_batches: 4000,
            oracle_weight_decay: 1e-4,
            quality_rows: 256,
            inter_pair_samples: 100_000,
        }
    }
}

impl RunConfig {
    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    pub fn ramp_batches(&self) -> u64 {
        let epochs = self
            .ramp_epochs
            .unwrap_or(16.0 * 1024.0 / self.batches_per_epoch as f64);
        (epochs * self.batches_per_epoch as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_train", self.n_train as u64),
            ("n_test", self.n_test as u64),
            ("batches_per_epoch", self.batches_per_epoch),
            ("eval_interval", self.eval_interval),
            ("quality_rows", self.quality_rows as u64),
            ("inter_pair_samples", self.inter_pair_samples as u64),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(config_err(key, "must be positive"));
            }
        }
        if self.m_labeled + self.m_unlabeled == 0 {
            return Err(config_err("m_labeled", "batch is empty (m_labeled + m_unlabeled = 0)"));
        }
        if self.hidden.contains(&0) {
            return Err(config_err("hidden", "layer widths must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(config_err("lr", "learning rate must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err("ema_decay", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.prediction_decay) {
            return Err(config_err("prediction_decay", "must lie in [0, 1)"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(config_err("beta", "must be > 0"));
        }
        if !(self.w_s_max >= 0.0) {
            return Err(config_err("w_s_max", "must be >= 0"));
        }
        if let Some(r) = self.ramp_epochs {
            if !(r >= 0.0) {
                return Err(config_err("ramp_epochs", "must be >= 0"));
            }
        }
        if let Some(m) = self.epsilon_max {
            if !(m >= 0.0) {
                return Err(config_err("epsilon_max", "must be >= 0"));
            }
        }
        match &self.epsilon_init {
            EpsilonInit::Absolute(v) if !(*v >= 0.0) => {
                return Err(config_err("epsilon_init", "must be >= 0"))
            }
            EpsilonInit::Relative(_) => {
                let v = self.epsilon_init.resolve(1.0)?;
                if !(v >= 0.0) {
                    return Err(config_err("epsilon_init", "must be >= 0"));
                }
            }
            _ => {}
        }
        if !(self.consistency_noise_sd >= 0.0) {
            return Err(config_err("consistency_noise_sd", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.validation_frac) {
            return Err(config_err("validation_frac", "must lie in [0, 1)"));
        }
        if !(self.rescale_hi > self.rescale_lo) {
            return Err(config_err("rescale_hi", "must exceed rescale_lo"));
        }
        if self.dataset == DatasetKind::Csv && (self.train_path.is_none() || self.test_path.is_none()) {
            return Err(config_err("train_path", "csv datasets need train_path and test_path"));
        }
        if self.label_quality && self.oracle_batches == 0 {
            return Err(config_err("oracle_batches", "label quality needs a trained reference"));
        }
        Ok(())
    }
}

/// Train / test / validation sets after holdout, rescaling and masking.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub validation: Option<Dataset>,
    pub split: SemiSplit,
    pub rescaler: Option<Rescaler>,
    pub is_labeled: Vec<bool>,
}

fn labeled_rows(ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    ds.class_ids()
        .into_iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| (i, c)))
        .unzip()
}

pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let ds = config.data_seed();
    let (train, test) = match config.dataset {
        DatasetKind::TwoMoons => (
            gen_two_moons(config.n_train, config.noise_sd, derive_seed(ds, TAG_TRAIN))?,
            gen_two_moons(config.n_test, config.noise_sd, derive_seed(ds, TAG_TEST))?,
        ),
        DatasetKind::Blobs => {
            let c = config.blob_centers.len();
            (
                gen_blobs(config.n_train, c, &config.blob_centers, config.blob_sd, derive_seed(ds, TAG_TRAIN))?,
                gen_blobs(config.n_test, c, &config.blob_centers, config.blob_sd, derive_seed(ds, TAG_TEST))?,
            )
        }
        DatasetKind::Csv => {
            let tp = config.train_path.as_deref().expect("validated");
            let sp = config.test_path.as_deref().expect("validated");
            (data::read_csv(tp)?, data::read_csv(sp)?)
        }
    };
    if config.augment && train.feature_shape.is_none() {
        return Err(DataError::UnsupportedAugmentation(train.name.clone()).into());
    }
    let (train, validation) = if config.validation_frac > 0.0 {
        let (t, v) =
            train.split_holdout(config.validation_frac, derive_seed(config.split_seed(), TAG_VALIDATION))?;
        (t, Some(v))
    } else {
        (train, None)
    };
    let (train, test, validation, rescaler) = if config.rescale {
        let r = Rescaler::fit(&train, config.rescale_lo, config.rescale_hi)?;
        (r.apply(&train), r.apply(&test), validation.map(|v| r.apply(&v)), Some(r))
    } else {
        (train, test, validation, None)
    };
    if test.dim() != train.dim() {
        return Err(DataError::Invalid(format!(
            "test rows have {} features, training rows {}",
            test.dim(),
            train.dim()
        ))
        .into());
    }
    let split = mask_labels(&train, config.n_labeled, derive_seed(config.split_seed(), TAG_SPLIT))?;
    let mut is_labeled = vec![false; train.len()];
    for &i in &split.labeled_indices {
        is_labeled[i] = true;
    }
    Ok(PreparedData {
        train,
        test,
        validation,
        split,
        rescaler,
        is_labeled,
    })
}

/// Mutable training state; serializes completely into a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub model: MlpClassifier,
    pub teacher: EmaTeacher,
    pub epsilon: EpsilonParam,
    pub pseudo_labeler: PseudoLabeler,
    pub sampler: BatchSampler,
    pub data_rng: Rng,
    pub transform_rng: Rng,
    pub augment_rng: Rng,
}

/// What one optimizer step did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Zero-based batch index `t`.
    pub step: u64,
    pub l_sup: f64,
    pub l_struct: f64,
    pub w_s: f64,
    pub l_total: f64,
    /// `ε` after this step's update and projection.
    pub epsilon: f64,
    pub epsilon_grad: f64,
    pub grad_norm: f64,
}

/// Teacher-based evaluation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train_err: f64,
    pub test_err: f64,
    pub validation_err: Option<f64>,
    pub mean_entropy: f64,
    pub label_quality: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub config: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec(self).expect("checkpoint serializes");
        v.push(b'\n');
        v
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes).map_err(|e| TrainError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint {
                path: path.to_path_buf(),
                message: format!("unsupported format {} v{}", ck.format, ck.version),
            });
        }
        if ck.widths != ck.state.model.widths() {
            return Err(TrainError::Checkpoint {
                path: path.to_path_buf(),
                message: "recorded widths disagree with stored parameters".into(),
            });
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

/// `<run>/<step>.ckpt`.
pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("{step}.ckpt"))
}

/// Fully supervised reference model on every labeled training row; supplies
/// the reference labels for label-quality measurement.
pub fn train_reference_model(data: &PreparedData, config: &RunConfig) -> Result<MlpClassifier> {
    let (rows, classes) = labeled_rows(&data.train);
    let widths = layer_widths(config, &data.train);
    let mut rng = seeded_rng(derive_seed(config.seed, TAG_ORACLE));
    let mut model = MlpClassifier::new(&widths, &mut rng)?;
    let split = SemiSplit {
        labeled_indices: rows,
        unlabeled_indices: vec![],
        seed: 0,
    };
    let batch = (config.m_labeled + config.m_unlabeled).max(1);
    let mut sampler = BatchSampler::new(&split, batch, 0)?;
    let _ = classes;
    let mut g = Graph::new();
    for step in 0..config.oracle_batches {
        let b = sampler.sample(&data.train, &mut rng);
        g.reset();
        let params = model.bind(&mut g);
        let x = g.constant(b.labeled_features.into_dyn());
        let y = g.constant(b.labeled_targets.into_dyn());
        let logits = model.forward_graph(&mut g, &params, x)?;
        let loss = supervised_ce(&mut g, logits, y)?;
        if !g.scalar_value(loss).is_finite() {
            return Err(TrainError::NonFinite {
                what: "reference loss",
                step,
                last_checkpoint: None,
            });
        }
        g.backward(loss)?;
        let grads = model.gradients(&g, &params);
        sgd_step(&mut model, &grads, config.lr, config.oracle_weight_decay)?;
    }
    Ok(model)
}

fn layer_widths(config: &RunConfig, ds: &Dataset) -> Vec<usize> {
    let mut w = vec![ds.dim()];
    w.extend(&config.hidden);
    w.push(ds.class_count);
    w
}

/// Per-run training driver.
#[derive(Debug)]
pub struct Trainer {
    config: RunConfig,
    data: PreparedData,
    state: TrainState,
    oracle: Option<MlpClassifier>,
    avg_pair_distance: f64,
    max_pair_distance: f64,
    ramp_batches: u64,
    last_checkpoint: Option<PathBuf>,
    graph: Graph,
}

enum Synthetic {
    Fixed(SyntheticBatch),
    /// εmu: features fixed, targets rebuilt on the graph from `ε`.
    Emu {
        batch: SyntheticBatch,
        targets: Array2<f64>,
        plan: MixPlan,
    },
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let data = prepare_data(&config)?;
        let (avg, max) = metrics::sampled_pair_distances(
            data.train.features.view(),
            config.inter_pair_samples,
            derive_seed(config.data_seed(), TAG_PAIRS),
        )?;
        let eps_max = config.epsilon_max.unwrap_or(max);
        let eps_init = config.epsilon_init.resolve(avg)?;
        if config.transform == TransformKind::Emu && eps_init > eps_max {
            return Err(config_err(
                "epsilon_init",
                format!("{eps_init} exceeds epsilon_max {eps_max}"),
            ));
        }
        let widths = layer_widths(&config, &data.train);
        let model = MlpClassifier::new(&widths, &mut seeded_rng(derive_seed(config.seed, TAG_INIT)))?;
        let teacher = EmaTeacher::new(&model, config.ema_decay);
        let sampler = BatchSampler::new(&data.split, config.m_labeled, config.m_unlabeled)?;
        let state = TrainState {
            step: 0,
            model,
            teacher,
            epsilon: EpsilonParam::new(eps_init, eps_max, config.epsilon_learnable),
            pseudo_labeler: PseudoLabeler::new(config.pseudo_labeler, config.prediction_decay),
            sampler,
            data_rng: seeded_rng(derive_seed(config.seed, TAG_DATA_STREAM)),
            transform_rng: seeded_rng(derive_seed(config.seed, TAG_TRANSFORM_STREAM)),
            augment_rng: seeded_rng(derive_seed(config.seed, TAG_AUGMENT_STREAM)),
        };
        let oracle = if config.label_quality {
            Some(train_reference_model(&data, &config)?)
        } else {
            None
        };
        Ok(Self {
            ramp_batches: config.ramp_batches(),
            config,
            data,
            state,
            oracle,
            avg_pair_distance: avg,
            max_pair_distance: max,
            last_checkpoint: None,
            graph: Graph::new(),
        })
    }

    /// Rebuilds data and reference model from the stored config, then restores state.
    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        let mut t = Self::new(checkpoint.config)?;
        if t.state.model.widths() != checkpoint.state.model.widths() {
            return Err(config_err("hidden", "checkpoint architecture does not match config"));
        }
        t.state = checkpoint.state;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn avg_pair_distance(&self) -> f64 {
        self.avg_pair_distance
    }

    pub fn max_pair_distance(&self) -> f64 {
        self.max_pair_distance
    }

    pub fn reference_model(&self) -> Option<&MlpClassifier> {
        self.oracle.as_ref()
    }

    /// Replaces the student (and resets the teacher to it).
    pub fn set_model(&mut self, model: MlpClassifier) -> Result<()> {
        if model.widths() != self.state.model.widths() {
            return Err(config_err("hidden", "replacement model has different widths"));
        }
        self.state.teacher = EmaTeacher::new(&model, self.config.ema_decay);
        self.state.model = model;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            widths: self.state.model.widths(),
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    pub fn write_checkpoint(&mut self, run_dir: &Path) -> Result<PathBuf> {
        let path = checkpoint_path(run_dir, self.state.step);
        self.checkpoint().write(&path)?;
        self.last_checkpoint = Some(path.clone());
        Ok(path)
    }

    fn non_finite(&self, what: &'static str) -> TrainError {
        TrainError::NonFinite {
            what,
            step: self.state.step,
            last_checkpoint: self.last_checkpoint.clone(),
        }
    }

    fn synthesize(&mut self, x: &Array2<f64>, p: &Array2<f64>) -> Result<Synthetic> {
        let cfg = &self.config;
        let rng = &mut self.state.transform_rng;
        Ok(match cfg.transform {
            TransformKind::Consistency => Synthetic::Fixed(consistency_transform(
                x.view(),
                p.view(),
                cfg.consistency_noise_sd,
                rng,
            )?),
            TransformKind::Mixup => {
                let plan = plan_mix(x.view(), cfg.beta, rng)?;
                Synthetic::Fixed(mixup_transform(x.view(), p.view(), &plan)?)
            }
            TransformKind::Emu => {
                let plan = plan_mix(x.view(), cfg.beta, rng)?;
                let batch = emu_transform(x.view(), p.view(), self.state.epsilon.value, &plan)?;
                Synthetic::Emu {
                    batch,
                    targets: p.clone(),
                    plan,
                }
            }
        })
    }

    /// One pass of draw → pseudo-label → transform → loss → update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.state.step;
        let mut batch = self.state.sampler.sample(&self.data.train, &mut self.state.data_rng);
        if self.config.augment {
            for m in [&mut batch.labeled_features, &mut batch.unlabeled_features] {
                for mut row in m.rows_mut() {
                    let out = augment_weak(
                        &self.data.train,
                        row.view(),
                        self.config.flip,
                        &mut self.state.augment_rng,
                    )?;
                    row.assign(&out);
                }
            }
        }
        let pseudo = self.state.pseudo_labeler.label(
            batch.unlabeled_features.view(),
            &batch.unlabeled_indices,
            &self.state.model,
            Some(&self.state.teacher),
        )?;
        let (x_mix, p_mix) = match self.config.mix_scope {
            MixScope::All => (
                concatenate![Axis(0), batch.labeled_features, batch.unlabeled_features],
                concatenate![Axis(0), batch.labeled_targets, pseudo],
            ),
            MixScope::UnlabeledOnly => (batch.unlabeled_features.clone(), pseudo),
        };
        let w_s = ramp_weight(t, self.ramp_batches, self.config.w_s_max);
        let synthetic = if x_mix.nrows() > 0 {
            Some(self.synthesize(&x_mix, &p_mix)?)
        } else {
            None
        };

        let mut g = std::mem::take(&mut self.graph);
        g.reset();
        let model = &self.state.model;
        let params = model.bind(&mut g);
        let xl = g.constant(batch.labeled_features.into_dyn());
        let yl = g.constant(batch.labeled_targets.into_dyn());
        let logits_l = model.forward_graph(&mut g, &params, xl)?;
        let supervised = supervised_ce(&mut g, logits_l, yl)?;
        let mut eps_node = None;
        let structural = match &synthetic {
            None => g.scalar(0.0, false),
            Some(s) => {
                let (xt, yt) = match s {
                    Synthetic::Fixed(b) => {
                        let yt = g.constant(b.y_tilde.clone().into_dyn());
                        (b.x_tilde.clone(), yt)
                    }
                    Synthetic::Emu {
                        batch,
                        targets,
                        plan,
                    } => {
                        let e = g.scalar(self.state.epsilon.value, self.state.epsilon.learnable);
                        eps_node = Some(e);
                        let yt = emu_targets_graph(&mut g, e, targets.view(), plan)?;
                        (batch.x_tilde.clone(), yt)
                    }
                };
                let xs = g.constant(xt.into_dyn());
                let logits_s = model.forward_graph(&mut g, &params, xs)?;
                let pred_s = g.softmax_rows(logits_s)?;
                regularize::structural_loss(&mut g, pred_s, yt, self.config.structural_loss)?
            }
        };
        let weighted = g.scale(structural, w_s);
        let total = g.add(supervised, weighted)?;
        let (l_sup, l_struct, l_total) = (
            g.scalar_value(supervised),
            g.scalar_value(structural),
            g.scalar_value(total),
        );
        if !l_total.is_finite() {
            self.graph = g;
            return Err(self.non_finite("loss"));
        }
        let coupled = self.config.weight_decay_mode == WeightDecayMode::Coupled;
        let objective = if coupled && self.config.weight_decay > 0.0 {
            let pen = model.l2_penalty(&mut g, &params, self.config.weight_decay)?;
            g.add(total, pen)?
        } else {
            total
        };
        g.backward(objective)?;
        let grads = model.gradients(&g, &params);
        let epsilon_grad = eps_node.map_or(0.0, |e| g.grad(e)[[]]);
        self.graph = g;

        let decay = if coupled { 0.0 } else { self.config.weight_decay };
        match sgd_step(&mut self.state.model, &grads, self.config.lr, decay) {
            Err(ModelError::NonFinite(what)) => return Err(self.non_finite(what)),
            other => other?,
        }
        if eps_node.is_some() {
            self.state.epsilon.step(epsilon_grad, self.config.lr);
        }
        self.state.teacher.update(&self.state.model)?;
        self.state.step += 1;
        Ok(StepRecord {
            step: t,
            l_sup,
            l_struct,
            w_s,
            l_total,
            epsilon: self.state.epsilon.value,
            epsilon_grad,
            grad_norm: grads.norm(),
        })
    }

    /// Teacher error rates, entropy on training rows, and label quality.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let teacher = self.state.teacher.model();
        let err = |ds: &Dataset| -> Result<f64> {
            let (rows, classes) = labeled_rows(ds);
            let x = ds.features.select(Axis(0), &rows);
            Ok(metrics::error_rate(teacher.predict(x.view())?.view(), &classes)?)
        };
        let train_pred = teacher.predict(self.data.train.features.view())?;
        Ok(Evaluation {
            train_err: err(&self.data.train)?,
            test_err: err(&self.data.test)?,
            validation_err: self.data.validation.as_ref().map(err).transpose()?,
            mean_entropy: metrics::mean_entropy(train_pred.view()),
            label_quality: self.label_quality()?,
        })
    }

    /// Quality of the run's synthetic labels against the reference model on a
    /// batch that depends only on (seed, step), so arms see the same rows.
    pub fn label_quality(&self) -> Result<Option<f64>> {
        let Some(oracle) = &self.oracle else {
            return Ok(None);
        };
        let cfg = &self.config;
        let mut rng = seeded_rng(derive_seed(derive_seed(cfg.seed, TAG_QUALITY), self.state.step));
        let n = self.data.train.len();
        let rows: Vec<usize> = (0..cfg.quality_rows)
            .map(|_| rand::Rng::random_range(&mut rng, 0..n))
            .collect();
        let x = self.data.train.features.select(Axis(0), &rows);
        let teacher_pred = self.state.teacher.model().predict(x.view())?;
        let model_pred = self.state.model.predict(x.view())?;
        let mut p = Array2::zeros((rows.len(), self.data.train.class_count));
        for (r, &i) in rows.iter().enumerate() {
            let row = if self.data.is_labeled[i] {
                self.data.train.targets(&[i]).row(0).to_owned()
            } else {
                match cfg.pseudo_labeler {
                    PseudoLabelKind::EmaWeights => teacher_pred.row(r).to_owned(),
                    PseudoLabelKind::Current | PseudoLabelKind::EmaPred => model_pred.row(r).to_owned(),
                }
            };
            p.row_mut(r).assign(&row);
        }
        let synthetic = match cfg.transform {
            TransformKind::Consistency => {
                consistency_transform(x.view(), p.view(), cfg.consistency_noise_sd, &mut rng)?
            }
            TransformKind::Mixup => {
                let plan = plan_mix(x.view(), cfg.beta, &mut rng)?;
                mixup_transform(x.view(), p.view(), &plan)?
            }
            TransformKind::Emu => {
                let plan = plan_mix(x.view(), cfg.beta, &mut rng)?;
                emu_transform(x.view(), p.view(), self.state.epsilon.value, &plan)?
            }
        };
        let reference = oracle.predict(synthetic.x_tilde.view())?;
        Ok(Some(
            metrics::label_quality(synthetic.y_tilde.view(), reference.view())?.value,
        ))
    }
}

/// Final values and the ε trajectory of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub transform: TransformKind,
    pub total_batches: u64,
    pub final_test_err: f64,
    /// Mean of the logged test errors inside the last epoch.
    pub final_epoch_test_err: f64,
    pub final_train_err: f64,
    pub final_validation_err: Option<f64>,
    pub final_mean_entropy: f64,
    pub final_label_quality: Option<f64>,
    pub final_epsilon: f64,
    pub epsilon_max: f64,
    pub avg_inter_pair_distance: f64,
    pub final_eps_pct: Option<f64>,
    pub epsilon_trajectory: Vec<(u64, f64)>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub summary: RunSummary,
    pub steps: Vec<StepRecord>,
    pub log: Vec<MetricsRecord>,
    pub state: TrainState,
}

impl RunResult {
    pub fn metrics_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        metrics::write_metrics_csv(&mut buf, &self.log).expect("in-memory write");
        buf
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes") + "\n"
    }

    /// Writes `metrics.csv` and `summary.json` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        let io = |path: PathBuf| move |source| TrainError::Io { path, source };
        fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.metrics_csv()).map_err(io(csv.clone()))?;
        let js = dir.join("summary.json");
        fs::write(&js, self.summary_json()).map_err(io(js.clone()))
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoints go to `<run_dir>/<step>.ckpt` when set.
    pub run_dir: Option<PathBuf>,
}

/// Trains for `total_batches` steps, evaluating through the teacher every
/// `eval_interval` steps and after the last one.
pub fn run(config: RunConfig, options: &RunOptions) -> Result<RunResult> {
    let trainer = Trainer::new(config)?;
    run_trainer(trainer, options)
}

/// Continues a trainer (fresh or restored) up to its configured total.
pub fn run_trainer(mut trainer: Trainer, options: &RunOptions) -> Result<RunResult> {
    let total = trainer.config.total_batches;
    let interval = trainer.config.eval_interval;
    let ckpt_interval = trainer.config.checkpoint_interval;
    if let Some(dir) = &options.run_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let mut steps = Vec::new();
    let mut log = Vec::new();
    while trainer.state.step < total {
        let rec = trainer.step()?;
        let done = trainer.state.step;
        if done % interval == 0 || done == total {
            let ev = trainer.evaluate()?;
            log.push(MetricsRecord {
                step: done,
                l_sup: rec.l_sup,
                l_struct: rec.l_struct,
                w_s: rec.w_s,
                l_total: rec.l_total,
                epsilon: rec.epsilon,
                eps_pct: metrics::eps_pct(rec.epsilon, trainer.avg_pair_distance),
                train_err: ev.train_err,
                test_err: ev.test_err,
                mean_entropy: ev.mean_entropy,
                label_quality: ev.label_quality,
            });
        }
        steps.push(rec);
        if let Some(dir) = &options.run_dir {
            if (ckpt_interval > 0 && done % ckpt_interval == 0) || done == total {
                trainer.write_checkpoint(dir)?;
            }
        }
    }
    let ev = trainer.evaluate()?;
    let bpe = trainer.config.batches_per_epoch;
    let last_epoch: Vec<f64> = log
        .iter()
        .filter(|r| r.step + bpe > total)
        .map(|r| r.test_err)
        .collect();
    let final_epoch_test_err = if last_epoch.is_empty() {
        ev.test_err
    } else {
        last_epoch.iter().sum::<f64>() / last_epoch.len() as f64
    };
    let eps = trainer.state.epsilon.value;
    let summary = RunSummary {
        seed: trainer.config.seed,
        transform: trainer.config.transform,
        total_batches: total,
        final_test_err: ev.test_err,
        final_epoch_test_err,
        final_train_err: ev.train_err,
        final_validation_err: ev.validation_err,
        final_mean_entropy: ev.mean_entropy,
        final_label_quality: ev.label_quality,
        final_epsilon: eps,
        epsilon_max: trainer.state.epsilon.max,
        avg_inter_pair_distance: trainer.avg_pair_distance,
        final_eps_pct: metrics::eps_pct(eps, trainer.avg_pair_distance),
        epsilon_trajectory: log.iter().map(|r| (r.step, r.epsilon)).collect(),
    };
    Ok(RunResult {
        summary,
        steps,
        log,
        state: trainer.state,
    })
}
