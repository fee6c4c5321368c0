//! Pseudo-labelers, synthetic-batch transforms, structural losses and the
//! structural-weight ramp.
//!
//! Three transforms are provided:
//!
//! * consistency: `x̃ = x + noise`, `ỹ = p(y)`;
//! * Mixup: `x̃ = λ x_i + (1-λ) x_j`, `ỹ = λ p(y_i) + (1-λ) p(y_j)`;
//! * epsilon-consistent Mixup (εmu): Mixup features, but targets mixed with
//!   `η_ε(λ)`, which pins `ỹ` to the nearer endpoint's label inside a radius
//!   `ε` around each endpoint and interpolates linearly in between.
//!
//! With `ν = ε / ‖x_i − x_j‖`:
//!
//! ```text
//! η(λ) = 0                      λ ≤ ν
//!        (λ − ν) / (1 − 2ν)     ν < λ < 1 − ν
//!        1                      λ ≥ 1 − ν
//! ```
//!
//! Once `ν` reaches one half the interior interval is empty and `η` is a
//! step at `λ = 0.5`. `ε` is a trainable scalar: the εmu targets are built on
//! the graph so the structural loss carries a gradient to `ε`.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::model::{EmaTeacher, MlpClassifier, ModelError};
use crate::Rng;

/// Floor on pair distances when forming `ν`.
pub const DIST_FLOOR: f64 = 1e-8;
/// `ν` at or above `0.5 - STEP_GUARD` uses the step regime.
pub const STEP_GUARD: f64 = 1e-6;
/// Smoothing inside logarithms of the KL and CE structural losses.
pub const LOG_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum RegularizeError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("ema_weights pseudo-labels need a teacher")]
    MissingTeacher,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, RegularizeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Consistency,
    Mixup,
    Emu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralLossKind {
    Mse,
    Kl,
    Ce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelKind {
    /// `f_θt(x)`.
    Current,
    /// Per-example running average of `f_θt(x)`.
    EmaPred,
    /// `f_θ̄t(x)` from the EMA teacher.
    EmaWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixScope {
    /// One permutation over labeled and unlabeled rows together.
    All,
    /// Unlabeled rows mixed only with each other.
    UnlabeledOnly,
}

/// Produces detached class distributions for unlabeled rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeler {
    kind: PseudoLabelKind,
    prediction_decay: f64,
    table: BTreeMap<usize, Vec<f64>>,
}

impl PseudoLabeler {
    pub fn new(kind: PseudoLabelKind, prediction_decay: f64) -> Self {
        Self {
            kind,
            prediction_decay,
            table: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> PseudoLabelKind {
        self.kind
    }

    /// Labels `x` (rows of dataset entries `indices`).
    pub fn label(
        &mut self,
        x: ArrayView2<f64>,
        indices: &[usize],
        model: &MlpClassifier,
        teacher: Option<&EmaTeacher>,
    ) -> Result<Array2<f64>> {
        match self.kind {
            PseudoLabelKind::Current => Ok(model.predict(x)?),
            PseudoLabelKind::EmaWeights => {
                let t = teacher.ok_or(RegularizeError::MissingTeacher)?;
                Ok(t.model().predict(x)?)
            }
            PseudoLabelKind::EmaPred => {
                if indices.len() != x.nrows() {
                    return Err(RegularizeError::Shape(format!(
                        "{} rows but {} indices",
                        x.nrows(),
                        indices.len()
                    )));
                }
                let current = model.predict(x)?;
                let k = self.prediction_decay;
                let mut out = current.clone();
                for (mut row, &idx) in out.rows_mut().into_iter().zip(indices) {
                    if let Some(prev) = self.table.get(&idx) {
                        for (v, &p) in row.iter_mut().zip(prev) {
                            *v = k * p + (1.0 - k) * *v;
                        }
                        let total = row.sum();
                        row.mapv_inplace(|v| v / total);
                    }
                    self.table.insert(idx, row.to_vec());
                }
                Ok(out)
            }
        }
    }

    pub fn seeded_entries(&self) -> usize {
        self.table.len()
    }
}

/// Pairing and mixing coefficients for one synthetic batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub pair_index: Vec<usize>,
    pub lambda: Vec<f64>,
    pub pair_distance: Vec<f64>,
    /// Filled by the εmu transform.
    pub nu: Vec<f64>,
    /// Response mixing weights actually used (`λ` for Mixup).
    pub eta: Vec<f64>,
}

impl MixPlan {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn max_distance(&self) -> f64 {
        self.pair_distance.iter().copied().fold(0.0, f64::max)
    }
}

/// `λ ~ Beta(β, β)`.
pub fn draw_lambda(beta: f64, rng: &mut Rng) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(RegularizeError::Argument(format!("beta must be > 0, got {beta}")));
    }
    let dist = Beta::new(beta, beta)
        .map_err(|e| RegularizeError::Argument(format!("beta {beta}: {e}")))?;
    Ok(dist.sample(rng).clamp(0.0, 1.0))
}

/// Draws a row permutation, then one `λ` per row, and records pair distances.
pub fn plan_mix(x: ArrayView2<f64>, beta: f64, rng: &mut Rng) -> Result<MixPlan> {
    let m = x.nrows();
    let mut pair_index: Vec<usize> = (0..m).collect();
    pair_index.shuffle(rng);
    let lambda = (0..m)
        .map(|_| draw_lambda(beta, rng))
        .collect::<Result<Vec<_>>>()?;
    let pair_distance = pair_index
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            x.row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(MixPlan {
        pair_index,
        eta: lambda.clone(),
        nu: vec![0.0; m],
        lambda,
        pair_distance,
    })
}

/// `ν = ε / max(dist, DIST_FLOOR)`.
pub fn rescaled_radius(epsilon: f64, dist: f64) -> f64 {
    epsilon / dist.max(DIST_FLOOR)
}

/// `η(λ)` for a given `ν`, together with `dη/dν`.
pub fn eta_with_slope(lambda: f64, nu: f64) -> (f64, f64) {
    if nu >= 0.5 - STEP_GUARD {
        let eta = if lambda < 0.5 {
            0.0
        } else if lambda > 0.5 {
            1.0
        } else {
            0.5
        };
        return (eta, 0.0);
    }
    if lambda <= nu {
        (0.0, 0.0)
    } else if lambda >= 1.0 - nu {
        (1.0, 0.0)
    } else {
        let den = 1.0 - 2.0 * nu;
        ((lambda - nu) / den, (2.0 * lambda - 1.0) / (den * den))
    }
}

pub fn eta(lambda: f64, nu: f64) -> f64 {
    eta_with_slope(lambda, nu).0
}

/// Scalar-node form of `η_ε(λ)`: `∂η/∂ε = (2λ−1)/((1−2ν)²·dist)` in the
/// interior and zero in the saturated and step regimes.
pub fn emu_eta(g: &mut Graph, lambda: f64, epsilon: NodeId, dist: f64) -> Result<NodeId> {
    let d = dist.max(DIST_FLOOR);
    let (value, de_dnu) = eta_with_slope(lambda, g.scalar_value(epsilon) / d);
    let value = ArrayD::from_elem(IxDyn(&[]), value);
    let slope = ArrayD::from_elem(IxDyn(&[]), de_dnu / d);
    Ok(g.fan_out_scalar(epsilon, value, slope)?)
}

/// Column (m x 1) of `η` values, differentiable in `ε`.
fn emu_eta_column(g: &mut Graph, epsilon: NodeId, lambda: &[f64], dist: &[f64]) -> Result<NodeId> {
    let eps = g.scalar_value(epsilon);
    let m = lambda.len();
    let mut value = ArrayD::zeros(IxDyn(&[m, 1]));
    let mut slope = ArrayD::zeros(IxDyn(&[m, 1]));
    for i in 0..m {
        let d = dist[i].max(DIST_FLOOR);
        let (e, de_dnu) = eta_with_slope(lambda[i], eps / d);
        value[[i, 0]] = e;
        slope[[i, 0]] = de_dnu / d;
    }
    Ok(g.fan_out_scalar(epsilon, value, slope)?)
}

/// Features and targets of a synthetic batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    pub x_tilde: Array2<f64>,
    pub y_tilde: Array2<f64>,
    pub plan: Option<MixPlan>,
}

fn check_rows(x: ArrayView2<f64>, targets: ArrayView2<f64>, plan: Option<&MixPlan>) -> Result<()> {
    if x.nrows() != targets.nrows() {
        return Err(RegularizeError::Shape(format!(
            "{} feature rows vs {} target rows",
            x.nrows(),
            targets.nrows()
        )));
    }
    if let Some(p) = plan {
        if p.len() != x.nrows() {
            return Err(RegularizeError::Shape(format!(
                "plan covers {} rows, batch has {}",
                p.len(),
                x.nrows()
            )));
        }
    }
    Ok(())
}

fn mix_features(x: ArrayView2<f64>, plan: &MixPlan) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (l, j) = (plan.lambda[i], plan.pair_index[i]);
        for ((o, &a), &b) in row.iter_mut().zip(x.row(i)).zip(x.row(j)) {
            *o = l * a + (1.0 - l) * b;
        }
    }
    out
}

/// `η·p_i + (1−η)·p_j` row by row.
fn mix_targets(targets: ArrayView2<f64>, pair_index: &[usize], eta: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros(targets.raw_dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (e, j) = (eta[i], pair_index[i]);
        for ((o, &a), &b) in row.iter_mut().zip(targets.row(i)).zip(targets.row(j)) {
            *o = e * a + (1.0 - e) * b;
        }
    }
    out
}

/// Mixup: features and targets mixed with the same `λ`.
pub fn mixup_transform(
    x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    plan: &MixPlan,
) -> Result<SyntheticBatch> {
    check_rows(x, targets, Some(plan))?;
    let mut plan = plan.clone();
    plan.eta = plan.lambda.clone();
    plan.nu = vec![0.0; plan.len()];
    Ok(SyntheticBatch {
        x_tilde: mix_features(x, &plan),
        y_tilde: mix_targets(targets, &plan.pair_index, &plan.eta),
        plan: Some(plan),
    })
}

/// εmu with a fixed `ε` (no graph); fills `ν` and `η` in the returned plan.
pub fn emu_transform(
    x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    epsilon: f64,
    plan: &MixPlan,
) -> Result<SyntheticBatch> {
    check_rows(x, targets, Some(plan))?;
    let mut plan = plan.clone();
    plan.nu = plan
        .pair_distance
        .iter()
        .map(|&d| rescaled_radius(epsilon, d))
        .collect();
    plan.eta = plan
        .lambda
        .iter()
        .zip(&plan.nu)
        .map(|(&l, &nu)| eta(l, nu))
        .collect();
    Ok(SyntheticBatch {
        x_tilde: mix_features(x, &plan),
        y_tilde: mix_targets(targets, &plan.pair_index, &plan.eta),
        plan: Some(plan),
    })
}

/// εmu targets as a graph node depending on `ε` only; `targets` are constants.
pub fn emu_targets_graph(
    g: &mut Graph,
    epsilon: NodeId,
    targets: ArrayView2<f64>,
    plan: &MixPlan,
) -> Result<NodeId> {
    if plan.len() != targets.nrows() {
        return Err(RegularizeError::Shape(format!(
            "plan covers {} rows, targets have {}",
            plan.len(),
            targets.nrows()
        )));
    }
    let eta = emu_eta_column(g, epsilon, &plan.lambda, &plan.pair_distance)?;
    let own = g.constant(targets.to_owned().into_dyn());
    let partner = g.constant(targets.select(Axis(0), &plan.pair_index).into_dyn());
    let one = g.scalar(1.0, false);
    let a = g.mul(eta, own)?;
    let rest = g.sub(one, eta)?;
    let b = g.mul(rest, partner)?;
    Ok(g.add(a, b)?)
}

/// Additive Gaussian feature noise; targets unchanged.
pub fn consistency_transform(
    x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    noise_sd: f64,
    rng: &mut Rng,
) -> Result<SyntheticBatch> {
    check_rows(x, targets, None)?;
    if !(noise_sd >= 0.0) {
        return Err(RegularizeError::Argument(format!("noise sd {noise_sd} < 0")));
    }
    let mut x_tilde = x.to_owned();
    if noise_sd > 0.0 {
        let n = Normal::new(0.0, noise_sd).expect("finite sd");
        x_tilde.mapv_inplace(|v| v + n.sample(rng));
    }
    Ok(SyntheticBatch {
        x_tilde,
        y_tilde: targets.to_owned(),
        plan: None,
    })
}

/// Dissimilarity between predicted probabilities and synthetic targets,
/// averaged over rows. MSE is additionally divided by the class count.
pub fn structural_loss(
    g: &mut Graph,
    pred: NodeId,
    y_tilde: NodeId,
    kind: StructuralLossKind,
) -> Result<NodeId> {
    let (ps, ys) = (g.value(pred).shape().to_vec(), g.value(y_tilde).shape().to_vec());
    if ps != ys || ps.len() != 2 {
        return Err(RegularizeError::Shape(format!(
            "prediction {ps:?} vs target {ys:?}"
        )));
    }
    let (m, c) = (ps[0].max(1) as f64, ps[1] as f64);
    match kind {
        StructuralLossKind::Mse => {
            let d = g.sub(pred, y_tilde)?;
            let sq = g.mul(d, d)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 1.0 / (m * c)))
        }
        StructuralLossKind::Kl => {
            let delta = g.scalar(LOG_SMOOTHING, false);
            let ys = g.add(y_tilde, delta)?;
            let ly = g.log(ys)?;
            let ps = g.add(pred, delta)?;
            let lp = g.log(ps)?;
            let diff = g.sub(ly, lp)?;
            let t = g.mul(y_tilde, diff)?;
            let s = g.sum(t);
            Ok(g.scale(s, 1.0 / m))
        }
        StructuralLossKind::Ce => {
            let delta = g.scalar(LOG_SMOOTHING, false);
            let ps = g.add(pred, delta)?;
            let lp = g.log(ps)?;
            let t = g.mul(y_tilde, lp)?;
            let s = g.sum(t);
            Ok(g.scale(s, -1.0 / m))
        }
    }
}

/// Linear warm-up of the structural weight; `ramp_batches == 0` is constant.
pub fn ramp_weight(t: u64, ramp_batches: u64, w_max: f64) -> f64 {
    if ramp_batches == 0 {
        return w_max;
    }
    w_max * (t as f64 / ramp_batches as f64).min(1.0)
}

/// Nodes of the decomposed objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub supervised: NodeId,
    pub structural: NodeId,
}

/// Mean cross-entropy of logits against target distributions.
pub fn supervised_ce(g: &mut Graph, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let rows = g.value(logits).shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Ok(g.scalar(0.0, false));
    }
    let ls = g.log_softmax_rows(logits)?;
    let t = g.mul(targets, ls)?;
    let s = g.sum(t);
    Ok(g.scale(s, -1.0 / rows as f64))
}

/// `L_T = CE(f(X_L), Y_L) + w_S·L_S`.
pub fn total_loss(
    g: &mut Graph,
    labeled_logits: NodeId,
    labeled_targets: NodeId,
    synthetic_pred: NodeId,
    y_tilde: NodeId,
    w_s: f64,
    kind: StructuralLossKind,
) -> Result<LossNodes> {
    let supervised = supervised_ce(g, labeled_logits, labeled_targets)?;
    let structural = structural_loss(g, synthetic_pred, y_tilde, kind)?;
    let weighted = g.scale(structural, w_s);
    let total = g.add(supervised, weighted)?;
    Ok(LossNodes {
        total,
        supervised,
        structural,
    })
}

/// Trainable consistency radius, projected into `[0, max]` after each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonParam {
    pub value: f64,
    pub max: f64,
    pub learnable: bool,
}

impl EpsilonParam {
    pub fn new(value: f64, max: f64, learnable: bool) -> Self {
        Self {
            value: value.clamp(0.0, max.max(0.0)),
            max,
            learnable,
        }
    }

    pub fn project(&mut self) {
        self.value = self.value.clamp(0.0, self.max.max(0.0));
    }

    /// Plain gradient step, then projection. No-op when frozen.
    pub fn step(&mut self, grad: f64, lr: f64) {
        if self.learnable && grad.is_finite() {
            self.value -= lr * grad;
        }
        self.project();
    }
}
