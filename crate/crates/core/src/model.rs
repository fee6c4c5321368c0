//! MLP classifier, plain SGD with decoupled weight decay, and the EMA teacher.

use ndarray::{Array1, Array2, ArrayView2, Axis, IxDyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Graph, NodeId};
use crate::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("input width {got} does not match the model's {expected} features")]
    Shape { expected: usize, got: usize },
    #[error("parameter shapes differ: {0}")]
    ParamMismatch(String),
    #[error("non-finite {0}; update aborted")]
    NonFinite(&'static str),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Dense layer; `weight` is `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Fully connected ReLU network producing logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    layers: Vec<Layer>,
}

/// Graph handles for one bound copy of the parameters.
#[derive(Clone, Debug)]
pub struct BoundParams {
    nodes: Vec<(NodeId, NodeId)>,
}

impl BoundParams {
    pub fn nodes(&self) -> &[(NodeId, NodeId)] {
        &self.nodes
    }
}

/// Gradient with the same layout as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(ModelError::Architecture(format!(
            "layer widths {widths:?} need at least input and output, all positive"
        )));
    }
    Ok(())
}

impl MlpClassifier {
    /// He-style uniform initialisation: weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn new(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_fn((w[0], w[1]), |_| {
                        rng.random_range(-bound..bound)
                    }),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ModelError::Architecture("no layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weight.ncols() != l.bias.len() {
                return Err(ModelError::Architecture(format!(
                    "layer {k}: weight {:?} vs bias {}",
                    l.weight.dim(),
                    l.bias.len()
                )));
            }
            if k > 0 && layers[k - 1].weight.ncols() != l.weight.nrows() {
                return Err(ModelError::Architecture(format!(
                    "layer {k} expects {} inputs, previous layer emits {}",
                    l.weight.nrows(),
                    layers[k - 1].weight.ncols()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.nrows()];
        w.extend(self.layers.iter().map(|l| l.weight.ncols()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// All parameters, layer by layer, weight (row-major) then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Inverse of [`MlpClassifier::flatten`] for a model of this shape.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.iter().copied();
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: Array2::from_shape_fn(l.weight.dim(), |_| it.next().unwrap()),
                bias: Array1::from_shape_fn(l.bias.len(), |_| it.next().unwrap()),
            })
            .collect();
        Self { layers }
    }

    fn check_input(&self, d: usize) -> Result<()> {
        if d != self.input_dim() {
            return Err(ModelError::Shape {
                expected: self.input_dim(),
                got: d,
            });
        }
        Ok(())
    }

    /// Logits without building a graph.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (k, l) in self.layers.iter().enumerate() {
            h = h.dot(&l.weight) + &l.bias;
            if k < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Class probabilities (softmax of the logits).
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(autodiff::softmax_rows(self.forward(x)?.view()))
    }

    /// Registers the parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let nodes = self
            .layers
            .iter()
            .map(|l| {
                let w = g.leaf(l.weight.clone().into_dyn());
                let b = g.leaf(l.bias.clone().insert_axis(Axis(0)).into_dyn());
                (w, b)
            })
            .collect();
        BoundParams { nodes }
    }

    /// Differentiable logits for the graph node `x` (m x d).
    pub fn forward_graph(&self, g: &mut Graph, params: &BoundParams, x: NodeId) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        self.check_input(*shape.last().unwrap_or(&0))?;
        let last = params.nodes.len() - 1;
        let mut h = x;
        for (k, &(w, b)) in params.nodes.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add(z, b)?;
            if k < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Reads the gradients accumulated on bound parameters.
    pub fn gradients(&self, g: &Graph, params: &BoundParams) -> Gradients {
        let layers = params
            .nodes
            .iter()
            .map(|&(w, b)| Layer {
                weight: g
                    .grad(w)
                    .clone()
                    .into_dimensionality()
                    .expect("weight gradient is 2-D"),
                bias: g
                    .grad(b)
                    .clone()
                    .into_shape_with_order(IxDyn(&[g.grad(b).len()]))
                    .expect("bias gradient reshapes")
                    .into_dimensionality()
                    .expect("bias gradient is 1-D"),
            })
            .collect();
        Gradients { layers }
    }

    /// `0.5 * wd * sum ||W||^2` as a graph node (coupled weight decay).
    pub fn l2_penalty(&self, g: &mut Graph, params: &BoundParams, wd: f64) -> Result<NodeId> {
        let mut total = g.scalar(0.0, false);
        for &(w, _) in &params.nodes {
            let sq = g.mul(w, w)?;
            let s = g.sum(sq);
            total = g.add(total, s)?;
        }
        Ok(g.scale(total, 0.5 * wd))
    }

    fn same_shape(&self, other: &[Layer]) -> Result<()> {
        let ok = self.layers.len() == other.len()
            && self
                .layers
                .iter()
                .zip(other)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len());
        if !ok {
            return Err(ModelError::ParamMismatch(format!(
                "model {:?} vs {} layers",
                self.widths(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// `θ ← θ − lr·(grad + wd·θ)` on weights; biases get no decay.
pub fn sgd_step(model: &mut MlpClassifier, grads: &Gradients, lr: f64, wd: f64) -> Result<()> {
    model.same_shape(&grads.layers)?;
    if !grads.is_finite() {
        return Err(ModelError::NonFinite("gradient"));
    }
    let mut next = model.layers.clone();
    for (l, gl) in next.iter_mut().zip(&grads.layers) {
        ndarray::Zip::from(&mut l.weight)
            .and(&gl.weight)
            .for_each(|w, &gw| *w -= lr * (gw + wd * *w));
        ndarray::Zip::from(&mut l.bias)
            .and(&gl.bias)
            .for_each(|b, &gb| *b -= lr * gb);
    }
    let candidate = MlpClassifier { layers: next };
    if !candidate.is_finite() {
        return Err(ModelError::NonFinite("parameter after update"));
    }
    *model = candidate;
    Ok(())
}

/// Exponential moving average of the student's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaTeacher {
    shadow: MlpClassifier,
    decay: f64,
}

impl EmaTeacher {
    /// Starts as an exact copy of `model`.
    pub fn new(model: &MlpClassifier, decay: f64) -> Self {
        Self {
            shadow: model.clone(),
            decay,
        }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn model(&self) -> &MlpClassifier {
        &self.shadow
    }

    /// `θ̄ ← κ·θ̄ + (1−κ)·θ` elementwise.
    pub fn update(&mut self, model: &MlpClassifier) -> Result<()> {
        self.shadow.same_shape(&model.layers)?;
        let k = self.decay;
        for (s, l) in self.shadow.layers.iter_mut().zip(&model.layers) {
            ndarray::Zip::from(&mut s.weight)
                .and(&l.weight)
                .for_each(|a, &b| *a = k * *a + (1.0 - k) * b);
            ndarray::Zip::from(&mut s.bias)
                .and(&l.bias)
                .for_each(|a, &b| *a = k * *a + (1.0 - k) * b);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use ndarray::array;

    #[test]
    fn zero_network_gives_uniform_predictions() {
        let m = MlpClassifier::zeros(&[2, 8, 3]).unwrap();
        let x = array![[0.3, -2.0], [5.0, 1.0]];
        assert!(m.forward(x.view()).unwrap().iter().all(|&v| v == 0.0));
        let p = m.predict(x.view()).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_identity_layer_reproduces_inputs() {
        let m = MlpClassifier::from_layers(vec![Layer {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        }])
        .unwrap();
        let x = array![[0.25, -1.5], [3.0, 4.0]];
        assert_eq!(m.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn feature_width_mismatch() {
        let m = MlpClassifier::zeros(&[2, 4, 2]).unwrap();
        let x = array![[1.0, 2.0, 3.0]];
        assert_eq!(
            m.forward(x.view()),
            Err(ModelError::Shape {
                expected: 2,
                got: 3
            })
        );
    }

    #[test]
    fn graph_forward_matches_value_forward() {
        let m = MlpClassifier::new(&[2, 16, 16, 3], &mut seeded_rng(3)).unwrap();
        let x = array![[0.3, -0.2], [1.0, 0.5], [-0.7, 0.9]];
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let xn = g.constant(x.clone().into_dyn());
        let out = m.forward_graph(&mut g, &p, xn).unwrap();
        let direct = m.forward(x.view()).unwrap().into_dyn();
        for (a, b) in g.value(out).iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_examples() {
        let mut m = MlpClassifier::from_layers(vec![Layer {
            weight: array![[1.0]],
            bias: array![1.0],
        }])
        .unwrap();
        let zero = Gradients {
            layers: vec![Layer {
                weight: array![[0.0]],
                bias: array![0.0],
            }],
        };
        let before = m.clone();
        sgd_step(&mut m, &zero, 0.5, 0.0).unwrap();
        assert_eq!(m, before);
        sgd_step(&mut m, &zero, 0.0, 0.3).unwrap();
        assert_eq!(m, before);

        // θ = 1 − 1·(0 + 0.1·1) = 0.9; the bias is not decayed.
        sgd_step(&mut m, &zero, 1.0, 0.1).unwrap();
        assert_eq!(m.layers()[0].weight[[0, 0]], 0.9);
        assert_eq!(m.layers()[0].bias[0], 1.0);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut m = MlpClassifier::zeros(&[1, 1]).unwrap();
        let bad = Gradients {
            layers: vec![Layer {
                weight: array![[f64::NAN]],
                bias: array![0.0],
            }],
        };
        let before = m.clone();
        assert_eq!(
            sgd_step(&mut m, &bad, 0.1, 0.0),
            Err(ModelError::NonFinite("gradient"))
        );
        assert_eq!(m, before);
    }

    #[test]
    fn ema_examples() {
        let one = MlpClassifier::from_layers(vec![Layer {
            weight: array![[1.0]],
            bias: array![1.0],
        }])
        .unwrap();
        let zero = MlpClassifier::zeros(&[1, 1]).unwrap();

        let mut t = EmaTeacher::new(&zero, 0.0);
        t.update(&one).unwrap();
        assert_eq!(t.model(), &one);

        let mut t = EmaTeacher::new(&zero, 0.999);
        t.update(&one).unwrap();
        assert!((t.model().layers()[0].weight[[0, 0]] - 0.001).abs() < 1e-15);

        // Gap to a constant target shrinks by κ each step.
        let mut t = EmaTeacher::new(&zero, 0.9);
        for _ in 0..10 {
            t.update(&one).unwrap();
        }
        let gap = 1.0 - t.model().layers()[0].weight[[0, 0]];
        assert!((gap - 0.9f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn flatten_roundtrip() {
        let m = MlpClassifier::new(&[3, 5, 2], &mut seeded_rng(0)).unwrap();
        assert_eq!(m.with_flat(&m.flatten()), m);
        assert_eq!(m.param_count(), 3 * 5 + 5 + 5 * 2 + 2);
    }
}
