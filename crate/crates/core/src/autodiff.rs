//! Define-by-run reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an append-only node arena. Every operation pushes a node
//! whose parents already live in the arena, so insertion order is a valid
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! The graph is rebuilt for every batch; [`Graph::reset`] clears it and bumps
//! the generation so handles from the previous pass are rejected.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Zip};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: input outside domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: wrong number of inputs (expected {expected}, got {got})")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite objective while probing coordinate {coordinate}")]
    Evaluation { coordinate: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of one particular graph generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    index: usize,
    generation: u64,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Elementwise operation selector for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Log,
    Clamp { lo: f64, hi: f64 },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    /// Elementwise function of a scalar input with precomputed local slopes.
    FanOut { input: usize, slope: ArrayD<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: ArrayD<f64>,
    grad: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of nodes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    generation: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node and invalidates outstanding handles.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn slot(&self, id: NodeId) -> usize {
        assert_eq!(
            id.generation, self.generation,
            "node handle from graph generation {} used at generation {}",
            id.generation, self.generation
        );
        assert!(id.index < self.nodes.len(), "node handle out of range");
        id.index
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> NodeId {
        let grad = ArrayD::zeros(value.raw_dim());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        NodeId {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    /// Trainable input: accumulates gradient during [`Graph::backward`].
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64, requires_grad: bool) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), value);
        self.push(v, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[self.slot(id)].value
    }

    pub fn grad(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[self.slot(id)].grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[self.slot(id)].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on node of shape {:?}", v.shape());
        v.iter().copied().next().unwrap_or(0.0)
    }

    fn rg(&self, slots: &[usize]) -> bool {
        slots.iter().any(|&s| self.nodes[s].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.slot(a), self.slot(b));
        let av = as_matrix(&self.nodes[ia].value, "matmul")?;
        let bv = as_matrix(&self.nodes[ib].value, "matmul")?;
        if av.ncols() != bv.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = av.dot(&bv).into_dyn();
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<NodeId> {
        let (ia, ib) = (self.slot(a), self.slot(b));
        let out = zip_broadcast(&self.nodes[ia].value, &self.nodes[ib].value, name, f)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ib = self.slot(b);
        if self.nodes[ib].value.iter().any(|&v| v == 0.0) {
            return Err(AutodiffError::Domain {
                op: "div",
                detail: "zero divisor".into(),
            });
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ia = self.slot(a);
        let out = self.nodes[ia].value.mapv(|v| v * c);
        let rg = self.rg(&[ia]);
        self.push(out, Op::Scale(ia, c), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ia = self.slot(a);
        let out = self.nodes[ia].value.mapv(|v| v.max(0.0));
        let rg = self.rg(&[ia]);
        self.push(out, Op::Relu(ia), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let ia = self.slot(a);
        let out = self.nodes[ia].value.mapv(f64::exp);
        let rg = self.rg(&[ia]);
        self.push(out, Op::Exp(ia), rg)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.slot(a);
        if let Some(bad) = self.nodes[ia].value.iter().find(|&&v| !(v > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = self.nodes[ia].value.mapv(f64::ln);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Log(ia), rg))
    }

    /// Gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let ia = self.slot(a);
        let out = self.nodes[ia].value.mapv(|v| v.clamp(lo, hi));
        let rg = self.rg(&[ia]);
        self.push(out, Op::Clamp { input: ia, lo, hi }, rg)
    }

    /// Dispatches an [`Elementwise`] kind over its inputs.
    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(AutodiffError::Arity {
                op: "elementwise",
                expected: arity,
                got: inputs.len(),
            });
        }
        match kind {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Div => self.div(inputs[0], inputs[1]),
            Elementwise::Relu => Ok(self.relu(inputs[0])),
            Elementwise::Exp => Ok(self.exp(inputs[0])),
            Elementwise::Log => self.log(inputs[0]),
            Elementwise::Clamp { lo, hi } => Ok(self.clamp(inputs[0], lo, hi)),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, z: NodeId) -> Result<NodeId> {
        let iz = self.slot(z);
        let zv = as_matrix(&self.nodes[iz].value, "softmax_rows")?;
        let out = softmax_rows(zv.view()).into_dyn();
        let rg = self.rg(&[iz]);
        Ok(self.push(out, Op::SoftmaxRows(iz), rg))
    }

    /// Row-wise `z - logsumexp(z)`.
    pub fn log_softmax_rows(&mut self, z: NodeId) -> Result<NodeId> {
        let iz = self.slot(z);
        let zv = as_matrix(&self.nodes[iz].value, "log_softmax_rows")?;
        let mut out = zv.to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(&[iz]);
        Ok(self.push(out.into_dyn(), Op::LogSoftmaxRows(iz), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let ia = self.slot(a);
        let s = self.nodes[ia].value.sum();
        let rg = self.rg(&[ia]);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(ia), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let ia = self.slot(a);
        let v = &self.nodes[ia].value;
        let s = v.sum() / v.len().max(1) as f64;
        let rg = self.rg(&[ia]);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Mean(ia), rg)
    }

    /// Registers `value = g(input)` for a scalar `input`, where `g` is
    /// evaluated by the caller and `slope` holds `dg/d input` per element.
    pub fn fan_out_scalar(
        &mut self,
        input: NodeId,
        value: ArrayD<f64>,
        slope: ArrayD<f64>,
    ) -> Result<NodeId> {
        let ii = self.slot(input);
        if self.nodes[ii].value.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "fan_out_scalar",
                left: self.nodes[ii].value.shape().to_vec(),
                right: vec![],
            });
        }
        if value.shape() != slope.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "fan_out_scalar",
                left: value.shape().to_vec(),
                right: slope.shape().to_vec(),
            });
        }
        let rg = self.rg(&[ii]);
        Ok(self.push(value, Op::FanOut { input: ii, slope }, rg))
    }

    /// Populates `grad` of every node reachable from `root` with
    /// `d root / d node`. Gradients from an earlier sweep are discarded.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let ir = self.slot(root);
        if self.nodes[ir].value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(
                self.nodes[ir].value.shape().to_vec(),
            ));
        }
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
        self.nodes[ir].grad.fill(1.0);

        for i in (0..=ir).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[i].grad);
            let contributions = self.local_backward(i, &g);
            self.nodes[i].grad = g;
            for (p, delta) in contributions {
                if self.nodes[p].requires_grad {
                    self.nodes[p].grad += &delta;
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)> {
        let node = &self.nodes[i];
        let val = |p: usize| &self.nodes[p].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("matmul grad is 2-D");
                let av = val(*a).view().into_dimensionality::<Ix2>().expect("2-D");
                let bv = val(*b).view().into_dimensionality::<Ix2>().expect("2-D");
                vec![
                    (*a, g2.dot(&bv.t()).into_dyn()),
                    (*b, av.t().dot(&g2).into_dyn()),
                ]
            }
            Op::Add(a, b) => vec![
                (*a, reduce_to_shape(g.clone(), val(*a).shape())),
                (*b, reduce_to_shape(g.clone(), val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to_shape(g.clone(), val(*a).shape())),
                (*b, reduce_to_shape(g.mapv(|v| -v), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = zip3(g, bv, |gv, y| gv * y);
                let gb = zip3(g, av, |gv, x| gv * x);
                vec![
                    (*a, reduce_to_shape(ga, av.shape())),
                    (*b, reduce_to_shape(gb, bv.shape())),
                ]
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = zip3(g, bv, |gv, y| gv / y);
                // d(x/y)/dy = -x/y^2 = -out/y
                let gy = zip3(g, &node.value, |gv, o| gv * o);
                let gb = zip3(&gy, bv, |t, y| -t / y);
                vec![
                    (*a, reduce_to_shape(ga, av.shape())),
                    (*b, reduce_to_shape(gb, bv.shape())),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.mapv(|v| v * c))],
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![(*a, d)]
            }
            Op::Exp(a) => {
                let mut d = g.clone();
                d *= &node.value;
                vec![(*a, d)]
            }
            Op::Log(a) => {
                let mut d = g.clone();
                d /= val(*a);
                vec![(*a, d)]
            }
            Op::Clamp { input, lo, hi } => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*input)).for_each(|d, &x| {
                    if !(x > *lo && x < *hi) {
                        *d = 0.0
                    }
                });
                vec![(*input, d)]
            }
            Op::SoftmaxRows(z) => {
                let s = node.value.view().into_dimensionality::<Ix2>().expect("2-D");
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D");
                let mut d = g2.to_owned();
                for (mut drow, srow) in d.rows_mut().into_iter().zip(s.rows()) {
                    let dot: f64 = drow.iter().zip(srow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut drow).and(&srow).for_each(|dv, &sv| *dv = sv * (*dv - dot));
                }
                vec![(*z, d.into_dyn())]
            }
            Op::LogSoftmaxRows(z) => {
                let ls = node.value.view().into_dimensionality::<Ix2>().expect("2-D");
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D");
                let mut d = g2.to_owned();
                for (mut drow, lrow) in d.rows_mut().into_iter().zip(ls.rows()) {
                    let total: f64 = drow.sum();
                    Zip::from(&mut drow)
                        .and(&lrow)
                        .for_each(|dv, &lv| *dv -= lv.exp() * total);
                }
                vec![(*z, d.into_dyn())]
            }
            Op::Sum(a) => {
                let gs = g.iter().copied().next().unwrap_or(0.0);
                vec![(*a, ArrayD::from_elem(val(*a).raw_dim(), gs))]
            }
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                let gs = g.iter().copied().next().unwrap_or(0.0) / n;
                vec![(*a, ArrayD::from_elem(val(*a).raw_dim(), gs))]
            }
            Op::FanOut { input, slope } => {
                let total: f64 = g.iter().zip(slope.iter()).map(|(a, b)| a * b).sum();
                vec![(*input, ArrayD::from_elem(val(*input).raw_dim(), total))]
            }
        }
    }
}

fn as_matrix<'a>(v: &'a ArrayD<f64>, op: &'static str) -> Result<ndarray::ArrayView2<'a, f64>> {
    v.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| AutodiffError::ShapeMismatch {
            op,
            left: v.shape().to_vec(),
            right: vec![0, 0],
        })
}

/// Numerically stable row softmax of a 2-D array.
pub fn softmax_rows(z: ndarray::ArrayView2<f64>) -> ndarray::Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for k in 0..n {
        let da = if k + a.len() >= n { a[k + a.len() - n] } else { 1 };
        let db = if k + b.len() >= n { b[k + b.len() - n] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn zip_broadcast(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<ArrayD<f64>> {
    let mismatch = || AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    };
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(mismatch)?;
    let av: ArrayViewD<f64> = a.broadcast(IxDyn(&shape)).ok_or_else(mismatch)?;
    let bv: ArrayViewD<f64> = b.broadcast(IxDyn(&shape)).ok_or_else(mismatch)?;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

/// `f(g, other)` elementwise where `other` broadcasts to `g`'s shape.
fn zip3(g: &ArrayD<f64>, other: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let ov = other
        .broadcast(g.raw_dim())
        .expect("operand broadcasts to output shape");
    let mut out = g.clone();
    Zip::from(&mut out).and(&ov).for_each(|o, &y| *o = f(*o, y));
    out
}

/// Sums a broadcast gradient back down to an operand's shape.
fn reduce_to_shape(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

/// Central-difference gradient check.
///
/// `f` returns the objective and its analytic gradient at the given point;
/// probes only use the objective. The result is the maximum over coordinates
/// of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(h > 0.0) {
        return Err(AutodiffError::BadStep(h));
    }
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut probe = params.to_vec();
    let mut worst = 0.0_f64;
    for k in 0..params.len() {
        probe[k] = params[k] + h;
        let (up, _) = f(&probe);
        probe[k] = params[k] - h;
        let (down, _) = f(&probe);
        probe[k] = params[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(AutodiffError::Evaluation { coordinate: k });
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[k] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
