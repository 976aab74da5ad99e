//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node walks the records in reverse order and
//! accumulates gradients into every node that depends on a leaf created with
//! [`Tape::param`].
//!
//! The operator set is deliberately narrow: elementwise arithmetic, a few
//! reductions, 1×1×1 channel mixing, per-channel normalization, trilinear
//! upsampling and sampling, small strided convolutions and a couple of point
//! cloud helpers. There is no broadcasting apart from the explicit
//! scalar-variable ops ([`Tape::scale_by`], [`Tape::shift_by`]).
//!
//! Tensor layout is row-major. Spatial tensors are `[C, D, H, W]` with `W`
//! varying fastest; point clouds are `[N, 3]` holding `(w, h, d)` continuous
//! index coordinates, i.e. the fastest axis first.

mod elementwise;
pub mod gradcheck;
mod linear;
mod optim;
mod reduce;
mod spatial;

pub use optim::{adam_step, Adam, AdamConfig, AdamState};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScalarMul(Var, f64),
    AddConst(Var),
    Square(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    AbsSmooth(Var, f64),
    ScaleBy(Var, Var),
    ShiftBy(Var, Var),
    Sum(Var),
    Mean(Var),
    Index(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    ChannelMean(Var),
    WeightedGroupSum(Var, Vec<f64>),
    ChannelMix(Var, Var),
    AddBias(Var, Var),
    ChannelNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv {
        x: Var,
        w: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    Upsample2x(Var),
    GridSample(Var, Var),
    ForwardDiff(Var, usize),
    AffinePoints(Var, Var),
    Jacobian(Var, Vec<f64>),
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// A recorded computation.
///
/// Tapes are single-owner and cheap to rebuild; optimizers typically build a
/// fresh tape per step, read the leaf gradients and drop it.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = match &op {
            Op::Leaf => false,
            other => inputs_of(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, true)
    }

    /// A constant leaf: no gradient is tracked.
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(Vec::new(), vec![v], Op::Leaf)
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(AdError::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![value.len()],
            });
        }
        let v = self.push(shape.to_vec(), value, Op::Leaf);
        self.nodes[v.0].needs_grad = requires_grad;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so `backward` can run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Returns the first node holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| n.value.iter().any(|x| !x.is_finite()))
            .map(Var)
    }

    /// Hash of the piecewise-smooth region the recorded computation sits in:
    /// signs of relu and |·| inputs plus the lattice cells hit by trilinear
    /// samplers and upsampling clamps. Two evaluations with the same
    /// signature differ only through smooth operations, which is what a
    /// finite-difference check needs to know.
    pub fn region_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::AbsSmooth(a, _) => {
                    for x in &self.nodes[a.0].value {
                        (*x > 0.0).hash(&mut h);
                    }
                }
                Op::GridSample(_, p) => {
                    for x in &self.nodes[p.0].value {
                        (x.floor() as i64).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AdError::BackwardTwice);
        }
        let shape = &self.nodes[loss.0].shape;
        if numel(shape) != 1 {
            return Err(AdError::NotScalar(shape.clone()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                self.grads[id] = Some(gout);
                continue;
            }
            propagate(&self.nodes, id, &gout, &mut self.grads);
        }
        self.backward_done = true;
        Ok(())
    }
}

pub(crate) fn inputs_of(op: &Op) -> Vec<Var> {
    use Op::*;
    match op {
        Leaf => vec![],
        Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ScaleBy(a, b) | ShiftBy(a, b) => {
            vec![*a, *b]
        }
        ChannelMix(a, b) | AddBias(a, b) | GridSample(a, b) | AffinePoints(a, b) => vec![*a, *b],
        ScalarMul(a, _) | AddConst(a) | Square(a) | Sqrt(a) | Log(a) | Exp(a) | Relu(a)
        | Sigmoid(a) | Tanh(a) | AbsSmooth(a, _) | Sum(a) | Mean(a) | Index(a, _) | Reshape(a)
        | ChannelMean(a) | WeightedGroupSum(a, _) | Upsample2x(a) | ForwardDiff(a, _)
        | Jacobian(a, _) => vec![*a],
        Concat(v, _) => v.clone(),
        ChannelNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Conv { x, w, .. } => vec![*x, *w],
    }
}

/// Mutable gradient buffer for `v`, allocated on first use. `None` when `v`
/// does not lead to any parameter.
pub(crate) fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    use Op::*;
    match &node.op {
        Leaf => {}
        Add(a, b) => {
            elementwise::acc(nodes, grads, *a, g, |_, gi| gi);
            elementwise::acc(nodes, grads, *b, g, |_, gi| gi);
        }
        Sub(a, b) => {
            elementwise::acc(nodes, grads, *a, g, |_, gi| gi);
            elementwise::acc(nodes, grads, *b, g, |_, gi| -gi);
        }
        Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            elementwise::acc(nodes, grads, *a, g, |i, gi| gi * bv[i]);
            elementwise::acc(nodes, grads, *b, g, |i, gi| gi * av[i]);
        }
        Div(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            elementwise::acc(nodes, grads, *a, g, |i, gi| gi / bv[i]);
            elementwise::acc(nodes, grads, *b, g, |i, gi| -gi * av[i] / (bv[i] * bv[i]));
        }
        ScalarMul(a, c) => elementwise::acc(nodes, grads, *a, g, |_, gi| gi * c),
        AddConst(a) => elementwise::acc(nodes, grads, *a, g, |_, gi| gi),
        Square(a) => {
            let av = &nodes[a.0].value;
            elementwise::acc(nodes, grads, *a, g, |i, gi| 2.0 * av[i] * gi)
        }
        Sqrt(a) => elementwise::acc(nodes, grads, *a, g, |i, gi| gi / (2.0 * out[i])),
        Log(a) => {
            let av = &nodes[a.0].value;
            elementwise::acc(nodes, grads, *a, g, |i, gi| gi / av[i])
        }
        Exp(a) => elementwise::acc(nodes, grads, *a, g, |i, gi| gi * out[i]),
        Relu(a) => {
            let av = &nodes[a.0].value;
            elementwise::acc(nodes, grads, *a, g, |i, gi| if av[i] > 0.0 { gi } else { 0.0 })
        }
        Sigmoid(a) => {
            elementwise::acc(nodes, grads, *a, g, |i, gi| gi * out[i] * (1.0 - out[i]))
        }
        Tanh(a) => elementwise::acc(nodes, grads, *a, g, |i, gi| gi * (1.0 - out[i] * out[i])),
        AbsSmooth(a, eps) => {
            let av = &nodes[a.0].value;
            elementwise::acc(nodes, grads, *a, g, |i, gi| {
                gi * av[i] / (av[i] * av[i] + eps * eps).sqrt()
            })
        }
        ScaleBy(a, s) => {
            let (av, sv) = (&nodes[a.0].value, nodes[s.0].value[0]);
            elementwise::acc(nodes, grads, *a, g, |_, gi| gi * sv);
            if let Some(gs) = grad_buf(nodes, grads, *s) {
                gs[0] += g.iter().zip(av).map(|(gi, ai)| gi * ai).sum::<f64>();
            }
        }
        ShiftBy(a, s) => {
            elementwise::acc(nodes, grads, *a, g, |_, gi| gi);
            if let Some(gs) = grad_buf(nodes, grads, *s) {
                gs[0] += g.iter().sum::<f64>();
            }
        }
        Sum(a) => {
            let g0 = g[0];
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g0);
            }
        }
        Mean(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                let gi = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += gi);
            }
        }
        Index(a, i) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga[*i] += g[0];
            }
        }
        Reshape(a) => elementwise::acc(nodes, grads, *a, g, |_, gi| gi),
        Concat(parts, axis) => reduce::concat_backward(nodes, grads, parts, *axis, g),
        ChannelMean(a) => reduce::channel_mean_backward(nodes, grads, *a, g),
        WeightedGroupSum(a, w) => reduce::weighted_group_sum_backward(nodes, grads, *a, w, g),
        ChannelMix(w, x) => linear::channel_mix_backward(nodes, grads, *w, *x, g),
        AddBias(x, b) => linear::add_bias_backward(nodes, grads, *x, *b, g),
        ChannelNorm {
            x,
            gain,
            bias,
            mean,
            inv_std,
        } => linear::channel_norm_backward(nodes, grads, [*x, *gain, *bias], mean, inv_std, g),
        Conv { x, w, stride, pad } => linear::conv_backward(nodes, grads, *x, *w, *stride, *pad, g),
        Upsample2x(a) => spatial::upsample_backward(nodes, grads, *a, g),
        GridSample(vol, pts) => spatial::grid_sample_backward(nodes, grads, *vol, *pts, g),
        ForwardDiff(a, axis) => spatial::forward_diff_backward(nodes, grads, *a, *axis, g),
        AffinePoints(m, p) => spatial::affine_points_backward(nodes, grads, *m, *p, g),
        Jacobian(a, jac) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                let n = ga.len();
                for (r, gr) in g.iter().enumerate() {
                    for c in 0..n {
                        ga[c] += jac[r * n + c] * gr;
                    }
                }
            }
        }
    }
}
