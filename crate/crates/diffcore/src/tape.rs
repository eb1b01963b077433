//! The tape: an append-only list of tensors, each remembering the operation
//! that produced it. Forward methods push new nodes; [`Tape::backward`] walks
//! the list in reverse and accumulates gradients into the leaves.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DiffError, Result};

pub type Array = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
        cols: Array2<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: Var,
        mask: Array,
    },
    GlobalAvgPool(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    MeanAxis {
        input: Var,
        axis: usize,
    },
}

/// A node of the differentiation graph.
#[derive(Debug)]
pub struct DiffTensor {
    pub(crate) value: Array,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Array>,
    pub(crate) op: Op,
}

impl DiffTensor {
    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient slot, filled for leaves after [`Tape::backward`].
    pub fn grad(&self) -> Option<&Array> {
        self.grad.as_ref()
    }
}

/// Gradients of every leaf that was created with `requires_grad = true`.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<Var, Array>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.map.get(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.map.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Array)> {
        self.map.iter()
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.map.remove(&v)
    }
}

pub struct Tape {
    pub(crate) nodes: Vec<DiffTensor>,
    pub(crate) mode: Mode,
    pub(crate) rng: ChaCha8Rng,
    backward_done: bool,
    kink_signature: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl Tape {
    /// `seed` drives dropout masks; eval mode never draws from it.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            backward_done: false,
            kink_signature: FNV_OFFSET,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf tensor.
    pub fn input(&mut self, value: Array, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(DiffTensor {
            value: value.as_standard_layout().into_owned(),
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(id)
    }

    /// Adds a constant leaf (never receives a gradient).
    pub fn constant(&mut self, value: Array) -> Var {
        self.input(value, false)
    }

    pub fn node(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        *self.nodes[v.0]
            .value
            .iter()
            .next()
            .expect("scalar() on an empty tensor")
    }

    /// Hash of every ReLU activation pattern recorded so far. Two forward
    /// passes with equal signatures lie on the same linear piece of every
    /// ReLU, which is what finite-difference checks need.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub(crate) fn record_kinks(&mut self, x: &Array) {
        let mut h = self.kink_signature;
        for &v in x.iter() {
            h ^= (v > 0.0) as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.kink_signature = h;
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Array, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(DiffTensor {
            value: value.as_standard_layout().into_owned(),
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(id))
    }

    /// Reverse pass from a single-element `loss` node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(DiffError::DoubleBackward);
        }
        if matches!(self.nodes[loss.0].op, Op::Leaf) {
            return Err(DiffError::BackwardBeforeForward);
        }
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(DiffError::NotScalar(out.shape().to_vec()));
        }

        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::ones(out.raw_dim()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        self.backward_done = true;

        let mut map = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| Array::zeros(node.value.raw_dim()));
                map.insert(Var(i), g);
            }
        }
        Ok(Gradients { map })
    }

    fn propagate(&mut self, i: usize, g: Array, grads: &mut [Option<Array>]) -> Result<()> {
        if matches!(self.nodes[i].op, Op::Leaf) {
            self.nodes[i].grad = Some(g);
            return Ok(());
        }
        let nodes = &self.nodes;
        let val = |v: &Var| &nodes[v.0].value;
        let mut acc = |v: Var, gv: Array| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => *e += &gv,
                slot @ None => *slot = Some(gv),
            }
        };

        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled above"),
            Op::Add(a, b) => {
                acc(*a, sum_to_shape(g.clone(), val(a).shape()));
                acc(*b, sum_to_shape(g, val(b).shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, sum_to_shape(g.clone(), val(a).shape()));
                acc(*b, -sum_to_shape(g, val(b).shape()));
            }
            Op::Mul(a, b) => {
                let ga = &g * val(b);
                let gb = &g * val(a);
                acc(*a, sum_to_shape(ga, val(a).shape()));
                acc(*b, sum_to_shape(gb, val(b).shape()));
            }
            Op::AddScalar(a) => acc(*a, g),
            Op::MulScalar(a, c) => acc(*a, g * *c),
            Op::PowScalar(a, p) => {
                let p = *p;
                let mut d = val(a).mapv(|x| {
                    if x == 0.0 {
                        // derivative of x^p at 0: 1 for p = 1, 0 for p > 1; p < 1 is singular and zeroed
                        if p == 1.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        p * x.powf(p - 1.0)
                    }
                });
                d *= &g;
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &nodes[i].value),
            Op::Log(a) => acc(*a, g / val(a)),
            Op::Relu(a) => {
                let mut d = g;
                d.zip_mut_with(val(a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(val(a), val(b), &g);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
                cols,
            } => {
                let (gi, gw) = crate::ops::conv2d_backward(
                    val(input).shape(),
                    val(weight),
                    cols,
                    *stride,
                    *padding,
                    &g,
                );
                acc(*input, gi);
                acc(*weight, gw);
            }
            Op::Softmax(a) => {
                let y = &nodes[i].value;
                let d = crate::ops::softmax_backward(y, &g);
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &nodes[i].value;
                let d = crate::ops::log_softmax_backward(y, &g);
                acc(*a, d);
            }
            Op::LayerNorm { input, inv_std } => {
                let y = &nodes[i].value;
                let d = crate::ops::layer_norm_backward(y, inv_std, &g);
                acc(*input, d);
            }
            Op::Dropout { input, mask } => acc(*input, g * mask),
            Op::GlobalAvgPool(a) => {
                let s = val(a).shape();
                let hw = (s[2] * s[3]) as f64;
                let expanded = g
                    .insert_axis(Axis(2))
                    .insert_axis(Axis(3))
                    .broadcast(IxDyn(s))
                    .expect("gap broadcast")
                    .mapv(|x| x / hw);
                acc(*a, expanded);
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for v in inputs {
                    let len = val(v).shape()[*axis];
                    let part = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    acc(*v, part);
                    start += len;
                }
            }
            Op::Reshape(a) => {
                let shape = val(a).shape().to_vec();
                let r = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("reshape backward");
                acc(*a, r);
            }
            Op::Permute { input, axes } => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                let r = g.permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned();
                acc(*input, r);
            }
            Op::Embedding { table, indices } => {
                let mut gt = Array::zeros(val(table).raw_dim());
                let g2 = g
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("embedding grad is 2-d");
                for (row, &ix) in indices.iter().enumerate() {
                    let mut dst = gt.index_axis_mut(Axis(0), ix);
                    dst += &g2.row(row);
                }
                acc(*table, gt);
            }
            Op::Sum(a) => {
                let s = *g.iter().next().unwrap();
                acc(*a, Array::from_elem(val(a).raw_dim(), s));
            }
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                let s = *g.iter().next().unwrap() / n;
                acc(*a, Array::from_elem(val(a).raw_dim(), s));
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let s = val(input).shape().to_vec();
                let scale = if matches!(nodes[i].op, Op::MeanAxis { .. }) {
                    1.0 / s[*axis] as f64
                } else {
                    1.0
                };
                let expanded = g
                    .insert_axis(Axis(*axis))
                    .broadcast(IxDyn(&s))
                    .expect("axis broadcast")
                    .mapv(|x| x * scale);
                acc(*input, expanded);
            }
        }
        Ok(())
    }
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn sum_to_shape(mut g: Array, shape: &[usize]) -> Array {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn matmul_backward(a: &Array, b: &Array, g: &Array) -> (Array, Array) {
    if a.ndim() == 2 {
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let ga = g2.dot(&b2.t()).into_dyn();
        let gb = a2.t().dot(&g2).into_dyn();
        (ga, gb)
    } else {
        let mut ga = Array::zeros(a.raw_dim());
        let mut gb = Array::zeros(b.raw_dim());
        for k in 0..a.shape()[0] {
            let a2 = a.index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
            let b2 = b.index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
            let g2 = g.index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
            ga.index_axis_mut(Axis(0), k).assign(&g2.dot(&b2.t()));
            gb.index_axis_mut(Axis(0), k).assign(&a2.t().dot(&g2));
        }
        (ga, gb)
    }
}
