//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every op applied to tracked [`Var`]s. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Tape::backward`] walks it once in reverse. Trainable weights
//! live in a [`ParamStore`] outside the tape; a tape is built per optimizer
//! step and dropped afterwards.
//!
//! Every op checks that its output is finite and fails with
//! [`Error::NonFinite`] otherwise.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value produced on a tape.
#[derive(Clone)]
pub struct Var<T> {
    node: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Whether gradients can flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    value: Arc<Tensor<T>>,
    grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }
}

/// Named trainable weights with their gradient accumulators.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Mutable weights; copies on write if a live tape still shares them.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    /// Mutable weights and gradient of the same parameter.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        let p = &mut self.params[id.0];
        (Arc::make_mut(&mut p.value), &mut p.grad)
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = Arc::new(value);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Tanh,
    Atan,
    LeakyRelu(f64),
    Abs,
    Neg,
    /// Multiplication by a constant.
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

type Saved<T> = Arc<Tensor<T>>;
type In = Option<usize>;

enum Op<T> {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul { a: In, b: In, av: Saved<T>, bv: Saved<T> },
    AddBias { x: In, b: In },
    Conv2d { x: In, k: In, b: In, xv: Saved<T>, kv: Saved<T>, geom: ConvGeometry },
    Unary { x: In, kind: Unary, saved: Option<Saved<T>> },
    Binary { a: In, b: In, kind: Binary, av: Saved<T>, bv: Saved<T> },
    Reduce { x: In, kind: Reduce, shape: Vec<usize> },
    Reshape { x: In, shape: Vec<usize> },
    Concat { a: In, b: In, axis: usize, a_shape: Vec<usize>, b_shape: Vec<usize> },
    Narrow { x: In, axis: usize, start: usize, shape: Vec<usize> },
    Permute { x: In, axis: usize, inverse: Vec<usize> },
    SpaceToDepth { x: In, r: usize, shape: Vec<usize> },
    DepthToSpace { x: In, r: usize, shape: Vec<usize> },
    AvgPool { x: In, r: usize, shape: Vec<usize> },
    Upsample { x: In, r: usize, shape: Vec<usize> },
    Mmd { a: In, b: In, av: Saved<T>, bv: Saved<T>, scales: Vec<f64> },
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Gradients of leaf values produced by [`Tape::backward`].
pub struct Grads<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    /// Gradient with respect to a leaf created by [`Tape::leaf`]. Leaves the
    /// loss does not depend on have no entry.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|n| self.leaves.get(&n))
    }
}

pub struct Tape<T> {
    recording: bool,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<(u64, ParamId), usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<T: Real>(op: &str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A tape that records nothing; intermediates are freed as soon as their
    /// `Var`s drop.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var<T> {
        let shape = value.shape().to_vec();
        self.nodes.push(Node { op, shape });
        Var {
            node: Some(self.nodes.len() - 1),
            value: Arc::new(value),
        }
    }

    fn record(&mut self, inputs: &[In], op: impl FnOnce() -> Op<T>, value: Tensor<T>) -> Var<T> {
        if self.recording && inputs.iter().any(Option::is_some) {
            self.push(op(), value)
        } else {
            Var {
                node: None,
                value: Arc::new(value),
            }
        }
    }

    /// Input whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var<T> {
        if self.recording {
            self.push(Op::Leaf, value)
        } else {
            self.constant(value)
        }
    }

    /// Value that blocks gradient flow.
    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        Var {
            node: None,
            value: Arc::new(value),
        }
    }

    /// The current weights of a parameter. Repeated calls on one tape share
    /// a node, so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        let value = store.params[id.0].value.clone();
        if !self.recording {
            return Var { node: None, value };
        }
        let key = (store.uid, id);
        if let Some(&node) = self.param_nodes.get(&key) {
            return Var {
                node: Some(node),
                value,
            };
        }
        self.nodes.push(Node {
            op: Op::Param { store: store.uid, id },
            shape: value.shape().to_vec(),
        });
        let node = self.nodes.len() - 1;
        self.param_nodes.insert(key, node);
        Var {
            node: Some(node),
            value,
        }
    }

    /// `[m×n]·[n×p]`.
    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * p];
        T::gemm(
            m,
            n,
            p,
            T::one(),
            a.value.data(),
            (n as isize, 1),
            b.value.data(),
            (p as isize, 1),
            T::zero(),
            &mut out,
            (p as isize, 1),
        );
        let out = finite("matmul", Tensor::new([m, p], out)?)?;
        Ok(self.record(
            &[a.node, b.node],
            || Op::MatMul {
                a: a.node,
                b: b.node,
                av: a.value.clone(),
                bv: b.value.clone(),
            },
            out,
        ))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (sx, sb) = (x.shape(), b.shape());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let mut out = x.value.as_ref().clone();
        let n = sb[0];
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                for (v, &bv) in row.iter_mut().zip(b.value.data()) {
                    *v += bv;
                }
            }
        }
        let out = finite("add_bias", out)?;
        Ok(self.record(&[x.node, b.node], || Op::AddBias { x: x.node, b: b.node }, out))
    }

    /// Cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]` plus a per-filter bias.
    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        kernel: &Var<T>,
        bias: &Var<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        let geom = ConvGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
        if bias.shape() != [geom.filters] {
            return Err(Error::shape("conv2d bias", kernel.shape(), bias.shape()));
        }
        let out = kernels::conv2d_forward(&geom, x.value.data(), kernel.value.data(), bias.value.data());
        let out = finite("conv2d", Tensor::new(geom.output_shape(), out)?)?;
        Ok(self.record(
            &[x.node, kernel.node, bias.node],
            || Op::Conv2d {
                x: x.node,
                k: kernel.node,
                b: bias.node,
                xv: x.value.clone(),
                kv: kernel.value.clone(),
                geom,
            },
            out,
        ))
    }

    pub fn unary(&mut self, kind: Unary, x: &Var<T>) -> Result<Var<T>> {
        let v = &x.value;
        let out = match kind {
            Unary::Exp => v.map(T::exp),
            Unary::Tanh => v.map(T::tanh),
            Unary::Atan => v.map(T::atan),
            Unary::LeakyRelu(slope) => {
                let s = T::lit(slope);
                v.map(|a| if a > T::zero() { a } else { a * s })
            }
            Unary::Abs => v.map(T::abs),
            Unary::Neg => v.map(|a| -a),
            Unary::Scale(c) => {
                let c = T::lit(c);
                v.map(|a| a * c)
            }
        };
        let name = match kind {
            Unary::Exp => "exp",
            Unary::Tanh => "tanh",
            Unary::Atan => "atan",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Abs => "abs",
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
        };
        if let Unary::LeakyRelu(slope) = kind {
            if slope < 0.0 {
                return Err(Error::Config(format!("leaky_relu slope {slope} must be non-negative")));
            }
        }
        let out = Arc::new(finite(name, out)?);
        let saved = match kind {
            Unary::Exp | Unary::Tanh | Unary::LeakyRelu(_) => Some(out.clone()),
            Unary::Atan | Unary::Abs => Some(x.value.clone()),
            Unary::Neg | Unary::Scale(_) => None,
        };
        if self.recording && x.node.is_some() {
            self.nodes.push(Node {
                op: Op::Unary { x: x.node, kind, saved },
                shape: out.shape().to_vec(),
            });
            Ok(Var {
                node: Some(self.nodes.len() - 1),
                value: out,
            })
        } else {
            Ok(Var { node: None, value: out })
        }
    }

    pub fn exp(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Unary::Exp, x)
    }

    pub fn tanh(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Unary::Tanh, x)
    }

    pub fn atan(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Unary::Atan, x)
    }

    pub fn leaky_relu(&mut self, x: &Var<T>, slope: f64) -> Result<Var<T>> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Unary::LeakyRelu(0.0), x)
    }

    pub fn abs(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Unary::Abs, x)
    }

    pub fn neg(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: &Var<T>, c: f64) -> Result<Var<T>> {
        self.unary(Unary::Scale(c), x)
    }

    /// Pointwise op on equal shapes; a rank-0 operand broadcasts.
    pub fn binary(&mut self, kind: Binary, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (va, vb) = (&a.value, &b.value);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, f)
        } else if vb.is_scalar() {
            let s = vb.item();
            va.map(|x| f(x, s))
        } else if va.is_scalar() {
            let s = va.item();
            vb.map(|y| f(s, y))
        } else {
            return Err(Error::shape("binary", va.shape(), vb.shape()));
        };
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let out = finite(name, out)?;
        Ok(self.record(
            &[a.node, b.node],
            || Op::Binary {
                a: a.node,
                b: b.node,
                kind,
                av: a.value.clone(),
                bv: b.value.clone(),
            },
            out,
        ))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn reduce(&mut self, kind: Reduce, x: &Var<T>) -> Result<Var<T>> {
        let n = x.value.numel();
        if n == 0 {
            return Err(Error::Domain(format!("reduction over empty tensor {:?}", x.shape())));
        }
        let sum = x.value.sum();
        let out = match kind {
            Reduce::Sum => sum,
            Reduce::Mean => sum / T::from_usize(n).unwrap(),
        };
        let out = finite("reduce", Tensor::scalar(out))?;
        Ok(self.record(
            &[x.node],
            || Op::Reduce {
                x: x.node,
                kind,
                shape: x.shape().to_vec(),
            },
            out,
        ))
    }

    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.reduce(Reduce::Sum, x)
    }

    pub fn mean(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.reduce(Reduce::Mean, x)
    }

    pub fn reshape(&mut self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.value.as_ref().clone().reshaped(shape)?;
        Ok(self.record(
            &[x.node],
            || Op::Reshape {
                x: x.node,
                shape: x.shape().to_vec(),
            },
            out,
        ))
    }

    pub fn concat(&mut self, a: &Var<T>, b: &Var<T>, axis: usize) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", sa, sb));
        }
        let (outer, _, inner) = kernels::axis_blocks(sa, axis);
        let data = kernels::concat_axis(a.value.data(), sa[axis], b.value.data(), sb[axis], outer, inner);
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let out = Tensor::new(shape, data)?;
        Ok(self.record(
            &[a.node, b.node],
            || Op::Concat {
                a: a.node,
                b: b.node,
                axis,
                a_shape: sa.to_vec(),
                b_shape: sb.to_vec(),
            },
            out,
        ))
    }

    /// Splits along `axis` into `[..at)` and `[at..)`.
    pub fn split(&mut self, x: &Var<T>, axis: usize, at: usize) -> Result<(Var<T>, Var<T>)> {
        let shape = x.shape();
        if axis >= shape.len() || at > shape[axis] {
            return Err(Error::Contract(format!(
                "split index {at} on axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (head, tail) = kernels::split_axis(x.value.data(), shape, axis, at);
        let mut head_shape = shape.to_vec();
        head_shape[axis] = at;
        let mut tail_shape = shape.to_vec();
        tail_shape[axis] -= at;
        let head = self.record(
            &[x.node],
            || Op::Narrow {
                x: x.node,
                axis,
                start: 0,
                shape: shape.to_vec(),
            },
            Tensor::new(head_shape, head)?,
        );
        let tail = self.record(
            &[x.node],
            || Op::Narrow {
                x: x.node,
                axis,
                start: at,
                shape: shape.to_vec(),
            },
            Tensor::new(tail_shape, tail)?,
        );
        Ok((head, tail))
    }

    /// `out[.., k, ..] = x[.., perm[k], ..]` along `axis`.
    pub fn permute_axis(&mut self, x: &Var<T>, axis: usize, perm: &[usize]) -> Result<Var<T>> {
        let shape = x.shape();
        if axis >= shape.len() || perm.len() != shape[axis] {
            return Err(Error::Contract(format!(
                "permutation of length {} does not fit axis {axis} of {shape:?}",
                perm.len()
            )));
        }
        let mut inverse = vec![usize::MAX; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            if p >= perm.len() || inverse[p] != usize::MAX {
                return Err(Error::Contract(format!("{perm:?} is not a permutation")));
            }
            inverse[p] = k;
        }
        let out = Tensor::new(shape, kernels::permute_axis(x.value.data(), shape, axis, perm))?;
        Ok(self.record(&[x.node], || Op::Permute { x: x.node, axis, inverse }, out))
    }

    fn check_image(op: &str, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::Contract(format!("{op} expects [N,C,H,W], got {shape:?}")));
        }
        Ok(())
    }

    pub fn space_to_depth(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let shape = x.shape();
        Self::check_image("space_to_depth", shape)?;
        if r == 0 || shape[2] % r != 0 || shape[3] % r != 0 {
            return Err(Error::Config(format!(
                "space_to_depth factor {r} does not divide spatial extents of {shape:?}"
            )));
        }
        let out_shape = [shape[0], shape[1] * r * r, shape[2] / r, shape[3] / r];
        let out = Tensor::new(out_shape, kernels::space_to_depth(x.value.data(), shape, r))?;
        Ok(self.record(
            &[x.node],
            || Op::SpaceToDepth {
                x: x.node,
                r,
                shape: out_shape.to_vec(),
            },
            out,
        ))
    }

    pub fn depth_to_space(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let shape = x.shape();
        Self::check_image("depth_to_space", shape)?;
        if r == 0 || shape[1] % (r * r) != 0 {
            return Err(Error::Config(format!(
                "depth_to_space factor {r} does not divide channels of {shape:?}"
            )));
        }
        let out_shape = [shape[0], shape[1] / (r * r), shape[2] * r, shape[3] * r];
        let out = Tensor::new(out_shape, kernels::depth_to_space(x.value.data(), shape, r))?;
        Ok(self.record(
            &[x.node],
            || Op::DepthToSpace {
                x: x.node,
                r,
                shape: out_shape.to_vec(),
            },
            out,
        ))
    }

    pub fn avg_pool(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let shape = x.shape();
        Self::check_image("avg_pool", shape)?;
        if r == 0 || shape[2] % r != 0 || shape[3] % r != 0 {
            return Err(Error::Config(format!("pool factor {r} does not divide {shape:?}")));
        }
        let out_shape = [shape[0], shape[1], shape[2] / r, shape[3] / r];
        let out = Tensor::new(out_shape, kernels::avg_pool(x.value.data(), shape, r))?;
        Ok(self.record(
            &[x.node],
            || Op::AvgPool {
                x: x.node,
                r,
                shape: shape.to_vec(),
            },
            out,
        ))
    }

    pub fn upsample_nearest(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let shape = x.shape();
        Self::check_image("upsample_nearest", shape)?;
        if r == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        let out_shape = [shape[0], shape[1], shape[2] * r, shape[3] * r];
        let out = Tensor::new(out_shape, kernels::upsample_nearest(x.value.data(), shape, r))?;
        Ok(self.record(
            &[x.node],
            || Op::Upsample {
                x: x.node,
                r,
                shape: shape.to_vec(),
            },
            out,
        ))
    }

    /// Squared maximum mean discrepancy between the rows of `a` and `b`
    /// under a sum of inverse multiquadratic kernels; see
    /// [`crate::losses::mmd2`].
    pub fn mmd2(&mut self, a: &Var<T>, b: &Var<T>, scales: &[f64]) -> Result<Var<T>> {
        let value = crate::losses::mmd2(a.value(), b.value(), scales)?;
        let out = finite("mmd2", Tensor::scalar(value))?;
        Ok(self.record(
            &[a.node, b.node],
            || Op::Mmd {
                a: a.node,
                b: b.node,
                av: a.value.clone(),
                bv: b.value.clone(),
                scales: scales.to_vec(),
            },
            out,
        ))
    }

    /// Back-propagates from a scalar `loss`. Parameter gradients are added
    /// into `store`'s accumulators; gradients of [`Tape::leaf`] inputs are
    /// returned.
    pub fn backward(&self, loss: &Var<T>, store: &mut ParamStore<T>) -> Result<Grads<T>> {
        self.backward_stores(loss, &mut [store])
    }

    /// As [`Tape::backward`], for losses that touch several stores.
    pub fn backward_stores(&self, loss: &Var<T>, stores: &mut [&mut ParamStore<T>]) -> Result<Grads<T>> {
        if !loss.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss.node.ok_or_else(|| {
            Error::Contract("loss is not connected to any tracked value on this tape".into())
        })?;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::scalar(T::one()));
        let mut leaves = HashMap::new();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            debug_assert_eq!(g.shape(), node.shape.as_slice());
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::Param { store, id } => {
                    if let Some(s) = stores.iter_mut().find(|s| s.uid == *store) {
                        s.grad_mut(*id).add_assign(&g);
                    }
                }
                op => backward_op(op, g, &mut grads)?,
            }
        }
        Ok(Grads { leaves })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], target: In, g: Tensor<T>) {
    if let Some(i) = target {
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn backward_op<T: Real>(op: &Op<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
    match op {
        Op::Leaf | Op::Param { .. } => unreachable!("handled by caller"),
        Op::MatMul { a, b, av, bv } => {
            let (m, n, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if a.is_some() {
                // dA = dC·Bᵀ
                let mut da = vec![T::zero(); m * n];
                T::gemm(m, p, n, T::one(), g.data(), (p as isize, 1), bv.data(), (1, p as isize), T::zero(), &mut da, (n as isize, 1));
                accumulate(grads, *a, Tensor::new([m, n], da)?);
            }
            if b.is_some() {
                // dB = Aᵀ·dC
                let mut db = vec![T::zero(); n * p];
                T::gemm(n, m, p, T::one(), av.data(), (1, n as isize), g.data(), (p as isize, 1), T::zero(), &mut db, (p as isize, 1));
                accumulate(grads, *b, Tensor::new([n, p], db)?);
            }
        }
        Op::AddBias { x, b } => {
            if b.is_some() {
                let n = *g.shape().last().unwrap();
                let mut db = vec![T::zero(); n];
                if n > 0 {
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                accumulate(grads, *b, Tensor::new([n], db)?);
            }
            accumulate(grads, *x, g);
        }
        Op::Conv2d { x, k, b, xv, kv, geom } => {
            let (dx, dk, db) = kernels::conv2d_backward(geom, xv.data(), kv.data(), g.data());
            accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            accumulate(grads, *k, Tensor::new(kv.shape(), dk)?);
            accumulate(grads, *b, Tensor::new([geom.filters], db)?);
        }
        Op::Unary { x, kind, saved } => {
            let dx = match (kind, saved) {
                (Unary::Exp, Some(out)) => g.zip_map(out, |g, y| g * y),
                (Unary::Tanh, Some(out)) => g.zip_map(out, |g, y| g * (T::one() - y * y)),
                (Unary::Atan, Some(inp)) => g.zip_map(inp, |g, x| g / (T::one() + x * x)),
                (Unary::LeakyRelu(slope), Some(out)) => {
                    let s = T::lit(*slope);
                    g.zip_map(out, |g, y| if y > T::zero() { g } else { g * s })
                }
                (Unary::Abs, Some(inp)) => g.zip_map(inp, |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
                (Unary::Neg, _) => g.map(|g| -g),
                (Unary::Scale(c), _) => {
                    let c = T::lit(*c);
                    g.map(|g| g * c)
                }
                _ => unreachable!("unary op saved the wrong activation"),
            };
            accumulate(grads, *x, dx);
        }
        Op::Binary { a, b, kind, av, bv } => {
            let route = |grad: Tensor<T>, shape: &[usize]| -> Tensor<T> {
                if grad.shape() == shape {
                    grad
                } else {
                    Tensor::scalar(grad.sum())
                }
            };
            let (ga, gb) = match kind {
                Binary::Add => (g.clone(), g),
                Binary::Sub => (g.clone(), g.map(|v| -v)),
                Binary::Mul => {
                    // `other` is either output-shaped or a broadcast scalar.
                    let scaled = |other: &Tensor<T>| {
                        if g.shape() == other.shape() {
                            g.zip_map(other, |v, o| v * o)
                        } else {
                            let s = other.item();
                            g.map(|v| v * s)
                        }
                    };
                    (scaled(bv), scaled(av))
                }
            };
            if a.is_some() {
                accumulate(grads, *a, route(ga, av.shape()));
            }
            if b.is_some() {
                accumulate(grads, *b, route(gb, bv.shape()));
            }
        }
        Op::Reduce { x, kind, shape } => {
            let n = shape.iter().product::<usize>();
            let v = match kind {
                Reduce::Sum => g.item(),
                Reduce::Mean => g.item() / T::from_usize(n).unwrap(),
            };
            accumulate(grads, *x, Tensor::full(shape.clone(), v));
        }
        Op::Reshape { x, shape } => accumulate(grads, *x, g.reshaped(shape.clone())?),
        Op::Concat { a, b, axis, a_shape, b_shape } => {
            let (ha, hb) = kernels::split_axis(g.data(), g.shape(), *axis, a_shape[*axis]);
            accumulate(grads, *a, Tensor::new(a_shape.clone(), ha)?);
            accumulate(grads, *b, Tensor::new(b_shape.clone(), hb)?);
        }
        Op::Narrow { x, axis, start, shape } => {
            let (outer, _, inner) = kernels::axis_blocks(shape, *axis);
            let zeros = |extent: usize| vec![T::zero(); outer * extent * inner];
            let len = g.shape()[*axis];
            let full = if *start == 0 {
                let rest = shape[*axis] - len;
                kernels::concat_axis(g.data(), len, &zeros(rest), rest, outer, inner)
            } else {
                kernels::concat_axis(&zeros(*start), *start, g.data(), len, outer, inner)
            };
            accumulate(grads, *x, Tensor::new(shape.clone(), full)?);
        }
        Op::Permute { x, axis, inverse } => {
            let dx = kernels::permute_axis(g.data(), g.shape(), *axis, inverse);
            accumulate(grads, *x, Tensor::new(g.shape(), dx)?);
        }
        Op::SpaceToDepth { x, r, shape } => {
            let dx = kernels::depth_to_space(g.data(), shape, *r);
            let in_shape = [shape[0], shape[1] / (r * r), shape[2] * r, shape[3] * r];
            accumulate(grads, *x, Tensor::new(in_shape, dx)?);
        }
        Op::DepthToSpace { x, r, shape } => {
            let dx = kernels::space_to_depth(g.data(), shape, *r);
            let in_shape = [shape[0], shape[1] * r * r, shape[2] / r, shape[3] / r];
            accumulate(grads, *x, Tensor::new(in_shape, dx)?);
        }
        Op::AvgPool { x, r, shape } => {
            let dx = kernels::avg_pool_backward(g.data(), shape, *r);
            accumulate(grads, *x, Tensor::new(shape.clone(), dx)?);
        }
        Op::Upsample { x, r, shape } => {
            let dx = kernels::upsample_nearest_backward(g.data(), shape, *r);
            accumulate(grads, *x, Tensor::new(shape.clone(), dx)?);
        }
        Op::Mmd { a, b, av, bv, scales } => {
            let (da, db) = crate::losses::mmd2_grad(av, bv, scales)?;
            let s = g.item();
            if a.is_some() {
                accumulate(grads, *a, da.map(|v| v * s));
            }
            if b.is_some() {
                accumulate(grads, *b, db.map(|v| v * s));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tape.matmul(&eye, &m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(tape.matmul(&row, &col).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([2, 3]));
        let err = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv_of_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([1, 1, 3, 3]));
        let k = tape.leaf(Tensor::ones([1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros([1]));
        let y = tape.conv2d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.value().data()[4], 9.0);
        assert_eq!(y.value().data()[0], 4.0);

        let zk = tape.leaf(Tensor::zeros([2, 1, 3, 3]));
        let zb = tape.leaf(Tensor::zeros([2]));
        let rnd = tape.leaf(Tensor::from_fn([1, 1, 3, 3], |i| i as f64 - 4.0));
        let y = tape.conv2d(&rnd, &zk, &zb, 1, 1).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 4, 4]));
        let k = tape.leaf(Tensor::zeros([1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros([1]));
        assert!(matches!(tape.conv2d(&x, &k, &b, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn elementwise_definitions() {
        let mut tape = Tape::<f64>::new();
        let zero = tape.leaf(Tensor::scalar(0.0));
        assert_eq!(tape.exp(&zero).unwrap().value().item(), 1.0);
        assert_eq!(tape.tanh(&zero).unwrap().value().item(), 0.0);
        let neg = tape.leaf(Tensor::scalar(-1.0));
        assert!((tape.leaky_relu(&neg, 0.1).unwrap().value().item() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn abs_gradient_is_sign() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[2.0, -2.0]));
        let y = tape.abs(&x).unwrap();
        let loss = tape.sum(&y).unwrap();
        let grads = tape.backward(&loss, &mut ParamStore::new()).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(&x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn binary_definitions_and_shape_check() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        assert_eq!(tape.mul(&a, &b).unwrap().value().data(), &[3.0, 8.0]);
        let ones = tape.leaf(Tensor::ones([2]));
        assert_eq!(tape.mul(&a, &ones).unwrap().value().data(), &[1.0, 2.0]);
        let c = tape.leaf(Tensor::zeros([3]));
        assert!(matches!(tape.add(&a, &c), Err(Error::Shape { .. })));
        let s = tape.leaf(Tensor::scalar(10.0));
        assert_eq!(tape.add(&a, &s).unwrap().value().data(), &[11.0, 12.0]);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.mean(&x).unwrap();
        assert_eq!(m.value().item(), 2.0);
        let grads = tape.backward(&m, &mut ParamStore::new()).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0 / 3.0; 3]);

        let z = tape.leaf(Tensor::zeros([4]));
        assert_eq!(tape.sum(&z).unwrap().value().item(), 0.0);
        let empty = tape.leaf(Tensor::zeros([0]));
        assert!(matches!(tape.mean(&empty), Err(Error::Domain(_))));
    }

    #[test]
    fn split_concat_inverse_pair_and_routing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let (a, b) = tape.split(&x, 0, 2).unwrap();
        assert_eq!(a.value().data(), &[1.0, 2.0]);
        assert_eq!(b.value().data(), &[3.0, 4.0]);
        let y = tape.concat(&a, &b, 0).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        let w = tape.leaf(t(&[4], &[10.0, 20.0, 30.0, 40.0]));
        let prod = tape.mul(&y, &w).unwrap();
        let loss = tape.sum(&prod).unwrap();
        let grads = tape.backward(&loss, &mut ParamStore::new()).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2]));
        let y = tape.exp(&x).unwrap();
        assert!(matches!(tape.backward(&y, &mut ParamStore::new()), Err(Error::Contract(_))));
    }

    #[test]
    fn param_gradients_accumulate_across_uses_and_calls() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        for expected in [1.0, 2.0] {
            let mut tape = Tape::new();
            let p = tape.param(&store, w);
            let loss = tape.sum(&p).unwrap();
            tape.backward(&loss, &mut store).unwrap();
            assert_eq!(store.get(w).grad().data(), &[expected; 3]);
        }
        store.zero_grad();
        let mut tape = Tape::new();
        let p1 = tape.param(&store, w);
        let p2 = tape.param(&store, w);
        let s = tape.add(&p1, &p2).unwrap();
        let loss = tape.sum(&s).unwrap();
        tape.backward(&loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad().data(), &[2.0; 3]);
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let target = t(&[3], &[0.5, -1.0, 2.0]);
        let w = store.add("w", target.clone()).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, w);
        let tv = tape.constant(target);
        let d = tape.sub(&p, &tv).unwrap();
        let sq = tape.mul(&d, &d).unwrap();
        let loss = tape.mean(&sq).unwrap();
        tape.backward(&loss, &mut store).unwrap();
        assert!(store.get(w).grad().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.leaf(Tensor::ones([2]));
        let y = tape.exp(&x).unwrap();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros([1])).unwrap();
        assert!(store.add("a", Tensor::zeros([1])).is_err());
    }
}
