//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in insertion
//! order. [`Tape::backward`] replays the record in reverse, visiting each
//! node once, and stores one gradient per node that requires it.

use std::cell::{Cell, Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::array::Tensor;
use super::kernels::{self, ConvDims, Window};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Identifier of a node on its tape.
pub type NodeId = usize;

#[derive(Clone, Copy, Debug)]
struct ConvAttrs {
    dims: ConvDims,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Conv2d(NodeId, NodeId, NodeId, ConvAttrs),
    ConvTranspose2d(NodeId, NodeId, NodeId, ConvAttrs),
    MaxPool2d(NodeId, Vec<usize>),
    Relu(NodeId),
    Sigmoid(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    SqDist(NodeId, NodeId),
    LogSoftmax(NodeId),
    SelectRows(NodeId, Vec<usize>),
    Pick(NodeId, Vec<usize>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Conv2d(..) => "conv2d",
            Op::ConvTranspose2d(..) => "conv_transpose2d",
            Op::MaxPool2d(..) => "max_pool2d",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::SqDist(..) => "sq_dist",
            Op::LogSoftmax(..) => "log_softmax",
            Op::SelectRows(..) => "select_rows",
            Op::Pick(..) => "pick",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Tensor<T>>>>>,
    nan_guard: Cell<bool>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(tape={}, id={})", self.tape.id, self.id)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            nan_guard: Cell::new(true),
        }
    }

    /// Enables or disables the non-finite operand check (on by default).
    pub fn set_nan_guard(&self, on: bool) {
        self.nan_guard.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor that gradients flow into.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, true, Op::Leaf)
    }

    /// Registers a tensor that never accumulates a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn guard(&self, op: &'static str, ids: &[NodeId]) -> Result<()> {
        if !self.nan_guard.get() {
            return Ok(());
        }
        let nodes = self.nodes.borrow();
        if ids.iter().any(|&i| !nodes[i].value.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, operands: &[NodeId]) -> Var<'_, T> {
        let rg = self.requires(operands);
        self.push(value, rg, if rg { op } else { Op::Leaf })
    }

    fn owns(&self, v: &Var<'_, T>) -> bool {
        std::ptr::eq(v.tape, self)
    }

    /// Back-propagates from a one-element `root`, storing gradients for every
    /// reachable node that requires them.
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        if !self.owns(&root) {
            return Err(Error::DetachedRoot);
        }
        if self.grads.borrow().is_some() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        if root_node.requires_grad {
            grads[root.id] = Some(Tensor::full(root_node.value.shape().to_vec(), T::one()));
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Drops stored gradients so that `backward` may run again.
    pub fn clear_grads(&self) {
        *self.grads.borrow_mut() = None;
    }

    pub fn has_grads(&self) -> bool {
        self.grads.borrow().is_some()
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        if !self.owns(&v) {
            return None;
        }
        self.grads.borrow().as_ref()?.get(v.id)?.clone()
    }

    /// Like [`Tape::grad`] but a zero tensor for unreachable nodes.
    pub fn grad_or_zero(&self, v: Var<'_, T>) -> Tensor<T> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: NodeId, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts_unchecked(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: NodeId, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = &nodes[id];
    let val = |i: NodeId| &nodes[i].value;
    let rg = |i: NodeId| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(grads, nodes, *a, zip_map(g, val(*b), |x, y| x * y));
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, zip_map(g, val(*a), |x, y| x * y));
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(grads, nodes, *a, g.map(|v| v * s));
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if rg(*a) {
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g.data(), (n as isize, 1), bv.data(), (1, n as isize), T::zero(), &mut ga, (k as isize, 1));
                accumulate(grads, nodes, *a, Tensor::from_parts_unchecked(vec![m, k], ga));
            }
            if rg(*b) {
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), av.data(), (1, k as isize), g.data(), (n as isize, 1), T::zero(), &mut gb, (n as isize, 1));
                accumulate(grads, nodes, *b, Tensor::from_parts_unchecked(vec![k, n], gb));
            }
        }
        Op::AddRowBias(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if rg(*b) {
                let n = val(*b).numel();
                let mut gb = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                }
                accumulate(grads, nodes, *b, Tensor::from_parts_unchecked(val(*b).shape().to_vec(), gb));
            }
        }
        Op::Conv2d(x, w, b, attrs) | Op::ConvTranspose2d(x, w, b, attrs) => {
            let transposed = matches!(node.op, Op::ConvTranspose2d(..));
            let (xv, wv) = (val(*x), val(*w));
            let (gx, gw, gb) = if transposed {
                kernels::conv_transpose2d_backward(xv.data(), wv.data(), g.data(), &attrs.dims, rg(*x))
            } else {
                kernels::conv2d_backward(xv.data(), wv.data(), g.data(), &attrs.dims, rg(*x))
            };
            if let Some(gx) = gx {
                accumulate(grads, nodes, *x, Tensor::from_parts_unchecked(xv.shape().to_vec(), gx));
            }
            accumulate(grads, nodes, *w, Tensor::from_parts_unchecked(wv.shape().to_vec(), gw));
            accumulate(grads, nodes, *b, Tensor::from_parts_unchecked(val(*b).shape().to_vec(), gb));
        }
        Op::MaxPool2d(x, arg) => {
            let mut gx = vec![T::zero(); val(*x).numel()];
            for (&i, &v) in arg.iter().zip(g.data()) {
                gx[i] += v;
            }
            accumulate(grads, nodes, *x, Tensor::from_parts_unchecked(val(*x).shape().to_vec(), gx));
        }
        Op::Relu(a) => {
            accumulate(grads, nodes, *a, zip_map(g, val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() }));
        }
        Op::Sigmoid(a) => {
            accumulate(grads, nodes, *a, zip_map(g, &node.value, |gv, y| gv * y * (T::one() - y)));
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(grads, nodes, *a, Tensor::from_parts_unchecked(shape, g.data().to_vec()));
        }
        Op::Sum(a) => {
            let gv = g.data()[0];
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape().to_vec(), gv));
        }
        Op::Mean(a) => {
            let n = T::from_usize(val(*a).numel()).unwrap();
            let gv = g.data()[0] / n;
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape().to_vec(), gv));
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, zip_map(g, &node.value, |gv, y| gv * y)),
        Op::Log(a) => accumulate(grads, nodes, *a, zip_map(g, val(*a), |gv, x| gv / x)),
        Op::Square(a) => accumulate(grads, nodes, *a, zip_map(g, val(*a), |gv, x| gv * (x + x))),
        Op::Sqrt(a) => {
            let half = T::lit(0.5);
            // Subgradient 0 at the origin.
            accumulate(grads, nodes, *a, zip_map(g, &node.value, |gv, y| if y > T::zero() { gv * half / y } else { T::zero() }));
        }
        Op::SqDist(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, e) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[0];
            let two = T::lit(2.0);
            let mut ga = vec![T::zero(); m * e];
            let mut gb = vec![T::zero(); n * e];
            for i in 0..m {
                let ar = &av.data()[i * e..(i + 1) * e];
                for j in 0..n {
                    let gij = g.data()[i * n + j] * two;
                    if gij == T::zero() {
                        continue;
                    }
                    let br = &bv.data()[j * e..(j + 1) * e];
                    for k in 0..e {
                        let d = (ar[k] - br[k]) * gij;
                        ga[i * e + k] += d;
                        gb[j * e + k] -= d;
                    }
                }
            }
            if rg(*a) {
                accumulate(grads, nodes, *a, Tensor::from_parts_unchecked(vec![m, e], ga));
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, Tensor::from_parts_unchecked(vec![n, e], gb));
            }
        }
        Op::LogSoftmax(a) => {
            let last = *node.value.shape().last().unwrap();
            let mut ga = Vec::with_capacity(node.value.numel());
            for (grow, yrow) in g.data().chunks(last).zip(node.value.data().chunks(last)) {
                let gsum: T = grow.iter().copied().sum();
                ga.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * gsum));
            }
            accumulate(grads, nodes, *a, Tensor::from_parts_unchecked(node.value.shape().to_vec(), ga));
        }
        Op::SelectRows(a, idx) => {
            let av = val(*a);
            let inner = av.numel() / av.shape()[0];
            let mut ga = vec![T::zero(); av.numel()];
            for (r, &src) in idx.iter().enumerate() {
                ga[src * inner..(src + 1) * inner]
                    .iter_mut()
                    .zip(&g.data()[r * inner..(r + 1) * inner])
                    .for_each(|(s, &v)| *s += v);
            }
            accumulate(grads, nodes, *a, Tensor::from_parts_unchecked(av.shape().to_vec(), ga));
        }
        Op::Pick(a, idx) => {
            let av = val(*a);
            let n = av.shape()[1];
            let mut ga = vec![T::zero(); av.numel()];
            for (r, &c) in idx.iter().enumerate() {
                ga[r * n + c] += g.data()[r];
            }
            accumulate(grads, nodes, *a, Tensor::from_parts_unchecked(av.shape().to_vec(), ga));
        }
    }
}

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Name of the operation that produced this node.
    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op.name()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    /// A constant copy of this node's value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    fn same_tape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{op}: operands live on different tapes")))
        }
    }

    fn elementwise(
        self,
        rhs: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(NodeId, NodeId) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&rhs, name)?;
        self.tape.guard(name, &[self.id, rhs.id])?;
        let out = {
            let (a, b) = (self.value(), rhs.value());
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            zip_map(&a, &b, f)
        };
        Ok(self.tape.record(out, op(self.id, rhs.id), &[self.id, rhs.id]))
    }

    fn unary(self, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.tape.guard(name, &[self.id])?;
        let out = self.value().map(f);
        Ok(self.tape.record(out, op, &[self.id]))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(rhs, "add", |a, b| a + b, Op::Add)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(self, s: T) -> Result<Var<'t, T>> {
        self.unary("scale", |v| v * s, Op::Scale(self.id, s))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Result<Var<'t, T>> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, s: T) -> Result<Var<'t, T>> {
        self.unary("add_scalar", |v| v + s, Op::AddScalar(self.id))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs, "matmul")?;
        self.tape.guard("matmul", &[self.id, rhs.id])?;
        let out = {
            let (a, b) = (self.value(), rhs.value());
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, T::one(), a.data(), (k as isize, 1), b.data(), (n as isize, 1), T::zero(), &mut c, (n as isize, 1));
            Tensor::from_parts_unchecked(vec![m, n], c)
        };
        Ok(self.tape.record(out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias, "add_row_bias")?;
        self.tape.guard("add_row_bias", &[self.id, bias.id])?;
        let out = {
            let (a, b) = (self.value(), bias.value());
            if a.ndim() != 2 || b.ndim() != 1 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("add_row_bias", a.shape(), b.shape()));
            }
            let n = b.numel();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
            }
            Tensor::from_parts_unchecked(a.shape().to_vec(), data)
        };
        Ok(self.tape.record(out, Op::AddRowBias(self.id, bias.id), &[self.id, bias.id]))
    }

    /// 2-D cross-correlation. `self` is `[B, C, H, W]`, `weight` is
    /// `[O, C, kh, kw]`, `bias` is `[O]`; output is `[B, O, Ho, Wo]` with
    /// `Ho = (H + 2*padding - kh) / stride + 1`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        self.same_tape(&weight, "conv2d")?;
        self.same_tape(&bias, "conv2d")?;
        self.tape.guard("conv2d", &[self.id, weight.id, bias.id])?;
        let (out, dims) = {
            let (x, w, b) = (self.value(), weight.value(), bias.value());
            if x.ndim() != 4 || w.ndim() != 4 || w.shape()[1] != x.shape()[1] {
                return Err(Error::shape("conv2d", x.shape(), w.shape()));
            }
            if b.shape() != [w.shape()[0]] {
                return Err(Error::shape("conv2d", w.shape(), b.shape()));
            }
            let win = Window { kernel: (w.shape()[2], w.shape()[3]), stride, padding };
            let (oh, ow) = win
                .out_hw(x.shape()[2], x.shape()[3])
                .ok_or_else(|| Error::invalid_shape("conv2d", x.shape(), "input smaller than kernel"))?;
            let dims = ConvDims {
                batch: x.shape()[0],
                in_c: x.shape()[1],
                in_h: x.shape()[2],
                in_w: x.shape()[3],
                out_c: w.shape()[0],
                out_h: oh,
                out_w: ow,
                win,
            };
            let y = kernels::conv2d_forward(x.data(), w.data(), b.data(), &dims);
            (Tensor::from_parts_unchecked(vec![dims.batch, dims.out_c, oh, ow], y), dims)
        };
        let ids = [self.id, weight.id, bias.id];
        Ok(self.tape.record(out, Op::Conv2d(ids[0], ids[1], ids[2], ConvAttrs { dims }), &ids))
    }

    /// Transposed 2-D convolution. `self` is `[B, C, H, W]`, `weight` is
    /// `[C, O, kh, kw]`; output extent is
    /// `(H - 1) * stride - 2 * padding + kh + output_padding`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&weight, "conv_transpose2d")?;
        self.same_tape(&bias, "conv_transpose2d")?;
        self.tape.guard("conv_transpose2d", &[self.id, weight.id, bias.id])?;
        if stride == 0 || output_padding >= stride {
            return Err(Error::InvalidArgument(format!(
                "conv_transpose2d: output_padding {output_padding} must be smaller than stride {stride}"
            )));
        }
        let (out, dims) = {
            let (x, w, b) = (self.value(), weight.value(), bias.value());
            if x.ndim() != 4 || w.ndim() != 4 || w.shape()[0] != x.shape()[1] {
                return Err(Error::shape("conv_transpose2d", x.shape(), w.shape()));
            }
            if b.shape() != [w.shape()[1]] {
                return Err(Error::shape("conv_transpose2d", w.shape(), b.shape()));
            }
            let (kh, kw) = (w.shape()[2], w.shape()[3]);
            let oh = kernels::transposed_out_len(x.shape()[2], kh, stride, padding, output_padding);
            let ow = kernels::transposed_out_len(x.shape()[3], kw, stride, padding, output_padding);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::invalid_shape("conv_transpose2d", x.shape(), "padding exceeds output"));
            };
            if oh == 0 || ow == 0 {
                return Err(Error::invalid_shape("conv_transpose2d", x.shape(), "empty output"));
            }
            let win = Window { kernel: (kh, kw), stride, padding };
            let dims = ConvDims {
                batch: x.shape()[0],
                in_c: x.shape()[1],
                in_h: x.shape()[2],
                in_w: x.shape()[3],
                out_c: w.shape()[1],
                out_h: oh,
                out_w: ow,
                win,
            };
            let y = kernels::conv_transpose2d_forward(x.data(), w.data(), b.data(), &dims);
            (Tensor::from_parts_unchecked(vec![dims.batch, dims.out_c, oh, ow], y), dims)
        };
        let ids = [self.id, weight.id, bias.id];
        Ok(self.tape.record(out, Op::ConvTranspose2d(ids[0], ids[1], ids[2], ConvAttrs { dims }), &ids))
    }

    /// Max pooling over the last two axes with a square window and no padding.
    /// Trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
        self.tape.guard("max_pool2d", &[self.id])?;
        let (out, arg) = {
            let x = self.value();
            if x.ndim() != 4 {
                return Err(Error::invalid_shape("max_pool2d", x.shape(), "expected [B, C, H, W]"));
            }
            let win = Window { kernel: (kernel, kernel), stride, padding: 0 };
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (oh, ow) = win
                .out_hw(h, w)
                .ok_or_else(|| Error::invalid_shape("max_pool2d", x.shape(), "input smaller than window"))?;
            let planes = x.shape()[0] * x.shape()[1];
            let (y, arg) = kernels::max_pool2d_forward(x.data(), planes, h, w, win, oh, ow);
            (Tensor::from_parts_unchecked(vec![x.shape()[0], x.shape()[1], oh, ow], y), arg)
        };
        Ok(self.tape.record(out, Op::MaxPool2d(self.id, arg), &[self.id]))
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary("relu", |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let out = self.value().clone().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Collapses all axes after the first.
    pub fn flatten(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let rest: usize = shape[1..].iter().product();
        self.reshape(vec![shape[0], rest])
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        self.tape.guard("sum", &[self.id])?;
        let s = self.value().sum();
        Ok(self.tape.record(Tensor::scalar(s), Op::Sum(self.id), &[self.id]))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        self.tape.guard("mean", &[self.id])?;
        let m = {
            let v = self.value();
            v.sum() / T::from_usize(v.numel()).unwrap()
        };
        Ok(self.tape.record(Tensor::scalar(m), Op::Mean(self.id), &[self.id]))
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary("exp", |v| v.exp(), Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        self.unary("log", |v| v.ln(), Op::Log(self.id))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary("square", |v| v * v, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary("sqrt", |v| v.sqrt(), Op::Sqrt(self.id))
    }

    /// Pairwise squared Euclidean distances: `[m, e] x [n, e] -> [m, n]`.
    pub fn sq_dist(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs, "sq_dist")?;
        self.tape.guard("sq_dist", &[self.id, rhs.id])?;
        let out = {
            let (a, b) = (self.value(), rhs.value());
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(Error::shape("sq_dist", a.shape(), b.shape()));
            }
            let (m, e, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            let mut d = Vec::with_capacity(m * n);
            for ar in a.data().chunks(e) {
                for br in b.data().chunks(e) {
                    d.push(ar.iter().zip(br).map(|(&x, &y)| (x - y) * (x - y)).sum());
                }
            }
            Tensor::from_parts_unchecked(vec![m, n], d)
        };
        Ok(self.tape.record(out, Op::SqDist(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// Log-softmax along the last axis, computed with max shifting.
    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        self.tape.guard("log_softmax", &[self.id])?;
        let out = {
            let x = self.value();
            let last = *x.shape().last().unwrap();
            let mut y = Vec::with_capacity(x.numel());
            for row in x.data().chunks(last) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                y.extend(row.iter().map(|&v| v - lse));
            }
            Tensor::from_parts_unchecked(x.shape().to_vec(), y)
        };
        Ok(self.tape.record(out, Op::LogSoftmax(self.id), &[self.id]))
    }

    /// Gathers rows of the leading axis (indices may repeat).
    pub fn select_rows(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let x = self.value();
            let rows = x.shape()[0];
            if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
                return Err(Error::invalid_shape("select_rows", x.shape(), "row index out of range"));
            }
            let inner = x.numel() / rows;
            let mut data = Vec::with_capacity(indices.len() * inner);
            for &i in indices {
                data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            Tensor::from_parts_unchecked(shape, data)
        };
        Ok(self.tape.record(out, Op::SelectRows(self.id, indices.to_vec()), &[self.id]))
    }

    /// For an `[m, n]` matrix returns the `[m]` vector `x[i, cols[i]]`.
    pub fn pick(self, cols: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let x = self.value();
            if x.ndim() != 2 || cols.len() != x.shape()[0] || cols.iter().any(|&c| c >= x.shape()[1]) {
                return Err(Error::invalid_shape("pick", x.shape(), "column index per row required"));
            }
            let n = x.shape()[1];
            let data = cols.iter().enumerate().map(|(r, &c)| x.data()[r * n + c]).collect();
            Tensor::from_parts_unchecked(vec![cols.len()], data)
        };
        Ok(self.tape.record(out, Op::Pick(self.id, cols.to_vec()), &[self.id]))
    }
}
