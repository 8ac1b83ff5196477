//! Dense 4D tensors and a reverse-mode autodiff tape.
//!
//! Tensors are plain (batch, channel, height, width) buffers. Differentiable
//! computations are recorded on a [`Graph`] rebuilt per forward pass; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into the leaf tensors. Gradients accumulate across backward calls until
//! explicitly zeroed.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar types the numerics run on. `f32` is the training default,
/// `f64` is used by the verification paths.
pub trait Element:
    Float + num_traits::NumAssignOps + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const KIND: ScalarKind;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

/// Discriminates element types where they cross a serialization boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarKind {
    F32,
    F64,
}

impl Element for f32 {
    const KIND: ScalarKind = ScalarKind::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const KIND: ScalarKind = ScalarKind::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// (n, c, h, w) extents of a tensor. All four must be positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.n == 1 && self.c == 1 && self.h == 1 && self.w == 1
    }

    /// Row-major flat index of (n, c, y, x).
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4D tensor with an optional gradient buffer.
///
/// Values are immutable after construction in normal use; the data buffer is
/// shared on clone, so passing tensors into a [`Graph`] is cheap. The gradient
/// buffer is per-instance and accumulates until [`Tensor::zero_grad`].
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::Dimension(format!(
                "tensor dimensions must be positive, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Tensor<T> {
        Tensor::new(shape, vec![value; shape.len()]).expect("positive shape")
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    pub fn from_fn(shape: Shape, f: impl FnMut(usize) -> T) -> Tensor<T> {
        let data: Vec<T> = (0..shape.len()).map(f).collect();
        Tensor::new(shape, data).expect("positive shape")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the values; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        let vec: &mut Vec<T> = Arc::make_mut(&mut self.data);
        vec.as_mut_slice()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.at(n, c, y, x)]
    }

    /// Same values, no gradient buffer. The data is shared, not copied.
    pub fn detached(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            grad: None,
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += *d;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_fn(self.shape, |i| U::from_f64(self.data[i].as_f64()))
    }
}

/// Handle to a node on a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Elementwise binary operations with per-channel broadcast on the right
/// operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Backward rule of one recorded operation: given d(loss)/d(out), produce
/// d(loss)/d(parent) for each parent that needs a gradient.
pub(crate) trait Backward<T: Element>: Send {
    fn apply(
        &self,
        out_grad: &[T],
        out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    value: Tensor<T>,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    needs_grad: bool,
}

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// Append-only tape of recorded operations. Rebuilt for every forward pass.
pub struct Graph<T: Element> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that needs no gradient (inputs, targets, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value: value.detached(),
            parents: Vec::new(),
            rule: None,
            needs_grad: false,
        })
    }

    /// Records a gradient-tracked leaf (parameters, grad-check subjects).
    pub fn leaf(&mut self, value: &Tensor<T>) -> Var {
        self.push(Node {
            value: value.detached(),
            parents: Vec::new(),
            rule: None,
            needs_grad: true,
        })
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        self.check_var(var).expect("var belongs to another graph");
        &self.nodes[var.index].value
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.check_var(var).ok()?;
        self.nodes[var.index].value.grad()
    }

    /// Whether gradients are tracked through this node.
    pub fn var_needs_grad(&self, var: Var) -> bool {
        self.check_var(var).is_ok() && self.nodes[var.index].needs_grad
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, node: Node<T>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(node);
        Var {
            graph: self.id,
            index,
        }
    }

    fn check_var(&self, var: Var) -> Result<()> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(Error::Contract(
                "variable does not belong to this graph".into(),
            ));
        }
        Ok(())
    }

    /// Records an op result. Panics in debug/test builds if the value is
    /// non-finite; release builds skip the scan entirely.
    pub(crate) fn record(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        parents: Vec<Var>,
        rule: Box<dyn Backward<T>>,
    ) -> Var {
        debug_assert!(
            value.all_finite(),
            "{op_name} produced non-finite values for shape {}",
            value.shape()
        );
        let needs_grad = parents.iter().any(|p| self.nodes[p.index].needs_grad);
        self.push(Node {
            value,
            parents,
            rule: if needs_grad { Some(rule) } else { None },
            needs_grad,
        })
    }

    pub(crate) fn check_parents(&self, vars: &[Var]) -> Result<()> {
        for v in vars {
            self.check_var(*v)?;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary(BinaryOp::Mul, a, b)
    }

    /// Elementwise add/sub/mul. `b` may either match `a`'s shape or be a
    /// per-channel (n-or-1, c, 1, 1) tensor that broadcasts over space.
    pub fn ew_binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        self.check_parents(&[a, b])?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let broadcast = if sa == sb {
            false
        } else if sb.c == sa.c && sb.h == 1 && sb.w == 1 && (sb.n == 1 || sb.n == sa.n) {
            true
        } else {
            return Err(Error::Dimension(format!(
                "elementwise {op:?}: shapes {sa} and {sb} neither match nor broadcast per channel"
            )));
        };

        let (av, bv) = (self.value(a), self.value(b));
        let out = if broadcast {
            ew_broadcast_forward(op, av, bv)
        } else {
            let f = |x: T, y: T| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            };
            Tensor::from_fn(sa, |i| f(av.data()[i], bv.data()[i]))
        };
        Ok(self.record(
            "ew_binary",
            out,
            vec![a, b],
            Box::new(EwBackward { op, broadcast }),
        ))
    }

    /// Mean over all elements, as a (1,1,1,1) tensor. The sum is accumulated
    /// in double precision in a fixed order.
    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        self.check_parents(&[x])?;
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Dimension("reduce_mean of an empty tensor".into()));
        }
        let sum: f64 = xv.data().iter().map(|v| v.as_f64()).sum();
        let mean = T::from_f64(sum / xv.len() as f64);
        Ok(self.record(
            "reduce_mean",
            Tensor::scalar(mean),
            vec![x],
            Box::new(MeanBackward),
        ))
    }

    /// Reverse pass from a scalar loss. Gradients of leaves accumulate (+=),
    /// so calling this twice doubles them; leaves the loss does not reach are
    /// left untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)
            .map_err(|_| Error::Contract("backward: loss is not a node of this graph".into()))?;
        if !self.nodes[loss.index].value.shape().is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar-shaped (1,1,1,1), got {}",
                self.nodes[loss.index].value.shape()
            )));
        }

        let count = loss.index + 1;
        let mut pending: Vec<Option<Vec<T>>> = Vec::with_capacity(count);
        pending.resize_with(count, || None);
        pending[loss.index] = Some(vec![T::one()]);

        for i in (0..count).rev() {
            let Some(grad) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(rule) = self.nodes[i].rule.take() else {
                // Leaf: persist.
                self.nodes[i].value.accumulate_grad(&grad);
                continue;
            };
            let parents = self.nodes[i].parents.clone();
            let contributions = {
                let parent_refs: Vec<&Tensor<T>> =
                    parents.iter().map(|p| &self.nodes[p.index].value).collect();
                let needs: Vec<bool> = parents
                    .iter()
                    .map(|p| self.nodes[p.index].needs_grad)
                    .collect();
                rule.apply(&grad, &self.nodes[i].value, &parent_refs, &needs)
            };
            self.nodes[i].rule = Some(rule);
            for (parent, contribution) in parents.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                match &mut pending[parent.index] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += *v;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

fn ew_broadcast_forward<T: Element>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let sa = a.shape();
    let sb = b.shape();
    let mut out = vec![T::zero(); sa.len()];
    let (ad, bd) = (a.data(), b.data());
    let plane = sa.h * sa.w;
    for n in 0..sa.n {
        for c in 0..sa.c {
            let bv = bd[if sb.n == 1 { c } else { n * sb.c + c }];
            let base = (n * sa.c + c) * plane;
            let row = &ad[base..base + plane];
            let dst = &mut out[base..base + plane];
            match op {
                BinaryOp::Add => {
                    for (d, x) in dst.iter_mut().zip(row) {
                        *d = *x + bv;
                    }
                }
                BinaryOp::Sub => {
                    for (d, x) in dst.iter_mut().zip(row) {
                        *d = *x - bv;
                    }
                }
                BinaryOp::Mul => {
                    for (d, x) in dst.iter_mut().zip(row) {
                        *d = *x * bv;
                    }
                }
            }
        }
    }
    Tensor::new(sa, out).expect("shape preserved")
}

struct EwBackward {
    op: BinaryOp,
    broadcast: bool,
}

impl<T: Element> Backward<T> for EwBackward {
    fn apply(
        &self,
        out_grad: &[T],
        _out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (a, b) = (parents[0], parents[1]);
        let sa = a.shape();
        let sb = b.shape();
        let plane = sa.h * sa.w;

        let grad_a = if !needs[0] {
            None
        } else {
            Some(match self.op {
                BinaryOp::Add => out_grad.to_vec(),
                BinaryOp::Sub => out_grad.to_vec(),
                BinaryOp::Mul => {
                    if self.broadcast {
                        let mut g = vec![T::zero(); sa.len()];
                        for n in 0..sa.n {
                            for c in 0..sa.c {
                                let bv = b.data()[if sb.n == 1 { c } else { n * sb.c + c }];
                                let base = (n * sa.c + c) * plane;
                                for i in 0..plane {
                                    g[base + i] = out_grad[base + i] * bv;
                                }
                            }
                        }
                        g
                    } else {
                        out_grad
                            .iter()
                            .zip(b.data())
                            .map(|(g, y)| *g * *y)
                            .collect()
                    }
                }
            })
        };

        let grad_b = if !needs[1] {
            None
        } else {
            let sign = if self.op == BinaryOp::Sub {
                -T::one()
            } else {
                T::one()
            };
            if self.broadcast {
                // Broadcast operand receives the gradient summed over the
                // broadcast axes.
                let mut g = vec![T::zero(); sb.len()];
                for n in 0..sa.n {
                    for c in 0..sa.c {
                        let bi = if sb.n == 1 { c } else { n * sb.c + c };
                        let base = (n * sa.c + c) * plane;
                        let mut acc = T::zero();
                        match self.op {
                            BinaryOp::Mul => {
                                for i in 0..plane {
                                    acc += out_grad[base + i] * a.data()[base + i];
                                }
                            }
                            _ => {
                                for i in 0..plane {
                                    acc += out_grad[base + i];
                                }
                            }
                        }
                        g[bi] += acc * sign;
                    }
                }
                Some(g)
            } else {
                Some(match self.op {
                    BinaryOp::Add => out_grad.to_vec(),
                    BinaryOp::Sub => out_grad.iter().map(|g| -*g).collect(),
                    BinaryOp::Mul => out_grad
                        .iter()
                        .zip(a.data())
                        .map(|(g, x)| *g * *x)
                        .collect(),
                })
            }
        };

        vec![grad_a, grad_b]
    }
}

struct MeanBackward;

impl<T: Element> Backward<T> for MeanBackward {
    fn apply(
        &self,
        out_grad: &[T],
        _out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let len = parents[0].len();
        let share = out_grad[0] * T::from_f64(1.0 / len as f64);
        vec![Some(vec![share; len])]
    }
}

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences, returning the worst relative error
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let xv = graph.leaf(x);
    let loss = f(&mut graph, xv)?;
    if !graph.value(loss).shape().is_scalar() {
        return Err(Error::Contract(
            "grad_check: function must be scalar-valued".into(),
        ));
    }
    graph.backward(loss)?;
    let analytic = graph
        .grad(xv)
        .ok_or_else(|| Error::Contract("grad_check: x received no gradient".into()))?
        .to_vec();

    let mut eval = |data: Vec<f64>| -> Result<f64> {
        let probe = Tensor::new(x.shape(), data)?;
        let mut g = Graph::new();
        let v = g.leaf(&probe);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / 1e-12f64.max(analytic[i].abs() + numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
