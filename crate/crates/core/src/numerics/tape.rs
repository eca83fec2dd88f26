use std::cell::RefCell;
use std::collections::BTreeMap;

use super::kernels::{self, MatDims};
use super::tensor::{suffix_repeats, Scalar, Tensor};
use super::{NumericsError, OpKind, Param};

/// Deliberate corruption of one backward rule.
///
/// A test harness hook: gradient checks must detect it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    TanhBackward,
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, dims: MatDims },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { x: usize, scale: T },
    Concat { inputs: Vec<usize>, axis: usize },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Gelu { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Clamp { x: usize, lo: T, hi: T },
    Sum { x: usize },
    SumLast { x: usize },
    Mean { x: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Expand { x: usize },
    ExpandLast { x: usize, n: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Affine { .. } => OpKind::Affine,
            Op::Concat { .. } => OpKind::Concat,
            Op::Softmax { .. } => OpKind::SoftmaxRows,
            Op::LogSoftmax { .. } => OpKind::LogSoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Exp { .. } => OpKind::Exp,
            Op::Log { .. } => OpKind::Log,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Sum { .. } => OpKind::Sum,
            Op::SumLast { .. } => OpKind::SumLast,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Expand { .. } => OpKind::Expand,
            Op::ExpandLast { .. } => OpKind::ExpandLast,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
    fault: Option<Fault>,
}

/// Records executed ops so gradients can be replayed in reverse.
///
/// Nodes are appended in execution order, which is already a topological
/// order; [`Tape::backward`] walks it once from the loss down and then
/// clears the tape.
pub struct Tape<T: Scalar = f32> {
    inner: RefCell<Inner<T>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    by_param: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a recorded leaf.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient accumulated over every binding of the named parameter.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_param
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: Vec::new(),
                fault: None,
            }),
        }
    }

    pub fn inject_fault(&self, fault: Fault) {
        self.inner.borrow_mut().fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Binds a named parameter; its gradient is reported under the name.
    pub fn param(&self, param: &Param<T>) -> Var<'_, T> {
        let var = self.leaf(param.value.clone());
        self.inner.borrow_mut().params.push((param.name.clone(), var.id));
        var
    }

    /// Binds a parameter as a frozen constant.
    pub fn frozen(&self, param: &Param<T>) -> Var<'_, T> {
        self.constant(param.value.clone())
    }

    fn push_unchecked(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = {
            let inner = self.inner.borrow();
            let needs = |id: usize| inner.nodes[id].requires_grad;
            match &op {
                Op::Leaf => false,
                Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => needs(*a) || needs(*b),
                Op::Concat { inputs, .. } => inputs.iter().any(|&i| needs(i)),
                Op::LayerNorm { x, gamma, beta, .. } => needs(*x) || needs(*gamma) || needs(*beta),
                Op::Affine { x, .. }
                | Op::Softmax { x }
                | Op::LogSoftmax { x }
                | Op::Tanh { x }
                | Op::Sigmoid { x }
                | Op::Gelu { x }
                | Op::Exp { x }
                | Op::Log { x }
                | Op::Clamp { x, .. }
                | Op::Sum { x }
                | Op::SumLast { x }
                | Op::Mean { x }
                | Op::Reshape { x }
                | Op::Permute { x, .. }
                | Op::Narrow { x, .. }
                | Op::Expand { x }
                | Op::ExpandLast { x, .. } => needs(*x),
            }
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&Tensor<T>]) -> R) -> R {
        let inner = self.inner.borrow();
        let vals: Vec<&Tensor<T>> = ids.iter().map(|&i| &inner.nodes[i].value).collect();
        f(&vals)
    }

    fn unary(
        &self,
        x: usize,
        name: &'static str,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var<'_, T>, NumericsError> {
        let value = self.with_values(&[x], |v| v[0].map(f));
        self.push(name, value, op)
    }

    fn broadcast_pair(&self, a: usize, b: usize, name: &'static str) -> Result<(usize, usize), NumericsError> {
        self.with_values(&[a, b], |v| {
            if suffix_repeats(v[0].shape(), v[1].shape()).is_some() {
                Ok((a, b))
            } else if suffix_repeats(v[1].shape(), v[0].shape()).is_some() {
                Ok((b, a))
            } else {
                Err(NumericsError::Shape {
                    op: name,
                    detail: format!("{:?} vs {:?}", v[0].shape(), v[1].shape()),
                })
            }
        })
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'_, T>, NumericsError> {
        let (big, small) = self.broadcast_pair(a, b, name)?;
        let value = self.with_values(&[big, small], |v| {
            let sb = v[1].data();
            let data = v[0]
                .data()
                .chunks_exact(sb.len())
                .flat_map(|chunk| chunk.iter().zip(sb).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::from_parts(v[0].shape().to_vec(), data)
        });
        self.push(name, value, make(big, small))
    }

    /// Reverse-mode sweep from a scalar loss. Clears the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, NumericsError> {
        let (nodes, params, fault) = {
            let mut inner = self.inner.borrow_mut();
            if inner.nodes.is_empty() {
                return Err(NumericsError::Contract("backward on an empty tape".into()));
            }
            let numel = inner.nodes[loss.id].value.numel();
            if numel != 1 {
                return Err(NumericsError::Contract(format!(
                    "backward needs a scalar loss, got {numel} elements"
                )));
            }
            (
                std::mem::take(&mut inner.nodes),
                std::mem::take(&mut inner.params),
                inner.fault,
            )
        };

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut by_node: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                by_node[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            propagate(&nodes, id, &g, &mut grads, fault);
        }

        let mut by_param: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, id) in params {
            let Some(g) = by_node[id].clone() else { continue };
            match by_param.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    by_param.insert(name, g);
                }
            }
        }
        Ok(Gradients { by_node, by_param })
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    fault: Option<Fault>,
) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let y = node.value.data();
    let elementwise = |x: usize, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
        val(x)
            .data()
            .iter()
            .zip(y)
            .zip(g)
            .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
            .collect()
    };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, dims } => {
            if needs(*a) {
                let da = kernels::matmul_grad_lhs(*dims, g, val(*b).data());
                accumulate(nodes, grads, *a, da);
            }
            if needs(*b) {
                let db = kernels::matmul_grad_rhs(*dims, g, val(*a).data());
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add { a, b } => {
            if needs(*b) {
                let db = kernels::reduce_leading(g, val(*b).numel());
                accumulate(nodes, grads, *b, db);
            }
            accumulate(nodes, grads, *a, g.to_vec());
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                let da = g
                    .chunks_exact(vb.len())
                    .flat_map(|gc| gc.iter().zip(vb).map(|(&gi, &bi)| gi * bi))
                    .collect();
                accumulate(nodes, grads, *a, da);
            }
            if needs(*b) {
                let prod: Vec<T> = g.iter().zip(va).map(|(&gi, &ai)| gi * ai).collect();
                accumulate(nodes, grads, *b, kernels::reduce_leading(&prod, vb.len()));
            }
        }
        Op::Affine { x, scale } => {
            let dx = g.iter().map(|&gi| gi * *scale).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let width = val(inp).shape()[*axis] * inner;
                if needs(inp) {
                    let mut d = Vec::with_capacity(outer * width);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + width]);
                    }
                    accumulate(nodes, grads, inp, d);
                }
                offset += width;
            }
        }
        Op::Softmax { x } => {
            let w = *node.value.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *x, kernels::softmax_rows_grad(y, g, w));
        }
        Op::LogSoftmax { x } => {
            let w = *node.value.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *x, kernels::log_softmax_rows_grad(y, g, w));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (dx, dgamma, dbeta) = kernels::layer_norm_grad(g, xhat, rstd, val(*gamma).data());
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::Tanh { x } => {
            let bias = if fault == Some(Fault::TanhBackward) {
                T::of(1.5)
            } else {
                T::one()
            };
            let dx = elementwise(*x, &|_, yi, gi| gi * (T::one() - yi * yi) * bias);
            accumulate(nodes, grads, *x, dx);
        }
        Op::Sigmoid { x } => {
            let dx = elementwise(*x, &|_, yi, gi| gi * yi * (T::one() - yi));
            accumulate(nodes, grads, *x, dx);
        }
        Op::Gelu { x } => {
            let dx = elementwise(*x, &|xi, _, gi| gi * kernels::gelu_grad(xi));
            accumulate(nodes, grads, *x, dx);
        }
        Op::Exp { x } => {
            let dx = elementwise(*x, &|_, yi, gi| gi * yi);
            accumulate(nodes, grads, *x, dx);
        }
        Op::Log { x } => {
            let dx = elementwise(*x, &|xi, _, gi| gi / xi);
            accumulate(nodes, grads, *x, dx);
        }
        Op::Clamp { x, lo, hi } => {
            let dx = elementwise(*x, &|xi, _, gi| {
                if xi >= *lo && xi <= *hi {
                    gi
                } else {
                    T::zero()
                }
            });
            accumulate(nodes, grads, *x, dx);
        }
        Op::Sum { x } => {
            accumulate(nodes, grads, *x, vec![g[0]; val(*x).numel()]);
        }
        Op::Mean { x } => {
            let n = val(*x).numel();
            accumulate(nodes, grads, *x, vec![g[0] / T::of(n as f64); n]);
        }
        Op::SumLast { x } => {
            let w = *val(*x).shape().last().unwrap_or(&1);
            let dx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, w)).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Permute { x, perm } => {
            let inv = kernels::inverse_permutation(perm);
            let (dx, _) = kernels::permute(g, node.value.shape(), &inv);
            accumulate(nodes, grads, *x, dx);
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = val(*x).shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let len = node.value.shape()[*axis];
            let mut dx = vec![T::zero(); val(*x).numel()];
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let dst = o * in_shape[*axis] * inner + start * inner;
                dx[dst..dst + len * inner].copy_from_slice(src);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Expand { x } => {
            accumulate(nodes, grads, *x, kernels::reduce_leading(g, val(*x).numel()));
        }
        Op::ExpandLast { x, n } => {
            let dx = g.chunks_exact(*n).map(|c| c.iter().copied().sum()).collect();
            accumulate(nodes, grads, *x, dx);
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_values(&[self.id], |v| v[0].shape().to_vec())
    }

    pub fn item(&self) -> T {
        self.tape.with_values(&[self.id], |v| v[0].item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Which primitive produced this value; `None` for leaves.
    pub fn kind(&self) -> Option<OpKind> {
        self.tape.inner.borrow().nodes[self.id].op.kind()
    }

    /// `[.., m, k] x [k, n]` or batched `[.., m, k] x [.., k, n]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Self, NumericsError> {
        let (dims, out_shape) = self
            .tape
            .with_values(&[self.id, rhs.id], |v| kernels::matmul_dims(v[0].shape(), v[1].shape()))?;
        let data = self
            .tape
            .with_values(&[self.id, rhs.id], |v| kernels::matmul_forward(dims, v[0].data(), v[1].data()));
        self.tape.push(
            "matmul",
            Tensor::from_parts(out_shape, data),
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                dims,
            },
        )
    }

    /// Elementwise sum; the smaller operand may broadcast over leading dims.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Self, NumericsError> {
        self.tape
            .binary(self.id, rhs.id, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    /// Elementwise product; the smaller operand may broadcast over leading dims.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Self, NumericsError> {
        self.tape
            .binary(self.id, rhs.id, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Self, NumericsError> {
        self.add(rhs.affine(-1.0, 0.0)?)
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Result<Self, NumericsError> {
        let (s, t) = (T::of(scale), T::of(shift));
        self.tape
            .unary(self.id, "affine", |v| s * v + t, Op::Affine { x: self.id, scale: s })
    }

    pub fn scale(self, factor: f64) -> Result<Self, NumericsError> {
        self.affine(factor, 0.0)
    }

    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Self, NumericsError> {
        let nd = parts.first().map(|p| p.shape().len()).unwrap_or(1);
        Self::concat(parts, nd.saturating_sub(1))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Self, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat of nothing".into()))?;
        let tape = first.tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = tape.with_values(&ids, |vals| {
            let base = vals[0].shape();
            if axis >= base.len() {
                return Err(NumericsError::Shape {
                    op: "concat",
                    detail: format!("axis {axis} out of range for {base:?}"),
                });
            }
            for v in vals {
                let s = v.shape();
                let same = s.len() == base.len()
                    && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !same {
                    return Err(NumericsError::Shape {
                        op: "concat",
                        detail: format!("{base:?} vs {s:?} on axis {axis}"),
                    });
                }
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut out_shape = base.to_vec();
            out_shape[axis] = vals.iter().map(|v| v.shape()[axis]).sum();
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for v in vals {
                    let w = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
                }
            }
            Ok(Tensor::from_parts(out_shape, data))
        })?;
        tape.push("concat", value, Op::Concat { inputs: ids, axis })
    }

    /// Softmax over the last dimension.
    pub fn softmax(self) -> Result<Self, NumericsError> {
        let value = self.tape.with_values(&[self.id], |v| {
            let w = *v[0].shape().last().unwrap_or(&1);
            Tensor::from_parts(v[0].shape().to_vec(), kernels::softmax_rows(v[0].data(), w))
        });
        self.tape.push("softmax_rows", value, Op::Softmax { x: self.id })
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(self) -> Result<Self, NumericsError> {
        let value = self.tape.with_values(&[self.id], |v| {
            let w = *v[0].shape().last().unwrap_or(&1);
            Tensor::from_parts(v[0].shape().to_vec(), kernels::log_softmax_rows(v[0].data(), w))
        });
        self.tape.push("log_softmax_rows", value, Op::LogSoftmax { x: self.id })
    }

    /// Normalizes over the last dimension, then scales by `gamma` and shifts by `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Self, NumericsError> {
        let (value, xhat, rstd) = self.tape.with_values(&[self.id, gamma.id, beta.id], |v| {
            let width = *v[0].shape().last().unwrap_or(&1);
            if v[1].shape() != [width] || v[2].shape() != [width] {
                return Err(NumericsError::Shape {
                    op: "layer_norm",
                    detail: format!("{:?} with gamma {:?}, beta {:?}", v[0].shape(), v[1].shape(), v[2].shape()),
                });
            }
            let out = kernels::layer_norm(v[0].data(), v[1].data(), v[2].data(), T::of(eps));
            Ok((Tensor::from_parts(v[0].shape().to_vec(), out.y), out.xhat, out.rstd))
        })?;
        self.tape.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        )
    }

    pub fn tanh(self) -> Result<Self, NumericsError> {
        self.tape.unary(self.id, "tanh", |v| v.tanh(), Op::Tanh { x: self.id })
    }

    pub fn sigmoid(self) -> Result<Self, NumericsError> {
        self.tape
            .unary(self.id, "sigmoid", kernels::sigmoid, Op::Sigmoid { x: self.id })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Self, NumericsError> {
        self.tape.unary(self.id, "gelu", kernels::gelu, Op::Gelu { x: self.id })
    }

    pub fn exp(self) -> Result<Self, NumericsError> {
        self.tape.unary(self.id, "exp", |v| v.exp(), Op::Exp { x: self.id })
    }

    pub fn log(self) -> Result<Self, NumericsError> {
        let bad = self
            .tape
            .with_values(&[self.id], |v| v[0].data().iter().any(|&x| x <= T::zero()));
        if bad {
            return Err(NumericsError::Domain {
                op: "log",
                detail: "non-positive input".into(),
            });
        }
        self.tape.unary(self.id, "log", |v| v.ln(), Op::Log { x: self.id })
    }

    /// Clamp to `[lo, hi]`; zero gradient outside the bounds.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Self, NumericsError> {
        let (l, h) = (T::of(lo), T::of(hi));
        self.tape.unary(
            self.id,
            "clamp",
            |v| v.max(l).min(h),
            Op::Clamp { x: self.id, lo: l, hi: h },
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Result<Self, NumericsError> {
        let value = self
            .tape
            .with_values(&[self.id], |v| Tensor::scalar(v[0].data().iter().copied().sum()));
        self.tape.push("sum", value, Op::Sum { x: self.id })
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(self) -> Result<Self, NumericsError> {
        let value = self.tape.with_values(&[self.id], |v| {
            Tensor::scalar(v[0].data().iter().copied().sum::<T>() / T::of(v[0].numel() as f64))
        });
        self.tape.push("mean", value, Op::Mean { x: self.id })
    }

    /// Sum over the last dimension, dropping it.
    pub fn sum_last(self) -> Result<Self, NumericsError> {
        let value = self.tape.with_values(&[self.id], |v| {
            let shape = v[0].shape();
            let w = *shape.last().unwrap_or(&1);
            let data = v[0].data().chunks_exact(w).map(|c| c.iter().copied().sum()).collect();
            Tensor::from_parts(shape[..shape.len().saturating_sub(1)].to_vec(), data)
        });
        self.tape.push("sum_last", value, Op::SumLast { x: self.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, NumericsError> {
        let value = self.value().reshaped(shape)?;
        self.tape.push("reshape", value, Op::Reshape { x: self.id })
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self, NumericsError> {
        let (data, shape) = self.tape.with_values(&[self.id], |v| {
            let nd = v[0].ndim();
            let mut seen = vec![false; nd];
            let valid = perm.len() == nd && perm.iter().all(|&p| p < nd && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(NumericsError::Shape {
                    op: "permute",
                    detail: format!("{perm:?} for {:?}", v[0].shape()),
                });
            }
            Ok(kernels::permute(v[0].data(), v[0].shape(), perm))
        })?;
        self.tape.push(
            "permute",
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Self, NumericsError> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(NumericsError::Shape {
                op: "permute",
                detail: format!("transpose of rank-{nd} tensor"),
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self, NumericsError> {
        let value = self.tape.with_values(&[self.id], |v| {
            let shape = v[0].shape();
            if axis >= shape.len() || len == 0 || start + len > shape[axis] {
                return Err(NumericsError::Shape {
                    op: "narrow",
                    detail: format!("{start}..{} on axis {axis} of {shape:?}", start + len),
                });
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * shape[axis] * inner + start * inner;
                data.extend_from_slice(&v[0].data()[base..base + len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            Ok(Tensor::from_parts(out_shape, data))
        })?;
        self.tape.push("narrow", value, Op::Narrow { x: self.id, axis, start })
    }

    /// Repeats the whole tensor over new leading dimensions.
    pub fn expand(self, leading: &[usize]) -> Result<Self, NumericsError> {
        let value = self.tape.with_values(&[self.id], |v| {
            let reps: usize = leading.iter().product();
            let mut shape = leading.to_vec();
            shape.extend_from_slice(v[0].shape());
            let mut data = Vec::with_capacity(reps * v[0].numel());
            for _ in 0..reps {
                data.extend_from_slice(v[0].data());
            }
            Tensor::from_parts(shape, data)
        });
        self.tape.push("expand", value, Op::Expand { x: self.id })
    }

    /// Appends a trailing dimension of size `n`, repeating each entry.
    pub fn expand_last(self, n: usize) -> Result<Self, NumericsError> {
        if n == 0 {
            return Err(NumericsError::Shape {
                op: "expand_last",
                detail: "zero-sized dimension".into(),
            });
        }
        let value = self.tape.with_values(&[self.id], |v| {
            let mut shape = v[0].shape().to_vec();
            shape.push(n);
            let data = v[0].data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
            Tensor::from_parts(shape, data)
        });
        self.tape.push("expand_last", value, Op::ExpandLast { x: self.id, n })
    }
}
