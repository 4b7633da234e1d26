//! Graph nodes and the differentiable primitives.
//!
//! Every backward rule is written in terms of [`Var`] operations, so a
//! gradient computed with `create_graph = true` is itself a node in the
//! graph and can be differentiated again.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::array::Array;
use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous recording mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

fn set_grad_mode(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Disables graph recording on this thread until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_mode(false)
}

/// Re-enables graph recording, e.g. for an inner input gradient computed
/// inside a `no_grad` region.
pub fn enable_grad() -> GradModeGuard {
    set_grad_mode(true)
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    Shift,
    MatMul,
    Transpose,
    Tanh,
    Sigmoid,
    Recip,
    Abs,
    Relu,
    Log,
    Exp,
    Square,
    Sum,
    Mean,
    /// Scalar broadcast to a shape.
    Expand,
    Reshape,
    /// Contiguous flat window `[offset, offset + len)` of the input.
    Slice { offset: usize },
    /// Input placed at `offset` inside a zero array of the given shape.
    Embed { offset: usize },
    Concat,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Shift => "shift",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Tanh => "tanh",
            Op::Sigmoid => "logistic",
            Op::Recip => "reciprocal",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Expand => "expand",
            Op::Reshape => "reshape",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Concat => "concat",
        }
    }
}

struct Node {
    id: usize,
    value: Array,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
    /// First primitive that produced a non-finite value upstream of (or at) this node.
    overflow: Option<&'static str>,
}

/// A value in a differentiation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({}, {:?})", self.0.id, self.0.op.name(), self.0.value)
    }
}

impl Var {
    fn make(value: Array, op: Op, inputs: Vec<Var>, requires_grad: bool) -> Var {
        let mut overflow = inputs.iter().find_map(|v| v.0.overflow);
        if overflow.is_none() && !value.all_finite() {
            overflow = Some(op.name());
        }
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            op,
            inputs,
            requires_grad,
            overflow,
        }))
    }

    /// A differentiable input.
    pub fn leaf(value: Array) -> Var {
        Var::make(value, Op::Leaf, Vec::new(), true)
    }

    /// A value gradients never flow into.
    pub fn constant(value: Array) -> Var {
        Var::make(value, Op::Leaf, Vec::new(), false)
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Array::scalar(v))
    }

    fn op(value: Array, op: Op, inputs: Vec<Var>) -> Var {
        let requires = grad_enabled() && inputs.iter().any(|v| v.0.requires_grad);
        let inputs = if requires { inputs } else { Vec::new() };
        Var::make(value, op, inputs, requires)
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Name of the first primitive whose output went non-finite, if any.
    pub fn overflow(&self) -> Option<&'static str> {
        self.0.overflow
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn add(&self, other: &Var) -> Var {
        Var::op(self.value().add(other.value()), Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Var) -> Var {
        Var::op(self.value().sub(other.value()), Op::Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Var) -> Var {
        Var::op(
            self.value().zip_map(other.value(), |a, b| a * b),
            Op::Mul,
            vec![self.clone(), other.clone()],
        )
    }

    pub fn neg(&self) -> Var {
        Var::op(self.value().map(|v| -v), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::op(self.value().scale(c), Op::Scale(c), vec![self.clone()])
    }

    /// Adds a constant to every element.
    pub fn shift(&self, c: f64) -> Var {
        Var::op(self.value().map(|v| v + c), Op::Shift, vec![self.clone()])
    }

    pub fn matmul(&self, other: &Var) -> Var {
        Var::op(self.value().matmul(other.value()), Op::MatMul, vec![self.clone(), other.clone()])
    }

    /// Matrix `[m, k]` times vector `[k]`.
    pub fn matvec(&self, x: &Var) -> Var {
        let k = x.value().len();
        let m = self.shape()[0];
        self.matmul(&x.reshape(&[k, 1])).reshape(&[m])
    }

    pub fn transpose(&self) -> Var {
        Var::op(self.value().transpose(), Op::Transpose, vec![self.clone()])
    }

    pub fn tanh(&self) -> Var {
        Var::op(self.value().map(f64::tanh), Op::Tanh, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        Var::op(self.value().map(|v| 1.0 / (1.0 + (-v).exp())), Op::Sigmoid, vec![self.clone()])
    }

    pub fn recip(&self) -> Var {
        Var::op(self.value().map(|v| 1.0 / v), Op::Recip, vec![self.clone()])
    }

    pub fn abs(&self) -> Var {
        Var::op(self.value().map(f64::abs), Op::Abs, vec![self.clone()])
    }

    /// `max(x, 0)`.
    pub fn relu(&self) -> Var {
        Var::op(self.value().map(|v| v.max(0.0)), Op::Relu, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Var::op(self.value().map(f64::ln), Op::Log, vec![self.clone()])
    }

    pub fn exp(&self) -> Var {
        Var::op(self.value().map(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        Var::op(self.value().map(|v| v * v), Op::Square, vec![self.clone()])
    }

    pub fn sum(&self) -> Var {
        Var::op(Array::scalar(self.value().sum()), Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        Var::op(Array::scalar(self.value().sum() / n), Op::Mean, vec![self.clone()])
    }

    pub fn dot(&self, other: &Var) -> Var {
        self.mul(other).sum()
    }

    /// Broadcasts a single-element value to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Var {
        assert_eq!(self.value().len(), 1, "expand needs a single-element input");
        Var::op(
            Array::full(shape, self.value().item()),
            Op::Expand,
            vec![self.clone()],
        )
    }

    /// Multiplies every element by a single-element `s`.
    pub fn mul_scalar(&self, s: &Var) -> Var {
        self.mul(&s.expand(self.shape()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::op(
            self.value().clone().reshaped(shape),
            Op::Reshape,
            vec![self.clone()],
        )
    }

    /// Flat window of `shape` elements starting at `offset`.
    pub fn slice(&self, offset: usize, shape: &[usize]) -> Var {
        let len: usize = shape.iter().product();
        let data = &self.value().data()[offset..offset + len];
        Var::op(
            Array::new(shape.to_vec(), data.to_vec()),
            Op::Slice { offset },
            vec![self.clone()],
        )
    }

    /// Row `r` of a rank-2 value.
    pub fn row(&self, r: usize) -> Var {
        let cols = self.shape()[1];
        self.slice(r * cols, &[cols])
    }

    /// Element `i` (flat index) as a scalar.
    pub fn at(&self, i: usize) -> Var {
        self.slice(i, &[])
    }

    /// Places this value at flat `offset` of a zero array of `shape`.
    pub fn embed(&self, offset: usize, shape: &[usize]) -> Var {
        let mut out = Array::zeros(shape);
        out.data_mut()[offset..offset + self.value().len()].copy_from_slice(self.value().data());
        Var::op(out, Op::Embed { offset }, vec![self.clone()])
    }

    /// Flat concatenation of the parts, reshaped to `shape`.
    pub fn concat(parts: &[Var], shape: &[usize]) -> Var {
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        Var::op(Array::new(shape.to_vec(), data), Op::Concat, parts.to_vec())
    }

    /// Local chain rule: cotangents for each input given the output cotangent.
    fn backward_rule(&self, g: &Var) -> Vec<Var> {
        let node = &self.0;
        let inp = &node.inputs;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.neg()],
            Op::Mul => vec![g.mul(&inp[1]), g.mul(&inp[0])],
            Op::Neg => vec![g.neg()],
            Op::Scale(c) => vec![g.scale(*c)],
            Op::Shift => vec![g.clone()],
            Op::MatMul => vec![
                g.matmul(&inp[1].transpose()),
                inp[0].transpose().matmul(g),
            ],
            Op::Transpose => vec![g.transpose()],
            Op::Tanh => {
                // 1 - y^2, expressed on the output node so it stays differentiable
                let one_minus = self.square().neg().shift(1.0);
                vec![g.mul(&one_minus)]
            }
            Op::Sigmoid => {
                let d = self.mul(&self.neg().shift(1.0));
                vec![g.mul(&d)]
            }
            Op::Recip => vec![g.mul(&self.square()).neg()],
            Op::Abs => {
                let sign = inp[0].value().map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![g.mul(&Var::constant(sign))]
            }
            Op::Relu => {
                let mask = inp[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![g.mul(&Var::constant(mask))]
            }
            Op::Log => vec![g.mul(&inp[0].recip())],
            Op::Exp => vec![g.mul(self)],
            Op::Square => vec![g.mul(&inp[0]).scale(2.0)],
            Op::Sum => vec![g.expand(inp[0].shape())],
            Op::Mean => {
                let n = inp[0].value().len() as f64;
                vec![g.expand(inp[0].shape()).scale(1.0 / n)]
            }
            Op::Expand => vec![g.sum().reshape(inp[0].shape())],
            Op::Reshape => vec![g.reshape(inp[0].shape())],
            Op::Slice { offset } => vec![g.embed(*offset, inp[0].shape())],
            Op::Embed { offset, .. } => vec![g.slice(*offset, inp[0].shape())],
            Op::Concat => {
                let mut off = 0;
                inp.iter()
                    .map(|p| {
                        let s = g.slice(off, p.shape());
                        off += p.value().len();
                        s
                    })
                    .collect()
            }
        }
    }
}

/// Outcome of one reverse sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepStats {
    /// Distinct graph nodes reachable from the output that require gradients.
    pub reachable: usize,
    /// Backward rules executed.
    pub visited: usize,
}

/// Nodes reachable from `root` that require gradients, children before parents
/// reversed (i.e. a reverse topological order starting at `root`).
fn reverse_topological(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // iterative post-order DFS
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.0.requires_grad || !seen.insert(v.0.id) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.inputs {
            if p.0.requires_grad && !seen.contains(&p.0.id) {
                stack.push((p.clone(), false));
            }
        }
    }
    order.reverse();
    order
}

/// Vector-Jacobian product of `output` with cotangent `seed`, for each of `wrt`.
///
/// With `create_graph` the returned gradients are recorded and can be
/// differentiated again. Inputs that `output` does not depend on get zeros.
pub fn vjp(output: &Var, seed: &Var, wrt: &[Var], create_graph: bool) -> (Vec<Var>, SweepStats) {
    assert_eq!(output.shape(), seed.shape(), "seed shape must match output");
    let _mode = set_grad_mode(create_graph);
    let order = reverse_topological(output);
    let mut grads: HashMap<usize, Var> = HashMap::with_capacity(order.len());
    let seed = if create_graph { seed.clone() } else { seed.detach() };
    grads.insert(output.0.id, seed);
    let mut visited = 0;
    let keep: HashSet<usize> = wrt.iter().map(|w| w.0.id).collect();
    for node in &order {
        let g = if keep.contains(&node.0.id) {
            match grads.get(&node.0.id) {
                Some(g) => g.clone(),
                None => continue,
            }
        } else {
            match grads.remove(&node.0.id) {
                Some(g) => g,
                None => continue,
            }
        };
        visited += 1;
        if node.0.inputs.is_empty() {
            continue;
        }
        let parts = node.backward_rule(&g);
        for (input, part) in node.0.inputs.iter().zip(parts) {
            if !input.0.requires_grad {
                continue;
            }
            let acc = match grads.remove(&input.0.id) {
                Some(prev) => prev.add(&part),
                None => part,
            };
            grads.insert(input.0.id, acc);
        }
    }
    let out = wrt
        .iter()
        .map(|w| {
            grads
                .get(&w.0.id)
                .cloned()
                .unwrap_or_else(|| Var::constant(Array::zeros(w.shape())))
        })
        .collect();
    (
        out,
        SweepStats {
            reachable: order.len(),
            visited,
        },
    )
}

/// Gradient of a scalar `output` with respect to each of `wrt`.
pub fn grad_of(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.value().len(), 1, "grad_of needs a scalar output");
    let seed = Var::constant(Array::ones(output.shape()));
    vjp(output, &seed, wrt, create_graph).0
}

/// Like [`grad_of`] but reports non-finite values as errors.
pub fn try_grad_of(output: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    if let Some(p) = output.overflow() {
        return Err(Error::NumericalOverflow { primitive: p });
    }
    let grads = grad_of(output, wrt, create_graph);
    if let Some(p) = grads.iter().find_map(|g| g.overflow()) {
        return Err(Error::NumericalOverflow { primitive: p });
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_visits_each_node_once() {
        let x = Var::leaf(Array::vector(vec![0.3, -0.2]));
        // diamond: x feeds two branches that rejoin
        let a = x.tanh();
        let b = x.square();
        let c = a.mul(&b).add(&a).sum();
        let seed = Var::constant(Array::scalar(1.0));
        let (_, stats) = vjp(&c, &seed, &[x], false);
        assert_eq!(stats.reachable, stats.visited);
        // x, tanh, square, mul, add, sum
        assert_eq!(stats.reachable, 6);
    }

    #[test]
    fn no_grad_builds_no_graph() {
        let x = Var::leaf(Array::scalar(2.0));
        let y = {
            let _g = no_grad();
            x.square()
        };
        assert!(!y.requires_grad());
        assert!(x.square().requires_grad());
    }

    #[test]
    fn overflow_names_primitive() {
        let x = Var::leaf(Array::scalar(0.0));
        let y = x.ln().sum();
        assert_eq!(y.overflow(), Some("log"));
        let err = try_grad_of(&y, &[x], false).unwrap_err();
        assert!(matches!(err, Error::NumericalOverflow { primitive: "log" }));
    }

    #[test]
    fn kinks_use_zero_subgradient() {
        let x = Var::leaf(Array::vector(vec![0.0, 0.0]));
        let y = x.abs().add(&x.relu()).sum();
        let g = grad_of(&y, &[x], false);
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }
}
