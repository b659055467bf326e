//! Reverse-mode differentiation over a flat recording tape.
//!
//! Every operation appends one node holding its forward value, so inputs
//! always precede their consumers and the backward pass is a single reverse
//! sweep in recording order. A tape lives for one loss evaluation and is
//! rebuilt from scratch for the next one; gradients never flow across tapes.
//!
//! Forward values are checked for finiteness as they are recorded, so a NaN
//! or infinity surfaces as an error naming the operation instead of silently
//! propagating.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dims2, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Elementwise minimum; at ties the gradient splits 50/50 between
    /// the arguments.
    Min(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Matmul(NodeId, NodeId),
    Exp(NodeId),
    Softmax(NodeId, usize),
    Clamp(NodeId, T, T),
    /// Extract column `j` of a rank-2 tensor as a vector.
    Col(NodeId, usize),
    /// Per-column min-max rescale of a rank-2 tensor; constant columns map
    /// to zeros. The flag selects whether gradients flow through the min/max
    /// selections or treat them as constants.
    MinMaxNormCols(NodeId, bool),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recording tape. Single-threaded; parallelism happens one tape per run.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradient buffers keyed by node id, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the backward root with respect to `id`, if `id` was
    /// reachable from the root.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Leaves are the only nodes without parents.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        id
    }

    /// Forward value of a recorded node.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.node(id).map(|n| &n.value)
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or(Error::InvalidNode {
            id: id.0,
            len: self.nodes.len(),
        })
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: impl Fn(NodeId, NodeId) -> Op<T>,
    ) -> Result<NodeId> {
        let va = &self.node(a)?.value;
        let vb = &self.node(b)?.value;
        let value = va.zip_with(vb, name, f)?;
        self.push(op(a, b), value, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("min", a, b, |x, y| x.min(y), Op::Min)
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale".into() });
        }
        let value = self.node(a)?.value.map(|x| x * factor);
        self.push(Op::Scale(a, factor), value, "scale")
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.node(a)?.value.sum());
        self.push(Op::Sum(a), value, "sum")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let va = &self.node(a)?.value;
            let vb = &self.node(b)?.value;
            va.matmul(vb)?
        };
        self.push(Op::Matmul(a, b), value, "matmul")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.node(a)?.value.map(|x| x.exp());
        self.push(Op::Exp(a), value, "exp")
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = {
            let va = &self.node(a)?.value;
            let rank = va.shape().len();
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            softmax_forward(va, axis)
        };
        self.push(Op::Softmax(a, axis), value, "softmax")
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> Result<NodeId> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidParam {
                name: "clamp",
                reason: format!("invalid bounds [{lo}, {hi}]"),
            });
        }
        let value = self.node(a)?.value.map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp(a, lo, hi), value, "clamp")
    }

    /// Column `j` of a rank-2 node as a vector node.
    pub fn col(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let value = {
            let va = &self.node(a)?.value;
            let (m, n) = dims2(va, "col")?;
            if j >= n {
                return Err(Error::InvalidParam {
                    name: "col",
                    reason: format!("column {j} out of range for {n} columns"),
                });
            }
            let data = (0..m).map(|i| va.data()[i * n + j]).collect();
            Tensor::new(vec![m], data)?
        };
        self.push(Op::Col(a, j), value, "col")
    }

    /// Per-column min-max rescale to [0, 1]; constant columns become zeros.
    ///
    /// With `through_extrema` the attaining min/max entries receive the
    /// selection gradient (split equally over ties); without it the extrema
    /// are treated as constants and only the direct 1/range term flows.
    pub fn minmax_normalize_cols(&mut self, a: NodeId, through_extrema: bool) -> Result<NodeId> {
        let value = {
            let va = &self.node(a)?.value;
            let (m, n) = dims2(va, "minmax_normalize_cols")?;
            let mut data = vec![T::zero(); m * n];
            for j in 0..n {
                let (lo, hi) = column_extrema(va.data(), m, n, j);
                let range = hi - lo;
                if range > T::zero() {
                    for i in 0..m {
                        data[i * n + j] = (va.data()[i * n + j] - lo) / range;
                    }
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        self.push(
            Op::MinMaxNormCols(a, through_extrema),
            value,
            "minmax_normalize_cols",
        )
    }

    /// Gradient of scalar node `root` with respect to every reachable node,
    /// seeded with 1 at the root and swept in reverse recording order.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let root_node = self.node(root)?;
        if !root_node.value.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(root_node.value.ones_like());

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g)?;
                    accumulate(&mut grads, *b, &g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g)?;
                    let neg = g.map(|x| -x);
                    accumulate(&mut grads, *b, &neg)?;
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    accumulate(&mut grads, *a, &g.zip_with(vb, "mul", |gi, v| gi * v)?)?;
                    accumulate(&mut grads, *b, &g.zip_with(va, "mul", |gi, v| gi * v)?)?;
                }
                Op::Div(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    accumulate(&mut grads, *a, &g.zip_with(vb, "div", |gi, v| gi / v)?)?;
                    let gb_data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                        .collect();
                    let gb = Tensor::new(vb.shape().to_vec(), gb_data)?;
                    accumulate(&mut grads, *b, &gb)?;
                }
                Op::Min(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let half = T::cast(0.5);
                    let pick = |mine: T, other: T, gi: T| {
                        if mine < other {
                            gi
                        } else if mine > other {
                            T::zero()
                        } else {
                            half * gi
                        }
                    };
                    let ga_data: Vec<T> = va
                        .data()
                        .iter()
                        .zip(vb.data().iter().zip(g.data()))
                        .map(|(&x, (&y, &gi))| pick(x, y, gi))
                        .collect();
                    let gb_data: Vec<T> = va
                        .data()
                        .iter()
                        .zip(vb.data().iter().zip(g.data()))
                        .map(|(&x, (&y, &gi))| pick(y, x, gi))
                        .collect();
                    accumulate(&mut grads, *a, &Tensor::new(va.shape().to_vec(), ga_data)?)?;
                    accumulate(&mut grads, *b, &Tensor::new(vb.shape().to_vec(), gb_data)?)?;
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, &g.map(|x| x * *s))?;
                }
                Op::Sum(a) => {
                    let va = &self.nodes[a.0].value;
                    let gv = g.item();
                    accumulate(&mut grads, *a, &Tensor::full(va.shape(), gv))?;
                }
                Op::Matmul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (m, k) = dims2(va, "matmul")?;
                    let (_, n) = dims2(vb, "matmul")?;
                    // dA = G * B^T, dB = A^T * G
                    let mut ga = vec![T::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            for p in 0..k {
                                ga[i * k + p] += gij * vb.data()[p * n + j];
                            }
                        }
                    }
                    let mut gb = vec![T::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va.data()[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * g.data()[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &Tensor::new(vec![m, k], ga)?)?;
                    accumulate(&mut grads, *b, &Tensor::new(vec![k, n], gb)?)?;
                }
                Op::Exp(a) => {
                    let out = &self.nodes[idx].value;
                    accumulate(&mut grads, *a, &g.zip_with(out, "exp", |gi, e| gi * e)?)?;
                }
                Op::Softmax(a, axis) => {
                    let out = &self.nodes[idx].value;
                    let ga = softmax_backward(out, &g, *axis)?;
                    accumulate(&mut grads, *a, &ga)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let va = &self.nodes[a.0].value;
                    let ga_data: Vec<T> = va
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(
                            |(&x, &gi)| {
                                if x >= *lo && x <= *hi {
                                    gi
                                } else {
                                    T::zero()
                                }
                            },
                        )
                        .collect();
                    accumulate(&mut grads, *a, &Tensor::new(va.shape().to_vec(), ga_data)?)?;
                }
                Op::Col(a, j) => {
                    let va = &self.nodes[a.0].value;
                    let (m, n) = dims2(va, "col")?;
                    let mut ga = vec![T::zero(); m * n];
                    for i in 0..m {
                        ga[i * n + j] = g.data()[i];
                    }
                    accumulate(&mut grads, *a, &Tensor::new(vec![m, n], ga)?)?;
                }
                Op::MinMaxNormCols(a, through_extrema) => {
                    let va = &self.nodes[a.0].value;
                    let out = &self.nodes[idx].value;
                    let ga = minmax_backward(va, out, &g, *through_extrema)?;
                    accumulate(&mut grads, *a, &ga)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    contribution: &Tensor<T>,
) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            *existing = existing.zip_with(contribution, "grad accumulate", |a, b| a + b)?;
        }
        slot @ None => {
            *slot = Some(contribution.clone());
        }
    }
    Ok(())
}

fn column_extrema<T: Scalar>(data: &[T], m: usize, n: usize, j: usize) -> (T, T) {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for i in 0..m {
        let v = data[i * n + j];
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn softmax_forward<T: Scalar>(v: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = v.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut data = v.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(data[base + k * inner]);
            }
            let mut total = T::zero();
            for k in 0..len {
                let e = (data[base + k * inner] - max).exp();
                data[base + k * inner] = e;
                total += e;
            }
            for k in 0..len {
                data[base + k * inner] /= total;
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("softmax output is finite")
}

fn softmax_backward<T: Scalar>(out: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = out.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut ga = vec![T::zero(); out.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                let idx = base + k * inner;
                dot += g.data()[idx] * out.data()[idx];
            }
            for k in 0..len {
                let idx = base + k * inner;
                ga[idx] = out.data()[idx] * (g.data()[idx] - dot);
            }
        }
    }
    Tensor::new(shape.to_vec(), ga)
}

fn minmax_backward<T: Scalar>(
    input: &Tensor<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    through_extrema: bool,
) -> Result<Tensor<T>> {
    let (m, n) = dims2(input, "minmax_normalize_cols")?;
    let mut ga = vec![T::zero(); m * n];
    for j in 0..n {
        let (lo, hi) = column_extrema(input.data(), m, n, j);
        let range = hi - lo;
        if range <= T::zero() {
            continue; // constant column: forward is all-zero, gradient is zero
        }
        let mut g_sum = T::zero();
        let mut g_dot_out = T::zero();
        for i in 0..m {
            let idx = i * n + j;
            ga[idx] = g.data()[idx] / range;
            g_sum += g.data()[idx];
            g_dot_out += g.data()[idx] * out.data()[idx];
        }
        if through_extrema {
            let min_ids: Vec<usize> = (0..m).filter(|&i| input.data()[i * n + j] == lo).collect();
            let max_ids: Vec<usize> = (0..m).filter(|&i| input.data()[i * n + j] == hi).collect();
            let to_min = (g_dot_out - g_sum) / range / T::cast(min_ids.len() as f64);
            let to_max = -g_dot_out / range / T::cast(max_ids.len() as f64);
            for &i in &min_ids {
                ga[i * n + j] += to_min;
            }
            for &i in &max_ids {
                ga[i * n + j] += to_max;
            }
        }
    }
    Tensor::new(vec![m, n], ga)
}
