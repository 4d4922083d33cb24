//! Reverse-mode gradient tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in exact reverse order of recording, so gradient accumulation is
//! deterministic for a fixed sequence of calls.

use super::{NumError, Tensor};
use libm::erf;

const LN_EPS: f64 = 1e-5;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddBroadcast { a: Var, b: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumAxis { a: Var, outer: usize, len: usize, inner: usize },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Reshape(Var),
    Gather { a: Var, index: Vec<usize> },
    Concat { inputs: Vec<Var>, outer: usize, blocks: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var`
    /// does not influence the loss or does not require gradients.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.clone()))
    }

    /// Like [`Gradients::get`] but yields zeros for unreached variables.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), NumError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite { op })
    }
}

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, b, c, (m, k, n), (k as isize, 1), (n as isize, 1));
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    gemm(a, b, c, (m, n, k), (n as isize, 1), (1, n as isize));
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, b, c, (k, m, n), (1, k as isize), (n as isize, 1));
}

/// Row-major `c[m×n] += A[m×k] · B[k×n]` with arbitrary strides on A and B.
fn gemm(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    (m, k, n): (usize, usize, usize),
    (rsa, csa): (isize, isize),
    (rsb, csb): (isize, isize),
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the extents checked above cover every index the kernel
    // touches for these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var, NumError> {
        check_finite(name, &data)?;
        Ok(self.push(Tensor::from_parts(shape, data), op, needs_grad))
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var, NumError> {
        check_finite("leaf", tensor.data())?;
        let needs = tensor.requires_grad();
        Ok(self.push(tensor, Op::Leaf, needs))
    }

    /// Records a copy of a trainable parameter.
    pub fn param(&mut self, tensor: &Tensor) -> Result<Var, NumError> {
        self.leaf(tensor.clone().with_grad())
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var, NumError> {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Matrix product over the last axis of `a` and a 2-D `b`:
    /// `[..., k] × [k, n] → [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        self.push_checked("matmul", shape, out, Op::MatMul { a, b, m, k, n }, needs)
    }

    /// Batched matrix product `[g, m, k] × [g, k, n] → [g, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(NumError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for gi in 0..g {
                gemm_nn(
                    &av[gi * m * k..(gi + 1) * m * k],
                    &bv[gi * k * n..(gi + 1) * k * n],
                    &mut out[gi * m * n..(gi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push_checked(
            "bmm",
            vec![g, m, n],
            out,
            Op::BatchMatMul { a, b, g, m, k, n },
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push_checked("add", shape, out, Op::Add(a, b), needs)
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix
    /// of `a`'s shape (bias vectors, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NumError::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(b).data();
        let block = bv.len();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(block) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push_checked("add_broadcast", shape, out, Op::AddBroadcast { a, b }, needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push_checked("mul", shape, out, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push_checked("scale", shape, out, Op::Scale(a, c), needs)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push_checked("sum", Vec::new(), vec![s], Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(), NumError> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(NumError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        self.check_axis("sum_axis", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_geometry(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let needs = self.needs(a);
        self.push_checked(
            "sum_axis",
            new_shape,
            out,
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            },
            needs,
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_geometry(&shape, axis);
        let out = softmax_along(self.value(a).data(), outer, len, inner, false);
        let needs = self.needs(a);
        self.push_checked(
            "softmax",
            shape,
            out,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            needs,
        )
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        self.check_axis("log_softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_geometry(&shape, axis);
        let out = softmax_along(self.value(a).data(), outer, len, inner, true);
        let needs = self.needs(a);
        self.push_checked(
            "log_softmax",
            shape,
            out,
            Op::LogSoftmax {
                a,
                outer,
                len,
                inner,
            },
            needs,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(NumError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push_checked(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumError> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push_checked("gelu", shape, out, Op::Gelu(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), needs))
    }

    /// `out[i] = a.flat[index[i]]`, reshaped to `shape`. Backward
    /// scatter-adds, so repeated indices broadcast correctly.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var, NumError> {
        let n: usize = shape.iter().product();
        let src = self.value(a).data();
        if n != index.len() || index.iter().any(|&i| i >= src.len()) {
            return Err(NumError::Contract(format!(
                "gather: {} indices for output shape {shape:?} over {} values",
                index.len(),
                src.len()
            )));
        }
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather { a, index },
            needs,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NumError> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(NumError::Contract(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n: usize = out_shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        for _ in 0..n {
            index.push(
                counter
                    .iter()
                    .zip(perm)
                    .map(|(&c, &p)| c * in_strides[p])
                    .sum(),
            );
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(a, index, &out_shape)
    }

    /// Slice `[start, start+len)` along `axis`, keeping the axis.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumError> {
        self.check_axis("narrow", a, axis)?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(NumError::Contract(format!(
                "narrow: range {start}..{} out of bounds for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_geometry(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, index, &out_shape)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumError> {
        let first = *inputs.first().ok_or_else(|| NumError::Contract("concat of nothing".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_geometry(&base, axis);
        let blocks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let row: usize = blocks.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                blocks,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        // Only leaf gradients are meaningful to callers; drop the rest.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *g = None;
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm_nt(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm_tn(av, g, gb, m, k, n);
                }
            }
            Op::BatchMatMul { a, b, g: groups, m, k, n } => {
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for gi in 0..groups {
                        gemm_nt(
                            &g[gi * m * n..(gi + 1) * m * n],
                            &bv[gi * k * n..(gi + 1) * k * n],
                            &mut ga[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for gi in 0..groups {
                        gemm_tn(
                            &av[gi * m * k..(gi + 1) * m * k],
                            &g[gi * m * n..(gi + 1) * m * n],
                            &mut gb[gi * k * n..(gi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.grad_slot(grads, *v) {
                        for (o, x) in gv.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let block = gb.len();
                    for chunk in g.chunks(block) {
                        for (o, x) in gb.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x * c;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::SumAxis { a, outer, len, inner } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in 0..*outer {
                        for l in 0..*len {
                            let base = (o * len + l) * inner;
                            for i in 0..*inner {
                                ga[base + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..*len {
                                ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { a, outer, len, inner } => {
                let y = node.value.data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let gsum: f64 = (0..*len).map(|l| g[at(l)]).sum();
                            for l in 0..*len {
                                ga[at(l)] += g[at(l)] - y[at(l)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                let rows = rstd.len();
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let off = r * d;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[off + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[off + j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            gx[off + j] += rstd[r] * (dxhat[j] - mean_d - xhat[off + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, x), &xv) in ga.iter_mut().zip(g).zip(av) {
                        *o += x * gelu_grad_scalar(xv);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (&i, x) in index.iter().zip(g) {
                        ga[i] += x;
                    }
                }
            }
            Op::Concat { inputs, outer, blocks } => {
                let row: usize = blocks.iter().sum();
                let mut offset = 0;
                for (&v, &blk) in inputs.iter().zip(blocks) {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + blk];
                            for (d, s) in gv[o * blk..(o + 1) * blk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += blk;
                }
            }
        }
    }
}

fn softmax_along(src: &[f64], outer: usize, len: usize, inner: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|l| (src[at(l)] - max).exp()).sum();
            if log {
                let lz = z.ln();
                for l in 0..len {
                    out[at(l)] = src[at(l)] - max - lz;
                }
            } else {
                for l in 0..len {
                    out[at(l)] = (src[at(l)] - max).exp() / z;
                }
            }
        }
    }
    out
}

/// Softmax of a plain slice; used outside the tape for inference.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    softmax_along(x, 1, x.len(), 1, false)
}
