//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological sort. `backward` walks it once in reverse. Gradients of
//! tracked leaves accumulate across calls until [`Graph::zero_grad`].

use super::gemm::{gemm, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    BatchCov {
        f: Var,
        g: Var,
    },
    Trace(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Tracked leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, if any has been computed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: name.into() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{name}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    fn check_axis(&self, name: &str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Dimension(format!(
                "{name}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes the last two axes.
    /// Both operands are rank 2, or both rank 3 with equal leading batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch =
            || Error::Dimension(format!("matmul: shapes {sa:?} and {sb:?} do not compose"));
        let (batch, ar, ac, br, bc) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(mismatch()),
        };
        let av = View::of(ar, ac, ta);
        let bv = View::of(br, bc, tb);
        if av.cols != bv.rows {
            return Err(mismatch());
        }
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (asz, bsz, csz) = (ar * ac, br * bc, m * n);
        for i in 0..batch {
            gemm(
                1.0,
                &ad[i * asz..(i + 1) * asz],
                av,
                &bd[i * bsz..(i + 1) * bsz],
                bv,
                0.0,
                &mut out[i * csz..(i + 1) * csz],
                View::of(m, n, false),
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        self.push("matmul", &shape, out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    fn zip(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, &shape, data, op, &[a, b])
    }

    fn map(&mut self, name: &str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, &shape, data, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector along the last axis of `x` (the only broadcast supported).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::Dimension(format!(
                "add_bias: bias {sb:?} does not match {sx:?}"
            )));
        }
        let c = sb[0];
        let bd = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % c])
            .collect();
        self.push("add_bias", &sx, data, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, |v| v * c, Op::Scale { x, c })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map("square", x, |v| v * v, Op::Square(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for k in 0..inner {
                let at = |i: usize| (o * len + i) * inner + k;
                let max = (0..len)
                    .map(|i| xd[at(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (xd[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[at(i)] /= sum;
                }
            }
        }
        self.push("softmax", &shape, out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes along `axis`, then applies per-position gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        for p in [gamma, beta] {
            if self.shape(p) != [len] {
                return Err(Error::Dimension(format!(
                    "layer_norm: affine parameter {:?} does not match axis length {len}",
                    self.shape(p)
                )));
            }
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..inner {
                let at = |i: usize| (o * len + i) * inner + k;
                let mean = (0..len).map(|i| xd[at(i)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|i| (xd[at(i)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[o * inner + k] = r;
                for i in 0..len {
                    let h = (xd[at(i)] - mean) * r;
                    xhat[at(i)] = h;
                    out[at(i)] = gd[i] * h + bd[i];
                }
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
            xhat,
            rstd,
        };
        self.push("layer_norm", &shape, out, op, &[x, gamma, beta])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat: no operands".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Dimension(format!(
                    "concat: shape {s:?} incompatible with {base:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        self.push(
            "concat",
            &shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let count: usize = shape.iter().product();
        if count != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).data().to_vec();
        self.push("reshape", shape, data, Op::Reshape(x), &[x])
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start > end || end > shape[axis] {
            return Err(Error::Dimension(format!(
                "slice: range {start}..{end} out of bounds for axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        self.push("slice", &new_shape, out, Op::Slice { x, axis, start }, &[x])
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for k in 0..inner {
                    out[o * inner + k] += xd[(o * len + i) * inner + k];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut new_shape = shape;
        new_shape.remove(axis);
        self.push("mean", &new_shape, out, Op::Mean { x, axis }, &[x])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", &[], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Cross-covariance of `f: n x b` and `g: m x b` over the batch axis,
    /// centered by the batch means and scaled by `1/b`.
    pub fn batch_covariance(&mut self, f: Var, g: Var) -> Result<Var> {
        let (sf, sg) = (self.shape(f).to_vec(), self.shape(g).to_vec());
        if sf.len() != 2 || sg.len() != 2 || sf[1] != sg[1] || sf[1] == 0 {
            return Err(Error::Dimension(format!(
                "batch_covariance: shapes {sf:?} and {sg:?} must be n x b and m x b"
            )));
        }
        let b = sf[1];
        let fc = centered_rows(self.value(f).data(), sf[0], b);
        let gc = centered_rows(self.value(g).data(), sg[0], b);
        let mut out = vec![0.0; sf[0] * sg[0]];
        gemm(
            1.0 / b as f64,
            &fc,
            View::of(sf[0], b, false),
            &gc,
            View::of(sg[0], b, true),
            0.0,
            &mut out,
            View::of(sf[0], sg[0], false),
        );
        self.push(
            "batch_covariance",
            &[sf[0], sg[0]],
            out,
            Op::BatchCov { f, g },
            &[f, g],
        )
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Dimension(format!(
                "trace: shape {s:?} is not square"
            )));
        }
        let xd = self.value(x).data();
        let t = (0..s[0]).map(|i| xd[i * s[0] + i]).sum();
        self.push("trace", &[], vec![t], Op::Trace(x), &[x])
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => {
                return Err(Error::Dimension(format!(
                    "transpose: unsupported shape {s:?}"
                )))
            }
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = xd[off + i * c + j];
                }
            }
        }
        let shape = if s.len() == 2 {
            vec![c, r]
        } else {
            vec![batch, c, r]
        };
        self.push("transpose", &shape, out, Op::Transpose(x), &[x])
    }

    /// `x * w^T + b` over the last axis of a rank-2 `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w, false, true)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar `loss`, accumulating into tracked leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                let slot = &mut self.leaf_grads[idx];
                match slot {
                    Some(t) => t.data_mut().iter_mut().zip(&gy).for_each(|(a, b)| *a += b),
                    None => *slot = Some(Tensor::new(node.value.shape(), gy)?),
                }
                continue;
            }
            self.backprop_node(idx, &gy, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, ar, ac, br, bc) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[0], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[1], sb[2])
                };
                let av = View::of(ar, ac, *ta);
                let bv = View::of(br, bc, *tb);
                let cv = View::of(av.rows, bv.cols, false);
                let (asz, bsz, csz) = (ar * ac, br * bc, av.rows * bv.cols);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], ad.len());
                    for i in 0..batch {
                        gemm(
                            1.0,
                            &gy[i * csz..(i + 1) * csz],
                            cv,
                            &bd[i * bsz..(i + 1) * bsz],
                            bv.t(),
                            1.0,
                            &mut ga[i * asz..(i + 1) * asz],
                            av,
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], bd.len());
                    for i in 0..batch {
                        gemm(
                            1.0,
                            &ad[i * asz..(i + 1) * asz],
                            av.t(),
                            &gy[i * csz..(i + 1) * csz],
                            cv,
                            1.0,
                            &mut gb[i * bsz..(i + 1) * bsz],
                            bv,
                        );
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], gy.len());
                    ga.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], gy.len());
                    gb.iter_mut().zip(gy).for_each(|(g, d)| *g += sign * d);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], gy.len());
                    for i in 0..gy.len() {
                        ga[i] += gy[i] * bd[i];
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], gy.len());
                    for i in 0..gy.len() {
                        gb[i] += gy[i] * ad[i];
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], gy.len());
                    gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let gb = accumulate(&mut grads[bias.0], c);
                    for (i, d) in gy.iter().enumerate() {
                        gb[i % c] += d;
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = accumulate(&mut grads[x.0], gy.len());
                gx.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d);
            }
            Op::Tanh(x) => {
                let gx = accumulate(&mut grads[x.0], gy.len());
                for i in 0..gy.len() {
                    gx[i] += gy[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let gx = accumulate(&mut grads[x.0], gy.len());
                for i in 0..gy.len() {
                    if xd[i] > 0.0 {
                        gx[i] += gy[i];
                    }
                }
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                let gx = accumulate(&mut grads[x.0], gy.len());
                for i in 0..gy.len() {
                    gx[i] += 2.0 * xd[i] * gy[i];
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let gx = accumulate(&mut grads[x.0], gy.len());
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + k;
                        let dot: f64 = (0..len).map(|i| gy[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            gx[at(i)] += y[at(i)] * (gy[at(i)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let gd = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], len);
                    for (j, (d, h)) in gy.iter().zip(xhat).enumerate() {
                        gg[(j / inner) % len] += d * h;
                    }
                }
                if self.wants(*beta) {
                    let gb = accumulate(&mut grads[beta.0], len);
                    for (j, d) in gy.iter().enumerate() {
                        gb[(j / inner) % len] += d;
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], gy.len());
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + k;
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for i in 0..len {
                                let dh = gy[at(i)] * gd[i];
                                m1 += dh;
                                m2 += dh * xhat[at(i)];
                            }
                            m1 /= len as f64;
                            m2 /= len as f64;
                            let r = rstd[o * inner + k];
                            for i in 0..len {
                                let dh = gy[at(i)] * gd[i];
                                gx[at(i)] += r * (dh - m1 - xhat[at(i)] * m2);
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.wants(p) {
                        let n = self.value(p).len();
                        let gp = accumulate(&mut grads[p.0], n);
                        let block = len * inner;
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (g, d) in gp[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&gy[src..src + block])
                            {
                                *g += d;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                let gx = accumulate(&mut grads[x.0], gy.len());
                gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = split_axis(xs, *axis);
                let width = node.value.shape()[*axis];
                let gx = accumulate(&mut grads[x.0], outer * len * inner);
                let block = width * inner;
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    for (g, d) in gx[dst..dst + block]
                        .iter_mut()
                        .zip(&gy[o * block..(o + 1) * block])
                    {
                        *g += d;
                    }
                }
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let gx = accumulate(&mut grads[x.0], outer * len * inner);
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    for i in 0..len {
                        for k in 0..inner {
                            gx[(o * len + i) * inner + k] += gy[o * inner + k] * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let gx = accumulate(&mut grads[x.0], n);
                gx.iter_mut().for_each(|g| *g += gy[0]);
            }
            Op::BatchCov { f, g } => {
                let (sf, sg) = (self.shape(*f), self.shape(*g));
                let (n, m, b) = (sf[0], sg[0], sf[1]);
                let scale = 1.0 / b as f64;
                let dyv = View::of(n, m, false);
                if self.wants(*f) {
                    let gc = centered_rows(self.value(*g).data(), m, b);
                    let gf = accumulate(&mut grads[f.0], n * b);
                    gemm(
                        scale,
                        gy,
                        dyv,
                        &gc,
                        View::of(m, b, false),
                        1.0,
                        gf,
                        View::of(n, b, false),
                    );
                }
                if self.wants(*g) {
                    let fc = centered_rows(self.value(*f).data(), n, b);
                    let gg = accumulate(&mut grads[g.0], m * b);
                    gemm(
                        scale,
                        gy,
                        dyv.t(),
                        &fc,
                        View::of(n, b, false),
                        1.0,
                        gg,
                        View::of(m, b, false),
                    );
                }
            }
            Op::Trace(x) => {
                let s = self.shape(*x)[0];
                let gx = accumulate(&mut grads[x.0], s * s);
                for i in 0..s {
                    gx[i * s + i] += gy[0];
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (batch, r, c) = if s.len() == 2 {
                    (1, s[0], s[1])
                } else {
                    (s[0], s[1], s[2])
                };
                let gx = accumulate(&mut grads[x.0], batch * r * c);
                for bi in 0..batch {
                    let off = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            gx[off + i * c + j] += gy[off + j * r + i];
                        }
                    }
                }
            }
        }
    }
}

fn centered_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    out
}
