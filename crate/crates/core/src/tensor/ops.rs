use std::fmt;
use std::rc::Rc;

use super::kernels::{matmul_raw, transpose_raw};
use super::tape::record;
use super::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Vector-Jacobian product for a user-supplied unary op:
/// `(upstream, input, output) -> input gradient`.
pub type CustomVjp = Rc<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64>>;

pub(crate) enum Op {
    Leaf,
    MatMul,
    Elementwise(ElementwiseKind),
    Scale(f64),
    Exp,
    Log,
    Logistic,
    Tanh,
    Gelu,
    Recip,
    Softmax { axis: usize },
    CausalSoftmax,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { targets: Vec<usize>, probs: Vec<f64> },
    Sum,
    SumLastAxis,
    Transpose,
    Reshape,
    SliceCols { start: usize },
    SliceRows { start: usize },
    ConcatCols,
    Gather { indices: Vec<usize> },
    AddRow,
    RowNorms,
    XLogX,
    Custom(CustomVjp),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Elementwise(_) => "elementwise",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Logistic => "logistic",
            Op::Tanh => "tanh",
            Op::Gelu => "gelu",
            Op::Recip => "recip",
            Op::Softmax { .. } => "softmax",
            Op::CausalSoftmax => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum => "sum",
            Op::SumLastAxis => "sum_last_axis",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols => "concat_cols",
            Op::Gather { .. } => "gather_rows",
            Op::AddRow => "add_row",
            Op::RowNorms => "row_norms",
            Op::XLogX => "xlogx",
            Op::Custom(_) => "custom",
        };
        f.write_str(name)
    }
}

/// Broadcast index: scalars repeat, everything else is 1:1.
#[inline]
fn bidx(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn reduce_to(grad: Vec<f64>, target: &Tensor) -> Vec<f64> {
    if target.numel() == 1 && grad.len() != 1 {
        vec![grad.iter().sum()]
    } else {
        grad
    }
}

/// Splits `shape` around `axis` into (outer, n, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Op {
    pub(crate) fn vjp(
        &self,
        g: &[f64],
        inputs: &[Tensor],
        out: &Tensor,
        need: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let y = out.data();
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = need[0].then(|| {
                    let bt = transpose_raw(b.data(), k, n);
                    matmul_raw(g, m, n, &bt, k)
                });
                let db = need[1].then(|| {
                    let at = transpose_raw(a.data(), m, k);
                    matmul_raw(&at, k, m, g, n)
                });
                vec![da, db]
            }
            Op::Elementwise(kind) => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let da = need[0].then(|| {
                    let full: Vec<f64> = match kind {
                        ElementwiseKind::Add | ElementwiseKind::Sub => g.to_vec(),
                        ElementwiseKind::Mul => {
                            g.iter().enumerate().map(|(i, gi)| gi * bidx(b, i)).collect()
                        }
                        ElementwiseKind::Div => {
                            g.iter().enumerate().map(|(i, gi)| gi / bidx(b, i)).collect()
                        }
                    };
                    reduce_to(full, a)
                });
                let db = need[1].then(|| {
                    let full: Vec<f64> = match kind {
                        ElementwiseKind::Add => g.to_vec(),
                        ElementwiseKind::Sub => g.iter().map(|v| -v).collect(),
                        ElementwiseKind::Mul => {
                            g.iter().enumerate().map(|(i, gi)| gi * bidx(a, i)).collect()
                        }
                        ElementwiseKind::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| -gi * bidx(a, i) / (bidx(b, i) * bidx(b, i)))
                            .collect(),
                    };
                    reduce_to(full, b)
                });
                vec![da, db]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::Exp => vec![Some(g.iter().zip(y).map(|(gi, yi)| gi * yi).collect())],
            Op::Log => {
                let x = inputs[0].data();
                vec![Some(g.iter().zip(x).map(|(gi, xi)| gi / xi).collect())]
            }
            Op::Logistic => vec![Some(
                g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect(),
            )],
            Op::Tanh => vec![Some(
                g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect(),
            )],
            Op::Gelu => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi)).collect(),
                )]
            }
            Op::Recip => vec![Some(
                g.iter().zip(y).map(|(gi, yi)| -gi * yi * yi).collect(),
            )],
            Op::Softmax { axis } => {
                let (outer, n, inner) = axis_extents(out.shape(), *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| o * n * inner + i * inner + r;
                        let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::CausalSoftmax => {
                let t = out.shape()[0];
                let mut dx = vec![0.0; g.len()];
                for i in 0..t {
                    let row = i * t;
                    let dot: f64 = (0..=i).map(|j| g[row + j] * y[row + j]).sum();
                    for j in 0..=i {
                        dx[row + j] = y[row + j] * (g[row + j] - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNorm { xhat, inv_std } => {
                let gain = inputs[1].data();
                let d = gain.len();
                let rows = g.len() / d;
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let s = r * d..(r + 1) * d;
                        let (gr, xr) = (&g[s.clone()], &xhat[s.clone()]);
                        let dxhat: Vec<f64> = gr.iter().zip(gain).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    dx
                });
                let dgain = need[1].then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    acc
                });
                let dbias = need[2].then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j];
                        }
                    }
                    acc
                });
                vec![dx, dgain, dbias]
            }
            Op::CrossEntropy { targets, probs } => {
                let rows = targets.len();
                let v = probs.len() / rows;
                let scale = g[0] / rows as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * v + t] -= scale;
                }
                vec![Some(dx)]
            }
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::SumLastAxis => {
                let c = inputs[0].cols();
                vec![Some(g.iter().flat_map(|&gi| std::iter::repeat_n(gi, c)).collect())]
            }
            Op::Transpose => {
                let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                vec![Some(transpose_raw(g, c, r))]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::SliceCols { start } => {
                let x = &inputs[0];
                let (rows, cols) = (x.rows(), x.cols());
                let w = out.cols();
                let mut dx = vec![0.0; x.numel()];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![Some(dx)]
            }
            Op::SliceRows { start } => {
                let x = &inputs[0];
                let c = x.cols();
                let mut dx = vec![0.0; x.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                vec![Some(dx)]
            }
            Op::ConcatCols => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                inputs
                    .iter()
                    .zip(need)
                    .map(|(part, &needed)| {
                        let w = part.cols();
                        let res = needed.then(|| {
                            let mut d = Vec::with_capacity(part.numel());
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            d
                        });
                        offset += w;
                        res
                    })
                    .collect()
            }
            Op::Gather { indices } => {
                let table = &inputs[0];
                let c = table.cols();
                let mut dt = vec![0.0; table.numel()];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..c {
                        dt[idx * c + j] += g[r * c + j];
                    }
                }
                vec![Some(dt)]
            }
            Op::AddRow => {
                let c = inputs[1].numel();
                let db = need[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc
                });
                vec![need[0].then(|| g.to_vec()), db]
            }
            Op::RowNorms => {
                let x = &inputs[0];
                let c = x.cols();
                let mut dx = vec![0.0; x.numel()];
                for (r, (&gr, &norm)) in g.iter().zip(y).enumerate() {
                    if norm > 0.0 {
                        for j in 0..c {
                            dx[r * c + j] = gr * x.data()[r * c + j] / norm;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::XLogX => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { gi * (xi.ln() + 1.0) } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Custom(rule) => vec![Some(rule(g, inputs[0].data(), y))],
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn logistic_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        record(op, &[self], Tensor::from_parts(self.shape().to_vec(), data))
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Contract(format!(
                "{op} expects a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let data = matmul_raw(self.data(), m, k, other.data(), n);
        Ok(record(
            Op::MatMul,
            &[self, other],
            Tensor::from_parts(vec![m, n], data),
        ))
    }

    /// Pointwise binary op. Shapes must match unless one side has a single
    /// element, which is then broadcast.
    pub fn elementwise(&self, other: &Tensor, kind: ElementwiseKind) -> Result<Tensor> {
        let shape = if self.shape() == other.shape() || other.numel() == 1 {
            self.shape().to_vec()
        } else if self.numel() == 1 {
            other.shape().to_vec()
        } else {
            return Err(Error::dim("elementwise", self.shape(), other.shape()));
        };
        let n: usize = shape.iter().product();
        let f = match kind {
            ElementwiseKind::Add => |a: f64, b: f64| a + b,
            ElementwiseKind::Sub => |a: f64, b: f64| a - b,
            ElementwiseKind::Mul => |a: f64, b: f64| a * b,
            ElementwiseKind::Div => |a: f64, b: f64| a / b,
        };
        let data = (0..n).map(|i| f(bidx(self, i), bidx(other, i))).collect();
        Ok(record(
            Op::Elementwise(kind),
            &[self, other],
            Tensor::from_parts(shape, data),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElementwiseKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElementwiseKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElementwiseKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data().iter().any(|v| *v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "zero divisor".into(),
            });
        }
        self.elementwise(other, ElementwiseKind::Div)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |v| v * c)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Op::Log, f64::ln))
    }

    pub fn logistic(&self) -> Tensor {
        self.unary(Op::Logistic, logistic_scalar)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh, f64::tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        self.unary(Op::Gelu, gelu)
    }

    pub fn recip(&self) -> Result<Tensor> {
        if self.data().iter().any(|v| *v == 0.0) {
            return Err(Error::Domain {
                op: "recip",
                detail: "zero input".into(),
            });
        }
        Ok(self.unary(Op::Recip, |v| 1.0 / v))
    }

    /// `x ln x` with the continuous extension `0 ln 0 = 0`.
    pub fn xlogx(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain {
                op: "xlogx",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(Op::XLogX, |v| if v > 0.0 { v * v.ln() } else { 0.0 }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, n, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + r;
                let max = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[at(i)] /= z;
                }
            }
        }
        Ok(record(
            Op::Softmax { axis },
            &[self],
            Tensor::from_parts(self.shape().to_vec(), out),
        ))
    }

    /// Row-wise softmax of a square matrix where row `i` only sees columns
    /// `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&self) -> Result<Tensor> {
        let (t, c) = self.require_matrix("causal_softmax")?;
        if t != c {
            return Err(Error::dim("causal_softmax", self.shape(), &[t, t]));
        }
        let x = self.data();
        let mut out = vec![0.0; t * t];
        for i in 0..t {
            let row = &x[i * t..i * t + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * t + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * t + j] /= z;
            }
        }
        Ok(record(
            Op::CausalSoftmax,
            &[self],
            Tensor::from_parts(vec![t, t], out),
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        if gain.numel() != d || bias.numel() != d {
            return Err(Error::dim("layer_norm", self.shape(), gain.shape()));
        }
        if !(eps > 0.0) {
            return Err(Error::Domain {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let rows = self.numel() / d;
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gain.data()[j] + bias.data()[j];
            }
        }
        Ok(record(
            Op::LayerNorm { xhat, inv_std },
            &[self, gain, bias],
            Tensor::from_parts(self.shape().to_vec(), out),
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self` (shape `[t, v]`), computed through log-sum-exp.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (t, v) = self.require_matrix("cross_entropy")?;
        if targets.len() != t {
            return Err(Error::dim("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&k| k >= v) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                bound: v,
            });
        }
        let x = self.data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|a| (a - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[target];
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        Ok(record(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
            &[self],
            Tensor::scalar(total / t as f64),
        ))
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        Ok(record(Op::Sum, &[self], Tensor::scalar(s)))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        Ok(self.sum()?.scale(1.0 / n))
    }

    /// Sums the last axis: `[r, c] -> [r]`.
    pub fn sum_last_axis(&self) -> Result<Tensor> {
        let c = self.cols();
        let data: Vec<f64> = self.data().chunks(c).map(|row| row.iter().sum()).collect();
        let shape = if self.ndim() <= 1 {
            vec![1]
        } else {
            self.shape()[..self.ndim() - 1].to_vec()
        };
        Ok(record(Op::SumLastAxis, &[self], Tensor::from_parts(shape, data)))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let data = transpose_raw(self.data(), r, c);
        Ok(record(Op::Transpose, &[self], Tensor::from_parts(vec![c, r], data)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        Ok(record(
            Op::Reshape,
            &[self],
            Tensor::from_parts(shape.to_vec(), self.to_vec()),
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = self.require_matrix("slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::Index {
                what: "slice_cols end",
                index: end,
                bound: cols,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&self.data()[r * cols + start..r * cols + end]);
        }
        Ok(record(
            Op::SliceCols { start },
            &[self],
            Tensor::from_parts(vec![rows, w], data),
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = self.require_matrix("slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::Index {
                what: "slice_rows end",
                index: end,
                bound: rows,
            });
        }
        let data = self.data()[start * cols..end * cols].to_vec();
        Ok(record(
            Op::SliceRows { start },
            &[self],
            Tensor::from_parts(vec![end - start, cols], data),
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = first.require_matrix("concat_cols")?.0;
        for p in parts {
            if p.require_matrix("concat_cols")?.0 != rows {
                return Err(Error::dim("concat_cols", first.shape(), p.shape()));
            }
        }
        let total: usize = parts.iter().map(Tensor::cols).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(record(
            Op::ConcatCols,
            &refs,
            Tensor::from_parts(vec![rows, total], data),
        ))
    }

    /// Selects rows of a `[n, c]` table: the embedding lookup.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (n, c) = self.require_matrix("gather_rows")?;
        if indices.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= n {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(record(
            Op::Gather {
                indices: indices.to_vec(),
            },
            &[self],
            Tensor::from_parts(vec![indices.len(), c], data),
        ))
    }

    /// Adds the vector `row` to every row of a matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, c) = self.require_matrix("add_row")?;
        if row.numel() != c {
            return Err(Error::dim("add_row", self.shape(), row.shape()));
        }
        let data = self
            .data()
            .chunks(c)
            .flat_map(|r| r.iter().zip(row.data()).map(|(a, b)| a + b))
            .collect();
        Ok(record(
            Op::AddRow,
            &[self, row],
            Tensor::from_parts(self.shape().to_vec(), data),
        ))
    }

    /// Euclidean norm of each row: `[r, c] -> [r]`. Zero rows have a zero
    /// subgradient.
    pub fn row_norms(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("row_norms")?;
        let data = self
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(record(Op::RowNorms, &[self], Tensor::from_parts(vec![r], data)))
    }

    /// Pointwise op with caller-provided forward map and gradient rule.
    pub fn custom_unary(
        &self,
        forward: impl Fn(f64) -> f64,
        vjp: CustomVjp,
    ) -> Tensor {
        self.unary(Op::Custom(vjp), forward)
    }
}
