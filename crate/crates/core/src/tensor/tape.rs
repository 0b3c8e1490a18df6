use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, sigmoid};
use super::{Csr, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    SoftmaxRows(Var),
    Reduce {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MulConst(Var, Vec<f64>),
    GatherRows(Var, Arc<Vec<Option<usize>>>),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Spmm(Arc<Csr>, Var),
    SegmentReduce {
        x: Var,
        offsets: Arc<Vec<usize>>,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        q_offsets: Arc<Vec<usize>>,
        k_offsets: Arc<Vec<usize>>,
        heads: usize,
        probs: Vec<f64>,
    },
    Mse(Var, Vec<f64>),
    Mae(Var, Vec<f64>),
    BceLogits(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        classes: Vec<usize>,
        softmax: Vec<f64>,
    },
    KlNormal(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is a
/// topological order of the computation DAG and backward simply walks it
/// in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    kink_margin: f64,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// Gradient of `v`, zeros when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check_offsets(op: &'static str, offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.len() < 2
        || offsets[0] != 0
        || *offsets.last().unwrap() != rows
        || offsets.windows(2).any(|w| w[1] < w[0])
    {
        return Err(Error::InvalidArgument(format!(
            "{op}: segment offsets {offsets:?} do not partition {rows} rows"
        )));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            kink_margin: f64::INFINITY,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any relu input, max-reduction gap, or absolute
    /// residual to a point of non-differentiability seen so far.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        self.precision.round(value.data_mut());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        mut value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        self.precision.round(value.data_mut());
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn note_kink(&mut self, margin: f64) {
        if margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k) = matrix_dims("matmul", av)?;
        let (k2, c) = matrix_dims("matmul", bv)?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; r * c];
        kernels::matmul_nn(av.data(), bv.data(), &mut out, r, k, c);
        self.push(
            "matmul",
            Tensor::matrix(r, c, out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k) = matrix_dims("matmul_nt", av)?;
        let (c, k2) = matrix_dims("matmul_nt", bv)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; r * c];
        kernels::matmul_nt(av.data(), bv.data(), &mut out, r, k, c);
        self.push(
            "matmul_nt",
            Tensor::matrix(r, c, out)?,
            Op::MatMulNt(a, b),
            &[a, b],
        )
    }

    /// Sparse-dense product `adj * x`; `adj` is treated as a constant.
    pub fn spmm(&mut self, adj: Arc<Csr>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = matrix_dims("spmm", xv)?;
        if adj.cols() != r {
            return Err(Error::shape("spmm", &[adj.rows(), adj.cols()], xv.shape()));
        }
        let mut out = vec![0.0; adj.rows() * c];
        adj.spmm_into(xv.data(), c, &mut out);
        let t = Tensor::matrix(adj.rows(), c, out)?;
        self.push("spmm", t, Op::Spmm(adj, x), &[x])
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (r, c) = matrix_dims("add_row", av)?;
        if rv.shape() != [1, c] {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut data = av.data().to_vec();
        for i in 0..r {
            add_into(&mut data[i * c..(i + 1) * c], rv.data());
        }
        self.push(
            "add_row",
            Tensor::matrix(r, c, data)?,
            Op::AddRow(a, row),
            &[a, row],
        )
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("scale_by", self.value(a).shape(), sv.shape()));
        }
        let k = sv.data()[0];
        let av = self.value(a);
        let t = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| k * x).collect(),
        )?;
        self.push("scale_by", t, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let margin = self
            .value(a)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.note_kink(margin);
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Multiplies by a constant mask of the same shape.
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::shape("mul_const", av.shape(), &[mask.len()]));
        }
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul_const", t, Op::MulConst(a, mask), &[a])
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`. Identity when `train` is off.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(a).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(a, mask)
    }

    // ----- reductions -----------------------------------------------------

    /// Row-wise softmax, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = matrix_dims("softmax_rows", av)?;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(
            "softmax_rows",
            Tensor::matrix(r, c, data)?,
            Op::SoftmaxRows(a),
            &[a],
        )
    }

    /// Reduces along `axis`, keeping the reduced dimension with size one.
    /// Max routes the gradient to the lowest-index maximum.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = xv.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        let mut gap = f64::INFINITY;
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| data[(o * len + l) * inner + i];
                let slot = &mut out[o * inner + i];
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: f64 = (0..len).map(at).sum();
                        *slot = if kind == ReduceKind::Mean {
                            s / len as f64
                        } else {
                            s
                        };
                    }
                    ReduceKind::Max => {
                        let (best, second) = top_two((0..len).map(at));
                        *slot = at(best);
                        gap = gap.min(second);
                        argmax.push(best);
                    }
                }
            }
        }
        if kind == ReduceKind::Max {
            self.note_kink(gap);
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let t = Tensor::new(out_shape, out)?;
        self.push(
            "reduce",
            t,
            Op::Reduce {
                x,
                outer,
                len,
                inner,
                kind,
                argmax,
            },
            &[x],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![1, n])?;
        self.reduce(flat, 1, ReduceKind::Sum)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![1, n])?;
        self.reduce(flat, 1, ReduceKind::Mean)
    }

    /// Reduces consecutive row blocks `offsets[s]..offsets[s + 1]`, one
    /// output row per segment. Empty segments are rejected.
    pub fn segment_reduce(
        &mut self,
        x: Var,
        offsets: Arc<Vec<usize>>,
        kind: ReduceKind,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = matrix_dims("segment_reduce", xv)?;
        check_offsets("segment_reduce", &offsets, r)?;
        let segs = offsets.len() - 1;
        let data = xv.data();
        let mut out = vec![0.0; segs * c];
        let mut argmax = Vec::new();
        let mut gap = f64::INFINITY;
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo == hi {
                return Err(Error::InvalidArgument(format!("segment {s} is empty")));
            }
            for j in 0..c {
                let col = (lo..hi).map(|i| data[i * c + j]);
                let slot = &mut out[s * c + j];
                match kind {
                    ReduceKind::Sum => *slot = col.sum(),
                    ReduceKind::Mean => *slot = col.sum::<f64>() / (hi - lo) as f64,
                    ReduceKind::Max => {
                        let (best, second) = top_two(col);
                        *slot = data[(lo + best) * c + j];
                        gap = gap.min(second);
                        argmax.push(lo + best);
                    }
                }
            }
        }
        if kind == ReduceKind::Max {
            self.note_kink(gap);
        }
        let t = Tensor::matrix(segs, c, out)?;
        self.push(
            "segment_reduce",
            t,
            Op::SegmentReduce {
                x,
                offsets,
                kind,
                argmax,
            },
            &[x],
        )
    }

    // ----- normalisation --------------------------------------------------

    /// Batch normalisation with batch statistics. Returns the output and the
    /// batch mean and biased variance per feature.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (b, f) = matrix_dims("batchnorm", xv)?;
        self.check_affine_params(xv.shape(), gamma, beta)?;
        let data = xv.data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for row in data.chunks(f) {
            add_into(&mut mean, row);
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        for row in data.chunks(f) {
            for j in 0..f {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let out = self.batchnorm_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalisation with fixed (running) statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (_, f) = matrix_dims("batchnorm", xv)?;
        self.check_affine_params(xv.shape(), gamma, beta)?;
        if mean.len() != f || var.len() != f {
            return Err(Error::shape("batchnorm", xv.shape(), &[mean.len()]));
        }
        self.batchnorm_apply(x, gamma, beta, mean, var, eps, false)
    }

    fn check_affine_params(&self, x_shape: &[usize], gamma: Var, beta: Var) -> Result<()> {
        let f = x_shape[1];
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, f] {
                return Err(Error::shape("batchnorm", x_shape, self.value(p).shape()));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (b, f) = (xv.shape()[0], xv.shape()[1]);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; b * f];
        let mut out = vec![0.0; b * f];
        for i in 0..b {
            for j in 0..f {
                let h = (xv.data()[i * f + j] - mean[j]) * inv_std[j];
                xhat[i * f + j] = h;
                out[i * f + j] = g[j] * h + be[j];
            }
        }
        let t = Tensor::matrix(b, f, out)?;
        self.push(
            "batchnorm",
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    // ----- structural -----------------------------------------------------

    /// Selects rows of `x`; `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = matrix_dims("gather_rows", xv)?;
        if index.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no rows".into()));
        }
        let mut out = vec![0.0; index.len() * c];
        for (dst, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                if s >= r {
                    return Err(Error::InvalidArgument(format!("row {s} out of range {r}")));
                }
                out[dst * c..(dst + 1) * c].copy_from_slice(xv.row_slice(s));
            }
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        self.push("gather_rows", t, Op::GatherRows(x, index), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (r, _) = matrix_dims("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = matrix_dims("concat_cols", self.value(*p))?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(*first).shape(),
                    self.value(*p).shape(),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let t = Tensor::matrix(r, total, out)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (_, c) = matrix_dims("concat_rows", self.value(*first))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            let (pr, pc) = matrix_dims("concat_rows", pv)?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(*first).shape(),
                    pv.shape(),
                ));
            }
            out.extend_from_slice(pv.data());
            rows += pr;
        }
        let t = Tensor::matrix(rows, c, out)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = matrix_dims("slice_cols", xv)?;
        if start >= end || end > c {
            return Err(Error::InvalidArgument(format!(
                "column range {start}..{end} of {c}"
            )));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&xv.row_slice(i)[start..end]);
        }
        let t = Tensor::matrix(r, end - start, out)?;
        self.push("slice_cols", t, Op::SliceCols(x, start, end), &[x])
    }

    // ----- attention ------------------------------------------------------

    /// Multi-head scaled dot-product attention computed independently per
    /// segment. Query rows of segment `s` attend to key/value rows of the
    /// same segment. Columns are split into `heads` equal slices; the
    /// per-head outputs are laid out side by side, i.e. concatenated.
    #[allow(clippy::too_many_arguments)]
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_offsets: Arc<Vec<usize>>,
        k_offsets: Arc<Vec<usize>>,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = matrix_dims("attention", qv)?;
        let (nk, dk) = matrix_dims("attention", kv)?;
        let (nv, dv) = matrix_dims("attention", vv)?;
        if dk != d || nv != nk || dv != d {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        check_offsets("attention", &q_offsets, nq)?;
        check_offsets("attention", &k_offsets, nk)?;
        if q_offsets.len() != k_offsets.len() {
            return Err(Error::InvalidArgument(
                "query/key segment counts differ".into(),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for s in 0..q_offsets.len() - 1 {
            let (klo, khi) = (k_offsets[s], k_offsets[s + 1]);
            if khi == klo && q_offsets[s + 1] > q_offsets[s] {
                return Err(Error::InvalidArgument(format!("segment {s} has no keys")));
            }
            for i in q_offsets[s]..q_offsets[s + 1] {
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qi = &qd[i * d..(i + 1) * d][cols.clone()];
                    scores.clear();
                    scores.extend(
                        (klo..khi).map(|j| {
                            scale * kernels::dot(qi, &kd[j * d..(j + 1) * d][cols.clone()])
                        }),
                    );
                    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - m).exp();
                        z += *sc;
                    }
                    let o = &mut out[i * d..(i + 1) * d][cols.clone()];
                    for (j, p) in (klo..khi).zip(scores.iter()) {
                        let p = p / z;
                        probs.push(p);
                        let vj = &vd[j * d..(j + 1) * d][cols.clone()];
                        for (oc, &x) in o.iter_mut().zip(vj) {
                            *oc += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::matrix(nq, d, out)?;
        self.push(
            "attention",
            t,
            Op::SegmentAttention {
                q,
                k,
                v,
                q_offsets,
                k_offsets,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    // ----- losses ---------------------------------------------------------

    fn loss_target(&self, op: &'static str, pred: Var, target: &Tensor) -> Result<()> {
        same_shape(op, self.value(pred), target)
    }

    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.loss_target("mse", pred, target)?;
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let l = p
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(
            "mse",
            Tensor::scalar(l),
            Op::Mse(pred, target.data().to_vec()),
            &[pred],
        )
    }

    pub fn mae(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.loss_target("mae", pred, target)?;
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let margin = p
            .iter()
            .zip(target.data())
            .fold(f64::INFINITY, |m, (a, b)| m.min((a - b).abs()));
        let l = p
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        self.note_kink(margin);
        self.push(
            "mae",
            Tensor::scalar(l),
            Op::Mae(pred, target.data().to_vec()),
            &[pred],
        )
    }

    /// Mean binary cross-entropy on logits against targets in `[0, 1]`.
    pub fn bce_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        self.loss_target("bce_logits", logits, target)?;
        let x = self.value(logits).data();
        let n = x.len() as f64;
        let l = x
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(
            "bce_logits",
            Tensor::scalar(l),
            Op::BceLogits(logits, target.data().to_vec()),
            &[logits],
        )
    }

    /// Mean cross-entropy of row logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let xv = self.value(logits);
        let (r, c) = matrix_dims("cross_entropy", xv)?;
        if classes.len() != r {
            return Err(Error::shape("cross_entropy", xv.shape(), &[classes.len()]));
        }
        if let Some(bad) = classes.iter().find(|&&k| k >= c) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} out of range for {c} classes"
            )));
        }
        let mut softmax = xv.data().to_vec();
        let mut total = 0.0;
        for (row, &k) in softmax.chunks_mut(c).zip(classes) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[k];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let t = Tensor::scalar(total / r as f64);
        self.push(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                classes: classes.to_vec(),
                softmax,
            },
            &[logits],
        )
    }

    /// KL divergence of `N(mu, exp(logvar))` from the unit Gaussian, summed
    /// over latent dimensions and averaged over rows.
    pub fn kl_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (mv, lv) = (self.value(mu), self.value(logvar));
        same_shape("kl_normal", mv, lv)?;
        let rows = mv.rows() as f64;
        let kl = mv
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| 0.5 * (m * m + l.exp() - 1.0 - l))
            .sum::<f64>()
            / rows;
        self.push(
            "kl_normal",
            Tensor::scalar(kl),
            Op::KlNormal(mu, logvar),
            &[mu, logvar],
        )
    }

    // ----- backward -------------------------------------------------------

    /// Reverse pass from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0; self.nodes[output.0].value.len()]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes[..n]
                .iter()
                .map(|nd| nd.value.shape().to_vec())
                .collect(),
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        // Accumulates into the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let nd = &self.nodes[v.0];
            if !nd.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nd.value.len()]);
            f(buf);
        };
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = (shape(*a)[0], shape(*a)[1]);
                let c = shape(*b)[1];
                acc(*a, &mut |da| kernels::matmul_nt(g, val(*b), da, r, c, k));
                acc(*b, &mut |db| kernels::matmul_tn(val(*a), g, db, r, k, c));
            }
            Op::MatMulNt(a, b) => {
                // C = A B^T: dA = dC B, dB = dC^T A
                let (r, k) = (shape(*a)[0], shape(*a)[1]);
                let c = shape(*b)[0];
                acc(*a, &mut |da| kernels::matmul_nn(g, val(*b), da, r, c, k));
                acc(*b, &mut |db| kernels::matmul_tn(g, val(*a), db, r, c, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x)
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, x), y) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |da| add_into(da, g));
                let c = shape(*row)[1];
                acc(*row, &mut |dr| {
                    for chunk in g.chunks(c) {
                        add_into(dr, chunk);
                    }
                });
            }
            Op::Affine(a, s) => acc(*a, &mut |da| {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x)
            }),
            Op::ScaleBy(a, s) => {
                let k = val(*s)[0];
                acc(*a, &mut |da| {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += k * x)
                });
                acc(*s, &mut |ds| ds[0] += kernels::dot(g, val(*a)));
            }
            Op::Relu(a) => acc(*a, &mut |da| {
                for ((d, x), y) in da.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *d += x;
                    }
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |da| {
                for ((d, x), y) in da.iter_mut().zip(g).zip(out) {
                    *d += x * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |da| {
                for ((d, x), y) in da.iter_mut().zip(g).zip(out) {
                    *d += x * (1.0 - y * y);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |da| {
                for ((d, x), y) in da.iter_mut().zip(g).zip(out) {
                    *d += x * y;
                }
            }),
            Op::MulConst(a, mask) => acc(*a, &mut |da| {
                for ((d, x), m) in da.iter_mut().zip(g).zip(mask) {
                    *d += x * m;
                }
            }),
            Op::SoftmaxRows(a) => {
                let c = shape(*a)[1];
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c))
                    {
                        let dotp = kernels::dot(grow, yrow);
                        for ((d, gx), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gx - dotp);
                        }
                    }
                });
            }
            Op::Reduce {
                x,
                outer,
                len,
                inner,
                kind,
                argmax,
            } => acc(*x, &mut |dx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let gi = g[o * inner + i];
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let w = if *kind == ReduceKind::Mean {
                                    gi / *len as f64
                                } else {
                                    gi
                                };
                                for l in 0..*len {
                                    dx[(o * len + l) * inner + i] += w;
                                }
                            }
                            ReduceKind::Max => {
                                dx[(o * len + argmax[o * inner + i]) * inner + i] += gi;
                            }
                        }
                    }
                }
            }),
            Op::SegmentReduce {
                x,
                offsets,
                kind,
                argmax,
            } => {
                let c = shape(*x)[1];
                acc(*x, &mut |dx| {
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let grow = &g[s * c..(s + 1) * c];
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let w = if *kind == ReduceKind::Mean {
                                    1.0 / (hi - lo) as f64
                                } else {
                                    1.0
                                };
                                for r in lo..hi {
                                    for (d, gx) in dx[r * c..(r + 1) * c].iter_mut().zip(grow) {
                                        *d += w * gx;
                                    }
                                }
                            }
                            ReduceKind::Max => {
                                for j in 0..c {
                                    dx[argmax[s * c + j] * c + j] += grow[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (b, f) = (shape(*x)[0], shape(*x)[1]);
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for i in 0..b {
                    for j in 0..f {
                        dgamma[j] += g[i * f + j] * xhat[i * f + j];
                        dbeta[j] += g[i * f + j];
                    }
                }
                acc(*x, &mut |dx| {
                    for j in 0..f {
                        if *train {
                            // dx = inv_std / b * (b * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                            let sum_dxhat = dbeta[j] * gam[j];
                            let sum_dxhat_xhat = dgamma[j] * gam[j];
                            for i in 0..b {
                                let dxhat = g[i * f + j] * gam[j];
                                dx[i * f + j] += inv_std[j] / b as f64
                                    * (b as f64 * dxhat
                                        - sum_dxhat
                                        - xhat[i * f + j] * sum_dxhat_xhat);
                            }
                        } else {
                            for i in 0..b {
                                dx[i * f + j] += g[i * f + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                });
                acc(*gamma, &mut |dg| add_into(dg, &dgamma));
                acc(*beta, &mut |db| add_into(db, &dbeta));
            }
            Op::GatherRows(x, index) => {
                let c = shape(*x)[1];
                acc(*x, &mut |dx| {
                    for (dst, src) in index.iter().enumerate() {
                        if let Some(s) = *src {
                            add_into(&mut dx[s * c..(s + 1) * c], &g[dst * c..(dst + 1) * c]);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let r = node.value.shape()[0];
                let mut start = 0;
                for p in parts {
                    let w = shape(*p)[1];
                    acc(*p, &mut |dp| {
                        for i in 0..r {
                            add_into(
                                &mut dp[i * w..(i + 1) * w],
                                &g[i * total + start..i * total + start + w],
                            );
                        }
                    });
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(*p, &mut |dp| add_into(dp, &g[start..start + n]));
                    start += n;
                }
            }
            Op::SliceCols(x, lo, hi) => {
                let c = shape(*x)[1];
                let w = hi - lo;
                acc(*x, &mut |dx| {
                    for (i, grow) in g.chunks(w).enumerate() {
                        add_into(&mut dx[i * c + lo..i * c + hi], grow);
                    }
                });
            }
            Op::Spmm(adj, x) => {
                let c = shape(*x)[1];
                acc(*x, &mut |dx| adj.spmm_t_into(g, c, dx));
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                q_offsets,
                k_offsets,
                heads,
                probs,
            } => self.backward_attention(g, *q, *k, *v, q_offsets, k_offsets, *heads, probs, grads),
            Op::Mse(p, t) => {
                let n = t.len() as f64;
                let gs = g[0];
                acc(*p, &mut |dp| {
                    for ((d, a), b) in dp.iter_mut().zip(val(*p)).zip(t) {
                        *d += gs * 2.0 * (a - b) / n;
                    }
                });
            }
            Op::Mae(p, t) => {
                let n = t.len() as f64;
                let gs = g[0];
                acc(*p, &mut |dp| {
                    for ((d, a), b) in dp.iter_mut().zip(val(*p)).zip(t) {
                        let s = if a > b {
                            1.0
                        } else if a < b {
                            -1.0
                        } else {
                            0.0
                        };
                        *d += gs * s / n;
                    }
                });
            }
            Op::BceLogits(p, t) => {
                let n = t.len() as f64;
                let gs = g[0];
                acc(*p, &mut |dp| {
                    for ((d, &x), y) in dp.iter_mut().zip(val(*p)).zip(t) {
                        *d += gs * (sigmoid(x) - y) / n;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                classes,
                softmax,
            } => {
                let (r, c) = (shape(*logits)[0], shape(*logits)[1]);
                let gs = g[0] / r as f64;
                acc(*logits, &mut |dl| {
                    for (i, &kk) in classes.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == kk { 1.0 } else { 0.0 };
                            dl[i * c + j] += gs * (softmax[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::KlNormal(mu, logvar) => {
                let rows = shape(*mu)[0] as f64;
                let gs = g[0] / rows;
                acc(*mu, &mut |dm| {
                    for (d, m) in dm.iter_mut().zip(val(*mu)) {
                        *d += gs * m;
                    }
                });
                acc(*logvar, &mut |dl| {
                    for (d, l) in dl.iter_mut().zip(val(*logvar)) {
                        *d += gs * 0.5 * (l.exp() - 1.0);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        q_offsets: &[usize],
        k_offsets: &[usize],
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let qv = self.nodes[q.0].value.data();
        let kv = self.nodes[k.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let d = self.nodes[q.0].value.shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = Vec::new();
        let mut at = 0;
        for s in 0..q_offsets.len() - 1 {
            let (klo, khi) = (k_offsets[s], k_offsets[s + 1]);
            let nk = khi - klo;
            for i in q_offsets[s]..q_offsets[s + 1] {
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let p = &probs[at..at + nk];
                    at += nk;
                    let gi = &g[i * d..(i + 1) * d][cols.clone()];
                    dp.clear();
                    for (jj, j) in (klo..khi).enumerate() {
                        let vj = &vv[j * d..(j + 1) * d][cols.clone()];
                        dp.push(kernels::dot(gi, vj));
                        for (dvc, gc) in dv[j * d..(j + 1) * d][cols.clone()].iter_mut().zip(gi) {
                            *dvc += p[jj] * gc;
                        }
                    }
                    let weighted = kernels::dot(p, &dp);
                    let qi = &qv[i * d..(i + 1) * d][cols.clone()];
                    for (jj, j) in (klo..khi).enumerate() {
                        let ds = p[jj] * (dp[jj] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv[j * d..(j + 1) * d][cols.clone()];
                        for (dqc, kc) in dq[i * d..(i + 1) * d][cols.clone()].iter_mut().zip(kj) {
                            *dqc += ds * kc;
                        }
                        for (dkc, qc) in dk[j * d..(j + 1) * d][cols.clone()].iter_mut().zip(qi) {
                            *dkc += ds * qc;
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            let nd = &self.nodes[var.0];
            if nd.needs_grad {
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; nd.value.len()]);
                add_into(slot, &buf);
            }
        }
    }
}

/// Index of the first maximum and the gap to the next distinct competitor
/// (zero when the maximum is tied).
/// Index of the first maximum and its gap to the next distinct value.
/// Exact ties come from clamped or padded inputs that stay equal under
/// small perturbations, so they are not reported as kinks.
fn top_two(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            second = best_v;
            best_v = v;
            best = i;
        } else if v > second && v < best_v {
            second = v;
        }
    }
    (best, best_v - second)
}
