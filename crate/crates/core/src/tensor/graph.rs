//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive in execution order, so node indices
//! are already a topological order. [`Graph::backward`] walks the tape once
//! in reverse and leaves a gradient for every leaf that was created with
//! `requires_grad`.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
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
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Softplus(usize),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Mean(usize),
    Sum(usize),
    SumLast(usize),
    ConcatLast(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceLast { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    Reshape(usize),
    TransposeLast2(usize),
    Permute0213(usize),
    Dropout { x: usize, mask: Vec<f64> },
    MaskedFill { x: usize, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// The computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients keyed by node, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// dLoss/dv; zeros when `v` did not participate in the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

/// `c (+)= op(a) * op(b)` for row-major matrices, `op` optionally transposing.
/// `a` is logically `[m, k]`, `b` is `[k, n]` after the optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: slices cover m*k, k*n and m*n elements with the strides above.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf; gradients are tracked when `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let rg = self.rg(&[a.0, b.0]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(&[a.0, b.0]);
        self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchMatMul(a.0, b.0),
            rg,
            "batch_matmul",
        )
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(t, Op::Add(a.0, b.0), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "subtract", |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(t, Op::Sub(a.0, b.0), rg, "subtract")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "multiply", |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(t, Op::Mul(a.0, b.0), rg, "multiply")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].value.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "divide",
                detail: "division by zero".into(),
            });
        }
        let t = self.zip(a, b, "divide", |x, y| x / y)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(t, Op::Div(a.0, b.0), rg, "divide")
    }

    fn row_op(&mut self, x: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (xv, rv) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let w = last_dim(xv);
        if rv.rank() != 1 || rv.len() != w {
            return Err(Error::ShapeMismatch {
                op: name,
                left: xv.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let r = rv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r[i % w]))
            .collect();
        Tensor::new(xv.shape().to_vec(), data)
    }

    /// Broadcast add of a vector along the last dimension.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_op(x, row, "add_row", |a, b| a + b)?;
        let rg = self.rg(&[x.0, row.0]);
        self.push(t, Op::AddRow(x.0, row.0), rg, "add_row")
    }

    /// Broadcast multiply by a vector along the last dimension.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_op(x, row, "mul_row", |a, b| a * b)?;
        let rg = self.rg(&[x.0, row.0]);
        self.push(t, Op::MulRow(x.0, row.0), rg, "mul_row")
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, op, rg, name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x.0, c), "scale", |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x.0), "add_scalar", |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x.0), "exp", f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: "argument must be positive".into(),
            });
        }
        self.map(x, Op::Log(x.0), "log", f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x.0), "tanh", f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x.0), "relu", |v| v.max(0.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x.0), "square", |v| v * v)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Softplus(x.0), "softplus", softplus)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let w = last_dim(xv);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(w.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Op::Softmax(x.0), rg, "softmax")
    }

    /// Normalizes each row over the last dimension (no affine terms).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let w = last_dim(xv);
        let mut data = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / w.max(1));
        for row in data.chunks_mut(w.max(1)) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Op::LayerNorm { x: x.0, inv_std }, rg, "layer_norm")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(Error::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(m), Op::Mean(x.0), rg, "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().sum::<f64>();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg, "sum")
    }

    /// Sums over the last dimension, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let w = last_dim(xv);
        let data = xv.data().chunks(w.max(1)).map(|r| r.iter().sum()).collect();
        let shape = xv.shape()[..xv.rank().saturating_sub(1)].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(shape, data)?, Op::SumLast(x.0), rg, "sum_last")
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = &self.nodes[xs[0].0].value;
        let lead = first.shape()[..first.rank() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for v in xs {
            let t = &self.nodes[v.0].value;
            if t.shape()[..t.rank() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concatenate",
                    left: first.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(last_dim(t));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[v.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        self.push(Tensor::new(shape, data)?, Op::ConcatLast(ids), rg, "concatenate")
    }

    /// Concatenates along the first dimension; trailing dimensions must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in xs {
            let t = &self.nodes[v.0].value;
            if t.shape()[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concatenate",
                    left: first,
                    right: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = rows;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        self.push(Tensor::new(shape, data)?, Op::ConcatRows(ids), rg, "concatenate")
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let w = last_dim(xv);
        if start + len > w {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: xv.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = xv
            .data()
            .chunks(w)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(shape, data)?, Op::SliceLast { x: x.0, start }, rg, "slice")
    }

    /// Selects rows of a `[n, w]` matrix; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: xv.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let (n, w) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= n {
                return Err(Error::Domain {
                    op: "gather_rows",
                    detail: format!("row {i} out of range for {n} rows"),
                });
            }
            data.extend_from_slice(&xv.data()[i * w..(i + 1) * w]);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            Tensor::new(vec![idx.len(), w], data)?,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Op::Reshape(x.0), rg, "reshape")
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let r = xv.rank();
        if r < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                left: xv.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let data = transpose_blocks(xv.data(), m, n);
        let mut shape = xv.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(shape, data)?, Op::TransposeLast2(x.0), rg, "transpose")
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 4 {
            return Err(Error::ShapeMismatch {
                op: "permute",
                left: xv.shape().to_vec(),
                right: vec![4],
            });
        }
        let s = xv.shape();
        let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
        let data = permute_0213(xv.data(), a, b, c, d);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(vec![a, c, b, d], data)?, Op::Permute0213(x.0), rg, "permute")
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        self.push(t, Op::Dropout { x: x.0, mask }, rg, "dropout")
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if mask.len() != xv.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                left: xv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            t,
            Op::MaskedFill {
                x: x.0,
                mask: mask.to_vec(),
            },
            rg,
            "masked_fill",
        )
    }

    /// Reverse pass from a scalar loss. The tape cannot be differentiated twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.nodes[loss.0].value.shape();
        if !shape.is_empty() {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        for (i, nd) in self.nodes.iter().enumerate() {
            if !matches!(nd.op, Op::Leaf) || !nd.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &mut |buf| gemm(m, n, k, g, false, bv.data(), true, buf, true));
                acc(*b, &mut |buf| gemm(k, m, n, av.data(), true, g, false, buf, true));
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                acc(*a, &mut |buf| {
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &bv.data()[t * k * n..(t + 1) * k * n],
                            true,
                            &mut buf[t * m * k..(t + 1) * m * k],
                            true,
                        );
                    }
                });
                acc(*b, &mut |buf| {
                    for t in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[t * m * k..(t + 1) * m * k],
                            true,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &mut buf[t * k * n..(t + 1) * k * n],
                            true,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::AddRow(x, r) => {
                let w = nodes[*r].value.len();
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*r, &mut |buf| {
                    for (k, v) in g.iter().enumerate() {
                        buf[k % w] += v;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let w = nodes[*r].value.len();
                let (xv, rv) = (nodes[*x].value.data(), nodes[*r].value.data());
                acc(*x, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] += g[k] * rv[k % w];
                    }
                });
                acc(*r, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k % w] += g[k] * xv[k];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |buf| {
                for k in 0..g.len() {
                    buf[k] += g[k] * c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Exp(x) => {
                let y = out.data();
                acc(*x, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] += g[k] * y[k];
                    }
                })
            }
            Op::Log(x) => {
                let xv = nodes[*x].value.data();
                acc(*x, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] += g[k] / xv[k];
                    }
                })
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                })
            }
            Op::Relu(x) => {
                let xv = nodes[*x].value.data();
                acc(*x, &mut |buf| {
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            buf[k] += g[k];
                        }
                    }
                })
            }
            Op::Square(x) => {
                let xv = nodes[*x].value.data();
                acc(*x, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] += 2.0 * g[k] * xv[k];
                    }
                })
            }
            Op::Softplus(x) => {
                let xv = nodes[*x].value.data();
                acc(*x, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] += g[k] * sigmoid(xv[k]);
                    }
                })
            }
            Op::Softmax(x) => {
                let y = out.data();
                let w = last_dim(out).max(1);
                acc(*x, &mut |buf| {
                    for r in 0..y.len() / w {
                        let (ys, gs) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for c in 0..w {
                            buf[r * w + c] += ys[c] * (gs[c] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm { x, inv_std } => {
                let y = out.data();
                let w = last_dim(out).max(1);
                acc(*x, &mut |buf| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let (ys, gs) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let mg = gs.iter().sum::<f64>() / w as f64;
                        let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for c in 0..w {
                            buf[r * w + c] += is * (gs[c] - mg - ys[c] * mgy);
                        }
                    }
                })
            }
            Op::Mean(x) => {
                let n = nodes[*x].value.len() as f64;
                acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::SumLast(x) => {
                let w = last_dim(&nodes[*x].value).max(1);
                acc(*x, &mut |buf| {
                    for (k, d) in buf.iter_mut().enumerate() {
                        *d += g[k / w];
                    }
                })
            }
            Op::ConcatLast(ids) => {
                let total = last_dim(out);
                let rows = out.len() / total.max(1);
                let mut off = 0;
                for &j in ids {
                    let w = last_dim(&nodes[j].value);
                    acc(j, &mut |buf| {
                        for r in 0..rows {
                            for c in 0..w {
                                buf[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &j in ids {
                    let n = nodes[j].value.len();
                    acc(j, &mut |buf| add_into(buf, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceLast { x, start } => {
                let w = last_dim(&nodes[*x].value);
                let len = last_dim(out);
                acc(*x, &mut |buf| {
                    for (r, chunk) in g.chunks(len.max(1)).enumerate() {
                        for c in 0..len {
                            buf[r * w + start + c] += chunk[c];
                        }
                    }
                })
            }
            Op::GatherRows { x, idx } => {
                let w = last_dim(out);
                acc(*x, &mut |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..w {
                            buf[src * w + c] += g[r * w + c];
                        }
                    }
                })
            }
            Op::TransposeLast2(x) => {
                let r = out.rank();
                let (m, n) = (out.shape()[r - 2], out.shape()[r - 1]);
                let back = transpose_blocks(g, m, n);
                acc(*x, &mut |buf| add_into(buf, &back))
            }
            Op::Permute0213(x) => {
                let s = out.shape();
                let back = permute_0213(g, s[0], s[1], s[2], s[3]);
                acc(*x, &mut |buf| add_into(buf, &back))
            }
            Op::Dropout { x, mask } => acc(*x, &mut |buf| {
                for k in 0..g.len() {
                    buf[k] += g[k] * mask[k];
                }
            }),
            Op::MaskedFill { x, mask } => acc(*x, &mut |buf| {
                for k in 0..g.len() {
                    if !mask[k] {
                        buf[k] += g[k];
                    }
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn transpose_blocks(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let block = m * n;
    let mut out = vec![0.0; data.len()];
    if block == 0 {
        return out;
    }
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn permute_0213(data: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0., 0.]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[3., 3., 3., 3.]));
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]).with_grad());
        let sq = g.square(x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).data(), &[2., 4., 6.]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]).with_grad());
        let c = g.constant(t(&[2], &[5., 6.]));
        let l = g.sum(c).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).data(), &[0., 0., 0.]);
    }

    #[test]
    fn non_scalar_loss_and_double_backward_fail() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        match g.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
        assert!(matches!(g.matmul(a, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn log_and_divide_domain_errors() {
        let mut g = Graph::new();
        let z = g.constant(t(&[2], &[0., 1.]));
        assert!(matches!(g.log(z), Err(Error::Domain { .. })));
        let one = g.constant(t(&[2], &[1., 1.]));
        assert!(matches!(g.div(one, z), Err(Error::Domain { .. })));
    }

    #[test]
    fn dropout_mask_is_inverted_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.1, &mut rng).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
        let dropped = vals.iter().filter(|&&v| v == 0.0).count();
        assert!((50..150).contains(&dropped));
        let y0 = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(y0, x);
    }

    #[test]
    fn permute_and_transpose_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3, 2, 2], &data));
        let p = g.permute_0213(x).unwrap();
        let q = g.permute_0213(p).unwrap();
        assert_eq!(g.value(q).data(), &data[..]);
        let y = g.constant(t(&[2, 3, 4], &data));
        let yt = g.transpose_last2(y).unwrap();
        assert_eq!(g.shape(yt), &[2, 4, 3]);
        assert_eq!(g.value(yt).data()[1], data[4]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
