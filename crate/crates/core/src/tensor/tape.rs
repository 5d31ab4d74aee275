//! Wengert-style tape. Every operation appends a node holding its value and
//! the ids of its inputs; `backward` walks the nodes once in reverse.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Tensor, LAYER_NORM_EPS};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, E),
    Offset(usize),
    ScaleBy(usize, usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulT { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    SumRows(usize),
    SumCols(usize),
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<E>, rstd: Vec<E> },
    Gelu(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    ClampMin(usize, E),
    Sum(usize),
    Mean(usize),
    Gather(usize, Arc<[usize]>),
    ConcatRows(Vec<usize>),
    ConcatCols { parts: Vec<usize>, widths: Vec<usize>, rows: usize },
    Reshape(usize),
}

struct Node<E> {
    shape: Vec<usize>,
    value: Vec<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Tape<E: Real> {
    id: u64,
    nodes: Vec<Node<E>>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<E>, op: Op<E>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a tensor as a leaf; it receives a gradient iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        let rg = t.requires_grad;
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg)
    }

    /// Like [`Tape::leaf`] but takes ownership of the storage.
    pub fn leaf_owned(&mut self, t: Tensor<E>) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[self.idx(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v).expect("var from another tape")].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<E> {
        let n = &self.nodes[self.idx(v).expect("var from another tape")];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> E {
        self.value(v)[0]
    }

    fn dims2(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[i].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: usize, b: usize, op: &'static str) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(E, E) -> E, mk: fn(usize, usize) -> Op<E>) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b, op)?;
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.nodes[a].shape.clone(), value, mk(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, op: Op<E>) -> Result<Var> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[i]);
        Ok(self.push(self.nodes[i].shape.clone(), value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    /// `c · x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: E) -> Result<Var> {
        let i = self.idx(x)?;
        self.unary(x, |v| v * c, Op::Scale(i, c))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: E) -> Result<Var> {
        let i = self.idx(x)?;
        self.unary(x, |v| v + c, Op::Offset(i))
    }

    /// `s · x` where `s` is a recorded one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x)?, self.idx(s)?);
        if self.nodes[si].value.len() != 1 {
            return Err(Error::shape("scale_by", format!("scalar expected, got {:?}", self.nodes[si].shape)));
        }
        let c = self.nodes[si].value[0];
        let value = self.nodes[xi].value.iter().map(|&v| c * v).collect();
        let rg = self.rg(&[xi, si]);
        Ok(self.push(self.nodes[xi].shape.clone(), value, Op::ScaleBy(xi, si), rg))
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.dims2(ai, "matmul")?;
        let (k2, n) = self.dims2(bi, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let value = gemm_nn(&self.nodes[ai].value, &self.nodes[bi].value, m, k, n);
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(vec![m, n], value, Op::MatMul { a: ai, b: bi, m, k, n }, rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the row-vector form of `W·h` for a weight stored `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.dims2(ai, "matmul_t")?;
        let (n, k2) = self.dims2(bi, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let value = gemm_nt(&self.nodes[ai].value, &self.nodes[bi].value, m, k, n);
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(vec![m, n], value, Op::MatMulT { a: ai, b: bi, m, k, n }, rg))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let (_, n) = self.dims2(xi, "add_row")?;
        if self.nodes[bi].value.len() != n {
            return Err(Error::shape("add_row", format!("row {n} vs bias {:?}", self.nodes[bi].shape)));
        }
        let bv = &self.nodes[bi].value;
        let value = self.nodes[xi]
            .value
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
            .collect();
        let rg = self.rg(&[xi, bi]);
        Ok(self.push(self.nodes[xi].shape.clone(), value, Op::AddRow(xi, bi), rg))
    }

    /// `x[m,n] ⊙ v[n]`: scales every column `j` by `v[j]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xi, vi) = (self.idx(x)?, self.idx(v)?);
        let (_, n) = self.dims2(xi, "mul_row")?;
        if self.nodes[vi].value.len() != n {
            return Err(Error::shape("mul_row", format!("row {n} vs {:?}", self.nodes[vi].shape)));
        }
        let vv = &self.nodes[vi].value;
        let value = self.nodes[xi]
            .value
            .chunks(n)
            .flat_map(|row| row.iter().zip(vv).map(|(&x, &s)| x * s))
            .collect();
        let rg = self.rg(&[xi, vi]);
        Ok(self.push(self.nodes[xi].shape.clone(), value, Op::MulRow(xi, vi), rg))
    }

    /// `x[m,n] ⊙ v[m]`: scales every row `i` by `v[i]`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xi, vi) = (self.idx(x)?, self.idx(v)?);
        let (m, n) = self.dims2(xi, "mul_col")?;
        if self.nodes[vi].value.len() != m {
            return Err(Error::shape("mul_col", format!("{m} rows vs {:?}", self.nodes[vi].shape)));
        }
        let vv = &self.nodes[vi].value;
        let value = self.nodes[xi]
            .value
            .chunks(n)
            .zip(vv)
            .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
            .collect();
        let rg = self.rg(&[xi, vi]);
        Ok(self.push(self.nodes[xi].shape.clone(), value, Op::MulCol(xi, vi), rg))
    }

    /// Column sums of a matrix: `[m,n] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (_, n) = self.dims2(xi, "sum_rows")?;
        let mut value = vec![E::ZERO; n];
        for row in self.nodes[xi].value.chunks(n) {
            for (acc, &v) in value.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let rg = self.rg(&[xi]);
        Ok(self.push(vec![n], value, Op::SumRows(xi), rg))
    }

    /// Row sums of a matrix: `[m,n] -> [m]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (m, n) = self.dims2(xi, "sum_cols")?;
        let value = self.nodes[xi]
            .value
            .chunks(n)
            .map(|row| row.iter().fold(E::ZERO, |a, &b| a + b))
            .collect();
        let rg = self.rg(&[xi]);
        Ok(self.push(vec![m], value, Op::SumCols(xi), rg))
    }

    fn axis_split(&self, i: usize, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let shape = &self.nodes[i].shape;
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = shape[..axis].iter().product();
        let len = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        if len == 0 {
            return Err(Error::shape(op, "empty axis"));
        }
        Ok((outer, len, inner))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (outer, len, inner) = self.axis_split(xi, axis, "softmax")?;
        let src = &self.nodes[xi].value;
        let mut value = vec![E::ZERO; src.len()];
        for o in 0..outer {
            for q in 0..inner {
                let at = |k: usize| (o * len + k) * inner + q;
                let mut mx = src[at(0)];
                for k in 1..len {
                    mx = mx.max(src[at(k)]);
                }
                let mut sum = E::ZERO;
                for k in 0..len {
                    let e = (src[at(k)] - mx).exp();
                    value[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    value[at(k)] = value[at(k)] / sum;
                }
            }
        }
        let rg = self.rg(&[xi]);
        Ok(self.push(self.nodes[xi].shape.clone(), value, Op::Softmax { x: xi, outer, len, inner }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (outer, len, inner) = self.axis_split(xi, axis, "log_softmax")?;
        let src = &self.nodes[xi].value;
        let mut value = vec![E::ZERO; src.len()];
        for o in 0..outer {
            for q in 0..inner {
                let at = |k: usize| (o * len + k) * inner + q;
                let mut mx = src[at(0)];
                for k in 1..len {
                    mx = mx.max(src[at(k)]);
                }
                let mut sum = E::ZERO;
                for k in 0..len {
                    sum += (src[at(k)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for k in 0..len {
                    value[at(k)] = src[at(k)] - lse;
                }
            }
        }
        let rg = self.rg(&[xi]);
        Ok(self.push(self.nodes[xi].shape.clone(), value, Op::LogSoftmax { x: xi, outer, len, inner }, rg))
    }

    /// Normalises each row of the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let shape = self.nodes[xi].shape.clone();
        let n = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if n == 0 {
            return Err(Error::shape("layer_norm", "zero-length row"));
        }
        if self.nodes[gi].value.len() != n || self.nodes[bi].value.len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("row {n} vs gamma {:?} beta {:?}", self.nodes[gi].shape, self.nodes[bi].shape),
            ));
        }
        let eps = E::from_f64(LAYER_NORM_EPS);
        let inv_n = E::ONE / E::from_f64(n as f64);
        let src = &self.nodes[xi].value;
        let (g, b) = (&self.nodes[gi].value, &self.nodes[bi].value);
        let rows = src.len() / n;
        let mut xhat = vec![E::ZERO; src.len()];
        let mut rstd = vec![E::ZERO; rows];
        let mut value = vec![E::ZERO; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().fold(E::ZERO, |a, &v| a + v) * inv_n;
            let var = row.iter().fold(E::ZERO, |a, &v| a + (v - mean) * (v - mean)) * inv_n;
            let rs = E::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                value[r * n + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[xi, gi, bi]);
        Ok(self.push(shape, value, Op::LayerNorm { x: xi, gamma: gi, beta: bi, xhat, rstd }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let (c, k) = (E::from_f64(GELU_C), E::from_f64(GELU_K));
        let half = E::from_f64(0.5);
        self.unary(x, |v| half * v * (E::ONE + (c * (v + k * v * v * v)).tanh()), Op::Gelu(i))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        self.unary(x, |v| if v > E::ZERO { v } else { E::ZERO }, Op::Relu(i))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        self.unary(x, |v| v.exp(), Op::Exp(i))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        self.unary(x, |v| v.ln(), Op::Log(i))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        self.unary(x, |v| v.sqrt(), Op::Sqrt(i))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        self.unary(x, |v| v * v, Op::Square(i))
    }

    /// `max(x, c)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, c: E) -> Result<Var> {
        let i = self.idx(x)?;
        self.unary(x, |v| if v < c { c } else { v }, Op::ClampMin(i, c))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.nodes[i].value.iter().fold(E::ZERO, |a, &b| a + b);
        let rg = self.rg(&[i]);
        Ok(self.push(vec![1], vec![s], Op::Sum(i), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let n = E::from_f64(self.nodes[i].value.len() as f64);
        let s = self.nodes[i].value.iter().fold(E::ZERO, |a, &b| a + b) / n;
        let rg = self.rg(&[i]);
        Ok(self.push(vec![1], vec![s], Op::Mean(i), rg))
    }

    /// `out[i] = x[index[i]]` over the flat storage, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = shape.into();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        let src = &self.nodes[xi].value;
        if let Some(&bad) = index.iter().find(|&&j| j >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", src.len())));
        }
        let value = index.iter().map(|&j| src[j]).collect();
        let rg = self.rg(&[xi]);
        Ok(self.push(shape, value, Op::Gather(xi, index), rg))
    }

    /// Selects rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (m, n) = self.dims2(xi, "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(Error::shape("slice_rows", format!("{start}+{len} of {m} rows")));
        }
        let index: Arc<[usize]> = (start * n..(start + len) * n).collect();
        self.gather(x, index, vec![len, n])
    }

    /// Selects columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (m, n) = self.dims2(xi, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::shape("slice_cols", format!("{start}+{len} of {n} cols")));
        }
        let index: Arc<[usize]> = (0..m).flat_map(|r| (start..start + len).map(move |c| r * n + c)).collect();
        self.gather(x, index, vec![m, len])
    }

    /// Stacks matrices (or flat tensors) along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = *ids.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let tail = self.nodes[first].shape[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &i in &ids {
            if self.nodes[i].shape[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} vs {:?}", self.nodes[first].shape, self.nodes[i].shape),
                ));
            }
            rows += self.nodes[i].shape[0];
            value.extend_from_slice(&self.nodes[i].value);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(&ids);
        Ok(self.push(shape, value, Op::ConcatRows(ids), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = *ids.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let (r, c) = self.dims2(i, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("{rows} vs {r} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in ids.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[i].value[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(&ids);
        Ok(self.push(vec![rows, total], value, Op::ConcatCols { parts: ids, widths, rows }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.nodes[xi].value.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.nodes[xi].shape)));
        }
        let value = self.nodes[xi].value.clone();
        let rg = self.rg(&[xi]);
        Ok(self.push(shape, value, Op::Reshape(xi), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::new();
        grads.resize_with(li + 1, || None);
        grads[li] = Some(vec![E::ONE]);

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads);
        }

        // leaves requiring grad that were never reached get zeros
        for (i, node) in self.nodes.iter().enumerate().take(li + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![E::ZERO; node.value.len()]);
            }
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [E])| {
            if !nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![E::ZERO; nodes[j].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c)),
            Op::Offset(x) | Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::ScaleBy(x, sc) => {
                let c = nodes[*sc].value[0];
                let xv = &nodes[*x].value;
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * c));
                acc(*sc, &mut |s| s[0] += xv.iter().zip(g).fold(E::ZERO, |a, (&x, &g)| a + x * g));
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |s| add_into(s, &gemm_nt(g, bv, m, n, k)));
                acc(*b, &mut |s| add_into(s, &gemm_tn(av, g, m, k, n)));
            }
            Op::MatMulT { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |s| add_into(s, &gemm_nn(g, bv, m, n, k)));
                acc(*b, &mut |s| add_into(s, &gemm_tn(g, av, m, n, k)));
            }
            Op::AddRow(x, b) => {
                let n = nodes[*b].value.len();
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulRow(x, v) => {
                let n = nodes[*v].value.len();
                let (xv, vv) = (&nodes[*x].value, &nodes[*v].value);
                acc(*x, &mut |s| {
                    for (k, sv) in s.iter_mut().enumerate() {
                        *sv += g[k] * vv[k % n];
                    }
                });
                acc(*v, &mut |s| {
                    for (k, (&gk, &xk)) in g.iter().zip(xv).enumerate() {
                        s[k % n] += gk * xk;
                    }
                });
            }
            Op::MulCol(x, v) => {
                let m = nodes[*v].value.len();
                let n = g.len() / m;
                let (xv, vv) = (&nodes[*x].value, &nodes[*v].value);
                acc(*x, &mut |s| {
                    for (k, sv) in s.iter_mut().enumerate() {
                        *sv += g[k] * vv[k / n];
                    }
                });
                acc(*v, &mut |s| {
                    for (k, (&gk, &xk)) in g.iter().zip(xv).enumerate() {
                        s[k / n] += gk * xk;
                    }
                });
            }
            Op::SumRows(x) => {
                let n = g.len();
                acc(*x, &mut |s| {
                    for row in s.chunks_mut(n) {
                        add_into(row, g);
                    }
                });
            }
            Op::SumCols(x) => {
                let m = g.len();
                acc(*x, &mut |s| {
                    let n = s.len() / m;
                    for (r, row) in s.chunks_mut(n).enumerate() {
                        row.iter_mut().for_each(|v| *v += g[r]);
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + q;
                            let mut dot = E::ZERO;
                            for k in 0..len {
                                dot += g[at(k)] * y[at(k)];
                            }
                            for k in 0..len {
                                s[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let y = &node.value;
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + q;
                            let mut gs = E::ZERO;
                            for k in 0..len {
                                gs += g[at(k)];
                            }
                            for k in 0..len {
                                s[at(k)] += g[at(k)] - y[at(k)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = nodes[*gamma].value.len();
                let gv = &nodes[*gamma].value;
                acc(*gamma, &mut |s| {
                    for (k, (&gk, &h)) in g.iter().zip(xhat.iter()).enumerate() {
                        s[k % n] += gk * h;
                    }
                });
                acc(*beta, &mut |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
                let inv_n = E::ONE / E::from_f64(n as f64);
                acc(*x, &mut |s| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let o = r * n;
                        let mut mean_d = E::ZERO;
                        let mut mean_dh = E::ZERO;
                        for j in 0..n {
                            let d = g[o + j] * gv[j];
                            mean_d += d;
                            mean_dh += d * xhat[o + j];
                        }
                        mean_d *= inv_n;
                        mean_dh *= inv_n;
                        for j in 0..n {
                            let d = g[o + j] * gv[j];
                            s[o + j] += rs * (d - mean_d - xhat[o + j] * mean_dh);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[*x].value;
                let (c, kk) = (E::from_f64(GELU_C), E::from_f64(GELU_K));
                let half = E::from_f64(0.5);
                let three = E::from_f64(3.0);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        let v = xv[k];
                        let t = (c * (v + kk * v * v * v)).tanh();
                        let d = half * (E::ONE + t) + half * v * (E::ONE - t * t) * c * (E::ONE + three * kk * v * v);
                        s[k] += g[k] * d;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &nodes[*x].value;
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        if xv[k] > E::ZERO {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(x) => {
                let xv = &nodes[*x].value;
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / xv[k];
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                let two = E::from_f64(2.0);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / (two * y[k]);
                    }
                });
            }
            Op::Square(x) => {
                let xv = &nodes[*x].value;
                let two = E::from_f64(2.0);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += two * xv[k] * g[k];
                    }
                });
            }
            Op::ClampMin(x, c) => {
                let xv = &nodes[*x].value;
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        if !(xv[k] < *c) {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let gm = g[0] / E::from_f64(nodes[*x].value.len() as f64);
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += gm));
            }
            Op::Gather(x, index) => {
                acc(*x, &mut |s| {
                    for (&j, &gk) in index.iter().zip(g) {
                        s[j] += gk;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    acc(p, &mut |s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut col = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    acc(p, &mut |s| {
                        for r in 0..*rows {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
        }
    }
}

#[inline]
fn add_into<E: Real>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a reverse pass.
pub struct Gradients<E> {
    tape: u64,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Real> Gradients<E> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not require grad.
    pub fn wrt(&self, v: Var) -> Option<&[E]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    pub fn get(&self, v: Var) -> Result<&[E]> {
        if v.tape != self.tape {
            return Err(Error::ForeignVar);
        }
        self.wrt(v)
            .ok_or_else(|| Error::invalid("variable does not require a gradient"))
    }

    /// Accumulates the gradient of `v` into `t.grad`.
    pub fn write_into(&self, v: Var, t: &mut Tensor<E>) -> Result<()> {
        let g = self.get(v)?;
        t.accumulate_grad(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new([2], vec![2.0, -1.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0, -2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new([2], vec![2.0, -1.0]).unwrap().with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));

        let mut other = Tape::<f64>::new();
        let y = other.leaf(&Tensor::scalar(1.0).with_grad());
        assert!(matches!(tape.backward(y), Err(Error::ForeignVar)));
        assert!(tape.add(x, y).is_err());
    }

    #[test]
    fn non_grad_leaves_are_untouched() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new([2], vec![1.0, 2.0]).unwrap().with_grad());
        let c = tape.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let p = tape.mul(x, c).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new([2], vec![1.0, 2.0]).unwrap().with_grad());
        let y = tape.leaf(&Tensor::new([2], vec![1.0, 2.0]).unwrap().with_grad());
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn write_into_accumulates() {
        let mut t = Tensor::new([2], vec![1.0f64, 2.0]).unwrap().with_grad();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(&t);
            let l = tape.sum(x).unwrap();
            let g = tape.backward(l).unwrap();
            g.write_into(x, &mut t).unwrap();
        }
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 2.0][..]));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = Rng::new(5);
        let a = Tensor::<f64>::randn([3, 4], 1.0, &mut rng).with_grad();
        let b = Tensor::<f64>::randn([4, 2], 1.0, &mut rng);
        let run = |which: u8| {
            let mut tape = Tape::new();
            let av = tape.leaf(&a);
            let bv = tape.constant(b.clone());
            let p = tape.matmul(av, bv).unwrap();
            let e = tape.exp(p).unwrap();
            let l1 = tape.mean(e).unwrap();
            let s = tape.softmax(av, 1).unwrap();
            let sq = tape.square(s).unwrap();
            let l2 = tape.sum(sq).unwrap();
            let l = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(l).unwrap().get(av).unwrap().to_vec()
        };
        let (g1, g2, g12) = (run(0), run(1), run(2));
        for k in 0..g12.len() {
            assert!((g1[k] + g2[k] - g12[k]).abs() < 1e-12);
        }
    }
}
