//! Dense matrices, CSR sparse matrices and a tape-based reverse-mode
//! differentiator.
//!
//! A [`Tape`] records every operation applied to the [`Var`] handles it hands
//! out. Calling [`Tape::backward`] on a `1×1` output walks the record once in
//! reverse and returns the adjoint of every node that depends on a leaf.
//! Sparse matrices enter the record as constants and never receive
//! gradients.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty row set")]
    EmptyRows { op: &'static str },
    #[error("{op}: row index {index} out of range for {rows} rows")]
    RowOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("backward: output must be 1x1, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("invalid sparse matrix: {0}")]
    InvalidSparse(String),
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &self.data)
            .finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input, which
    /// is only ever a programming error at the call sites.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a `1×1` matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    fn t_matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, other.rows);
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for p in 0..k {
            let b_row = &other.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ` without materialising the transpose.
    fn matmul_t(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.cols);
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out.data[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copies of the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Square sparse matrix in CSR layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            offsets: vec![0; n + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            offsets: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds a matrix from `(row, col, value)` entries in any order.
    /// Duplicate coordinates are rejected.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut offsets = vec![0usize; n + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut prev: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if r >= n || c >= n {
                return Err(TensorError::InvalidSparse(format!(
                    "entry ({r}, {c}) outside {n}x{n}"
                )));
            }
            if prev == Some((r, c)) {
                return Err(TensorError::InvalidSparse(format!(
                    "duplicate entry ({r}, {c})"
                )));
            }
            prev = Some((r, c));
            offsets[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Ok(Self {
            n,
            offsets,
            indices,
            values,
        })
    }

    /// Builds a matrix from raw CSR arrays, checking the layout invariants.
    pub fn from_csr(
        n: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if offsets.len() != n + 1 || offsets[0] != 0 {
            return Err(TensorError::InvalidSparse("bad offsets".into()));
        }
        if offsets[n] != indices.len() || indices.len() != values.len() {
            return Err(TensorError::InvalidSparse(
                "last offset must equal nnz".into(),
            ));
        }
        for i in 0..n {
            if offsets[i] > offsets[i + 1] {
                return Err(TensorError::InvalidSparse("offsets not monotone".into()));
            }
            let cols = &indices[offsets[i]..offsets[i + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(TensorError::InvalidSparse(format!(
                    "row {i}: column indices not strictly increasing"
                )));
            }
            if cols.iter().any(|&c| c >= n) {
                return Err(TensorError::InvalidSparse(format!(
                    "row {i}: column index out of range"
                )));
            }
        }
        Ok(Self {
            n,
            offsets,
            indices,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.offsets[i]..self.offsets[i + 1];
        match self.indices[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut entries = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                entries.push((j, i, v));
            }
        }
        // a valid CSR matrix has no duplicates, so neither does its transpose
        SparseMatrix::from_triplets(self.n, entries).expect("transpose of valid CSR")
    }

    /// `self · d`.
    pub fn mul_dense(&self, d: &Matrix) -> Result<Matrix> {
        if d.rows() != self.n {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                left: (self.n, self.n),
                right: d.shape(),
            });
        }
        let k = d.cols();
        let mut out = Matrix::zeros(self.n, k);
        for i in 0..self.n {
            let out_row = &mut out.data[i * k..(i + 1) * k];
            for (j, v) in self.row(i) {
                for (o, x) in out_row.iter_mut().zip(d.row(j)) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · d`, scattering along rows instead of forming the transpose.
    pub fn transpose_mul_dense(&self, d: &Matrix) -> Result<Matrix> {
        if d.rows() != self.n {
            return Err(TensorError::ShapeMismatch {
                op: "spmm_t",
                left: (self.n, self.n),
                right: d.shape(),
            });
        }
        let k = d.cols();
        let mut out = Matrix::zeros(self.n, k);
        for i in 0..self.n {
            let src = d.row(i);
            for (j, v) in self.row(i) {
                let out_row = &mut out.data[j * k..(j + 1) * k];
                for (o, x) in out_row.iter_mut().zip(src) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| (self.get(j, i) - v).abs() <= tol))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Column,
}

impl Broadcast {
    fn resolve(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Self> {
        if a == b {
            Ok(Broadcast::Same)
        } else if b == (1, 1) {
            Ok(Broadcast::Scalar)
        } else if b == (1, a.1) {
            Ok(Broadcast::Row)
        } else if b == (a.0, 1) {
            Ok(Broadcast::Column)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: a,
                right: b,
            })
        }
    }

    #[inline]
    fn index(self, i: usize, j: usize, b_cols: usize) -> usize {
        match self {
            Broadcast::Same => i * b_cols + j,
            Broadcast::Scalar => 0,
            Broadcast::Row => j,
            Broadcast::Column => i,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<SparseMatrix>, Var),
    Binary(Binary, Var, Var, Broadcast),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    RowNorm2(Var),
    RowSum(Var),
    RowLogSumExp(Var),
    Mean(Var),
    MaskedMean(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    StopGradient,
    SoftmaxCrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Record of a single forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, zero-filled when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `(max, Σ_{c ≠ argmax} exp(z_c − max))`, so that
/// `logsumexp = max + ln_1p(rest)` keeps full precision when one entry
/// dominates.
fn lse_parts(row: &[f64]) -> (f64, f64) {
    let mut k = 0;
    for (c, &x) in row.iter().enumerate() {
        if x > row[k] {
            k = c;
        }
    }
    let max = row[k];
    let rest = row
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != k)
        .map(|(_, &x)| (x - max).exp())
        .sum::<f64>();
    (max, rest)
}

/// `log Σ exp(row)` with the max subtracted before exponentiation.
pub fn logsumexp(row: &[f64]) -> f64 {
    let (max, rest) = lse_parts(row);
    max + rest.ln_1p()
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.grad(a) || self.grad(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, d: Var) -> Result<Var> {
        let value = s.mul_dense(self.value(d))?;
        let rg = self.grad(d);
        Ok(self.push(value, Op::SpMM(Arc::clone(s), d), rg))
    }

    fn binary(&mut self, kind: Binary, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = Broadcast::resolve(op, sa, sb)?;
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Matrix::zeros(sa.0, sa.1);
        for i in 0..sa.0 {
            for j in 0..sa.1 {
                let x = av.data[i * sa.1 + j];
                let y = bv.data[bc.index(i, j, sb.1)];
                out.data[i * sa.1 + j] = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                };
            }
        }
        let rg = self.grad(a) || self.grad(b);
        Ok(self.push(out, Op::Binary(kind, a, b, bc), rg))
    }

    /// `a + b`; `b` may be the same shape, a `1×1` scalar, a `1×cols` row or
    /// a `rows×1` column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    /// Elementwise product with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.binary(Binary::Mul, "mul", a, a)
            .expect("square of a single tensor always matches shape")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let rg = self.grad(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.grad(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.grad(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Euclidean norm of each row, `n×1`.
    pub fn row_norm2(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::column(
            (0..m.rows())
                .map(|i| m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
        );
        let rg = self.grad(a);
        self.push(value, Op::RowNorm2(a), rg)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::column((0..m.rows()).map(|i| m.row(i).iter().sum()).collect());
        let rg = self.grad(a);
        self.push(value, Op::RowSum(a), rg)
    }

    /// Stabilised `log Σ_c exp(z_vc)` of each row, `n×1`.
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if !m.is_finite() {
            return Err(TensorError::NonFinite {
                op: "row_logsumexp",
            });
        }
        if m.cols() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "row_logsumexp",
                left: m.shape(),
                right: (m.rows(), 1),
            });
        }
        let value = Matrix::column((0..m.rows()).map(|i| logsumexp(m.row(i))).collect());
        let rg = self.grad(a);
        Ok(self.push(value, Op::RowLogSumExp(a), rg))
    }

    /// Mean over every entry, `1×1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.data.is_empty() {
            return Err(TensorError::EmptyRows { op: "mean" });
        }
        let value = Matrix::scalar(m.data.iter().sum::<f64>() / m.data.len() as f64);
        let rg = self.grad(a);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Mean over every entry of the listed rows, `1×1`.
    pub fn masked_mean(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if rows.is_empty() || m.cols() == 0 {
            return Err(TensorError::EmptyRows { op: "masked_mean" });
        }
        check_rows("masked_mean", rows, m.rows())?;
        let total: f64 = rows.iter().flat_map(|&r| m.row(r)).sum();
        let value = Matrix::scalar(total / (rows.len() * m.cols()) as f64);
        let rg = self.grad(a);
        Ok(self.push(value, Op::MaskedMean(a, rows.to_vec()), rg))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let m = self.value(a);
        check_rows("select_rows", rows, m.rows())?;
        let value = m.select_rows(rows);
        let rg = self.grad(a);
        Ok(self.push(value, Op::SelectRows(a, rows.to_vec()), rg))
    }

    /// Passes the value through and blocks every adjoint.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Mean over `rows` of `logsumexp(z_v) − z_{v, labels[k]}`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        rows: &[usize],
        labels: &[usize],
    ) -> Result<Var> {
        let z = self.value(logits);
        if rows.is_empty() {
            return Err(TensorError::EmptyRows {
                op: "softmax_cross_entropy",
            });
        }
        assert_eq!(rows.len(), labels.len(), "one label per selected row");
        check_rows("softmax_cross_entropy", rows, z.rows())?;
        if !z.is_finite() {
            return Err(TensorError::NonFinite {
                op: "softmax_cross_entropy",
            });
        }
        let mut total = 0.0;
        for (&r, &y) in rows.iter().zip(labels) {
            if y >= z.cols() {
                return Err(TensorError::LabelOutOfRange {
                    op: "softmax_cross_entropy",
                    label: y,
                    classes: z.cols(),
                });
            }
            let (max, rest) = lse_parts(z.row(r));
            total += (max - z.get(r, y)) + rest.ln_1p();
        }
        let value = Matrix::scalar(total / rows.len() as f64);
        let rg = self.grad(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                rows: rows.to_vec(),
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(up) = adj[idx].take() else {
                continue;
            };
            self.propagate(node, &up, &mut adj)?;
            adj[idx] = Some(up);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        // only nodes on a path to a leaf keep their adjoints meaningful
        for (a, n) in adj.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *a = None;
            }
        }
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.grad(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, up: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if self.grad(*a) {
                    self.accumulate(adj, *a, up.matmul_t(self.value(*b)));
                }
                if self.grad(*b) {
                    self.accumulate(adj, *b, self.value(*a).t_matmul(up));
                }
            }
            Op::SpMM(s, d) => {
                let delta = s.transpose_mul_dense(up)?;
                self.accumulate(adj, *d, delta);
            }
            Op::Binary(kind, a, b, bc) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (rows, cols) = av.shape();
                let b_cols = bv.cols();
                let mut da = if self.grad(*a) {
                    Some(Matrix::zeros(rows, cols))
                } else {
                    None
                };
                let mut db = if self.grad(*b) {
                    Some(Matrix::zeros(bv.rows(), b_cols))
                } else {
                    None
                };
                for i in 0..rows {
                    for j in 0..cols {
                        let k = i * cols + j;
                        let bi = bc.index(i, j, b_cols);
                        let g = up.data[k];
                        let (x, y) = (av.data[k], bv.data[bi]);
                        let (ga, gb) = match kind {
                            Binary::Add => (g, g),
                            Binary::Sub => (g, -g),
                            Binary::Mul => (g * y, g * x),
                            Binary::Div => (g / y, -g * x / (y * y)),
                        };
                        if let Some(da) = da.as_mut() {
                            da.data[k] += ga;
                        }
                        if let Some(db) = db.as_mut() {
                            db.data[bi] += gb;
                        }
                    }
                }
                if let Some(da) = da {
                    self.accumulate(adj, *a, da);
                }
                if let Some(db) = db {
                    self.accumulate(adj, *b, db);
                }
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, up.map(|g| c * g)),
            Op::Offset(a) => self.accumulate(adj, *a, up.clone()),
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut d = up.clone();
                for (g, x) in d.data.iter_mut().zip(&av.data) {
                    if *x <= 0.0 {
                        *g = 0.0;
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::RowNorm2(a) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let norm = node.value.data[i];
                    if norm == 0.0 {
                        continue;
                    }
                    let g = up.data[i] / norm;
                    for (o, x) in d.row_mut(i).iter_mut().zip(av.row(i)) {
                        *o = g * x;
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).fill(up.data[i]);
                }
                self.accumulate(adj, *a, d);
            }
            Op::RowLogSumExp(a) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let p = softmax_row(av.row(i));
                    for (o, pi) in d.row_mut(i).iter_mut().zip(p) {
                        *o = up.data[i] * pi;
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let g = up.item() / (r * c) as f64;
                self.accumulate(adj, *a, Matrix::filled(r, c, g));
            }
            Op::MaskedMean(a, rows) => {
                let (r, c) = self.shape(*a);
                let g = up.item() / (rows.len() * c) as f64;
                let mut d = Matrix::zeros(r, c);
                for &row in rows {
                    for o in d.row_mut(row) {
                        *o += g;
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::SelectRows(a, rows) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for (k, &row) in rows.iter().enumerate() {
                    for (o, g) in d.row_mut(row).iter_mut().zip(up.row(k)) {
                        *o += g;
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                rows,
                labels,
            } => {
                let z = self.value(*logits);
                let scale = up.item() / rows.len() as f64;
                let mut d = Matrix::zeros(z.rows(), z.cols());
                for (&r, &y) in rows.iter().zip(labels) {
                    let p = softmax_row(z.row(r));
                    let out = d.row_mut(r);
                    for (c, pc) in p.into_iter().enumerate() {
                        out[c] += scale * (pc - if c == y { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(adj, *logits, d);
            }
        }
        Ok(())
    }
}

fn check_rows(op: &'static str, rows: &[usize], n: usize) -> Result<()> {
    match rows.iter().find(|&&r| r >= n) {
        Some(&index) => Err(TensorError::RowOutOfRange {
            op,
            index,
            rows: n,
        }),
        None => Ok(()),
    }
}
