//! Dense row-major matrices with hand-written forward/backward pairs.
//!
//! Every differentiable op here comes as `op` plus `op_backward`, where the
//! backward takes the upstream gradient of the op's output and returns the
//! gradient for each input. Composites elsewhere in the crate chain these by
//! hand; [`grad_check`] verifies a composite against central differences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("cannot l2-normalize a zero vector")]
    ZeroNorm,
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GradError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Sum over rows, giving one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        check_same("add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        check_same("add_scaled", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GradError::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// matmul

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(GradError::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `A · Bᵀ` without materializing the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(GradError::Shape {
            op: "matmul_bt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

/// `Aᵀ · B` without materializing the transpose.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(GradError::Shape {
            op: "matmul_at",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// Gradients of `A·B` given upstream `G`: `(G·Bᵀ, Aᵀ·G)`.
pub fn matmul_backward(a: &Matrix, b: &Matrix, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
    if upstream.shape() != (a.rows, b.cols) {
        return Err(GradError::Shape {
            op: "matmul_backward",
            left: (a.rows, b.cols),
            right: upstream.shape(),
        });
    }
    Ok((matmul_bt(upstream, b)?, matmul_at(a, upstream)?))
}

/// Adds `bias` to every row.
pub fn add_row_bias(x: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if bias.len() != x.cols {
        return Err(GradError::Shape {
            op: "add_row_bias",
            left: x.shape(),
            right: (1, bias.len()),
        });
    }
    let mut out = x.clone();
    for i in 0..out.rows {
        for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Affine map applied row-wise: `X · Wᵀ + b`, with `W` stored out×in.
pub fn linear(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    add_row_bias(&matmul_bt(x, weight)?, bias)
}

/// Gradients of [`linear`]: `(dX, dW, db)`.
pub fn linear_backward(
    x: &Matrix,
    weight: &Matrix,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if upstream.shape() != (x.rows, weight.rows) {
        return Err(GradError::Shape {
            op: "linear_backward",
            left: (x.rows, weight.rows),
            right: upstream.shape(),
        });
    }
    let dx = matmul(upstream, weight)?;
    let dw = matmul_at(upstream, x)?;
    Ok((dx, dw, upstream.column_sums()))
}

// ---------------------------------------------------------------------------
// softmax

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Backward of [`softmax`] given its output `y` and upstream `g`.
pub fn softmax_backward(y: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner = dot(y, upstream);
    y.iter().zip(upstream).map(|(yi, gi)| yi * (gi - inner)).collect()
}

pub fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        out.row_mut(i).copy_from_slice(&softmax(x.row(i)));
    }
    out
}

/// Backward of [`row_softmax`], taking the forward output.
pub fn row_softmax_backward(output: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    check_same("row_softmax_backward", output, upstream)?;
    let mut out = Matrix::zeros(output.rows, output.cols);
    for i in 0..output.rows {
        out.row_mut(i)
            .copy_from_slice(&softmax_backward(output.row(i), upstream.row(i)));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// l2 normalization

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n == 0.0 || !n.is_finite() {
        return Err(GradError::ZeroNorm);
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Backward of `x / ‖x‖`: `(g − y (y·g)) / ‖x‖` with `y` the normalized output.
pub fn l2_normalize_backward(x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n == 0.0 || !n.is_finite() {
        return Err(GradError::ZeroNorm);
    }
    let y: Vec<f64> = x.iter().map(|v| v / n).collect();
    let inner = dot(&y, upstream);
    Ok(y
        .iter()
        .zip(upstream)
        .map(|(yi, gi)| (gi - yi * inner) / n)
        .collect())
}

// ---------------------------------------------------------------------------
// elementwise

fn map(x: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_map(op: &'static str, a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    check_same(op, a, b)?;
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(x: &Matrix) -> Matrix {
    map(x, f64::tanh)
}

/// Backward of [`tanh`], taking the forward output.
pub fn tanh_backward(output: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    zip_map("tanh_backward", output, upstream, |y, g| g * (1.0 - y * y))
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    map(x, sigmoid_scalar)
}

/// Backward of [`sigmoid`], taking the forward output.
pub fn sigmoid_backward(output: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    zip_map("sigmoid_backward", output, upstream, |y, g| g * y * (1.0 - y))
}

/// NaN inputs propagate.
pub fn relu(x: &Matrix) -> Matrix {
    map(x, |v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
}

/// Backward of [`relu`], taking the forward input. Subgradient 0 at 0.
pub fn relu_backward(input: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    zip_map("relu_backward", input, upstream, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    zip_map("hadamard", a, b, |x, y| x * y)
}

pub fn hadamard_backward(a: &Matrix, b: &Matrix, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((hadamard(upstream, b)?, hadamard(upstream, a)?))
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    zip_map("add", a, b, |x, y| x + y)
}

pub fn add_backward(upstream: &Matrix) -> (Matrix, Matrix) {
    (upstream.clone(), upstream.clone())
}

pub fn scale(x: &Matrix, factor: f64) -> Matrix {
    map(x, |v| v * factor)
}

pub fn scale_backward(factor: f64, upstream: &Matrix) -> Matrix {
    scale(upstream, factor)
}

// ---------------------------------------------------------------------------
// gradient checking

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_relative_error: f64,
    /// Coordinate at which the maximum was observed.
    pub worst_index: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Magnitude below which gradient entries are compared absolutely. Central
/// differences at `h = 1e-5` on O(1) losses carry roundoff near `1e-11`, so
/// entries this small cannot be resolved relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient returned by `f` against central
/// differences `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` in every coordinate.
///
/// `f` returns `(value, gradient)`; only the value is used at the perturbed
/// points.
pub fn grad_check<F>(op: &str, mut f: F, params: &[f64], h: f64, tol: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut theta = params.to_vec();
    let mut worst = 0.0_f64;
    let mut worst_index = 0;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let (plus, _) = f(&theta);
        theta[i] = orig - h;
        let (minus, _) = f(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > worst || err.is_nan() {
            worst = if err.is_nan() { f64::INFINITY } else { err };
            worst_index = i;
        }
    }
    GradCheckReport {
        op: op.to_string(),
        max_relative_error: worst,
        worst_index,
        tolerance: tol,
        pass: worst <= tol,
    }
}
