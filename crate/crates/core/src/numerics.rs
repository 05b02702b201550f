// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense float64 linear algebra and probability helpers.
//!
//! Everything here is a pure function of its inputs. Loop orders are fixed so
//! identical inputs produce bitwise-identical outputs.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivot magnitude below which QR reports a rank-deficient input.
pub const QR_RANK_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;
const SIGN_PIVOT_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = self.row(i);
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:+.5}")).collect();
            writeln!(f, "  {}", shown.join(" "))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Single-column matrix.
    pub fn col_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Shape("columns of unequal length".into()));
        }
        Ok(Self::from_fn(rows, cols, |i, j| columns[j][i]))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Single scalar of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
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

    /// Rows `r0..r1`, columns `c0..c1`.
    pub fn slice(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Matrix {
        let mut out = Matrix::zeros(r1 - r0, c1 - c0);
        for i in r0..r1 {
            out.row_mut(i - r0)
                .copy_from_slice(&self.data[i * self.cols + c0..i * self.cols + c1]);
        }
        out
    }

    /// Columns side by side: `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "hstack rows {} vs {}",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.data[i * cols..i * cols + self.cols].copy_from_slice(self.row(i));
            out.data[i * cols + self.cols..(i + 1) * cols].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    /// Rows stacked: `[self; other]`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "vstack cols {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a * b)
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += c * other`, shapes must agree.
    pub fn axpy(&mut self, c: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over rows, returned as a length-`cols` vector.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let n = self.rows.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// `‖AᵀA − I‖_F` for a tall matrix with (ideally) orthonormal columns.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = matmul_tn(self, self).expect("gram of self is always conformable");
        gram.sub(&Matrix::identity(self.cols))
            .expect("square")
            .frobenius_norm()
    }
}

// ---------------------------------------------------------------------------
// Products
// ---------------------------------------------------------------------------

/// `A · B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, m) = (a.rows, b.cols);
    let out = product_kernel(&a.data, &b.data, n, a.cols, m);
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `Aᵀ · B`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn {}x{}ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    matmul(&a.transpose(), b)
}

/// `A · Bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt {}x{} by {}x{}ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    // Row-times-row dot products do not vectorize; transposing B once and
    // reusing the axpy kernel is faster for every shape used here.
    matmul(a, &b.transpose())
}

/// Row-major `out = A · B` for an n×k by k×m product.
fn product_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { product_kernel_avx2(a, b, n, k, m) };
        }
    }
    product_kernel_generic(a, b, n, k, m)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn product_kernel_avx2(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    // Wider lanes only; no fused multiply-add, so results are bitwise equal
    // to the generic path.
    product_kernel_generic(a, b, n, k, m)
}

#[inline(always)]
fn product_kernel_generic(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    // Four output rows share each streamed row of B. Every output entry is
    // still accumulated over `p` in order.
    let mut i = 0;
    while i + 4 <= n {
        let (o0, rest) = out[i * m..(i + 4) * m].split_at_mut(m);
        let (o1, rest) = rest.split_at_mut(m);
        let (o2, o3) = rest.split_at_mut(m);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Factorizations
// ---------------------------------------------------------------------------

/// Thin Householder QR returning only `Q` (d×r).
///
/// Columns of `Q` are sign-normalized so every diagonal entry of `R` is
/// positive. A pivot with `|R_jj| < 1e-10` is reported as a degenerate basis.
pub fn householder_qr(a: &Matrix) -> Result<Matrix> {
    let (d, r) = a.shape();
    if d < r {
        return Err(Error::Shape(format!("QR needs rows >= cols, got {d}x{r}")));
    }
    if !a.is_finite() {
        return Err(Error::Numeric("QR input has non-finite entries".into()));
    }
    let mut work = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut diag = Vec::with_capacity(r);

    for j in 0..r {
        let x: Vec<f64> = (j..d).map(|i| work.get(i, j)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < QR_RANK_TOL {
            return Err(Error::DegenerateBasis(format!(
                "column {j} has pivot {norm:.3e} below {QR_RANK_TOL:e}"
            )));
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|t| *t /= vnorm);
            for c in j..r {
                let proj: f64 = (j..d).map(|i| v[i - j] * work.get(i, c)).sum();
                for i in j..d {
                    let cur = work.get(i, c);
                    work.set(i, c, cur - 2.0 * v[i - j] * proj);
                }
            }
        }
        diag.push(alpha);
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{r-1} applied to the first r columns of I.
    let mut q = Matrix::from_fn(d, r, |i, j| if i == j { 1.0 } else { 0.0 });
    for j in (0..r).rev() {
        let v = &reflectors[j];
        for c in 0..r {
            let proj: f64 = (j..d).map(|i| v[i - j] * q.get(i, c)).sum();
            if proj != 0.0 {
                for i in j..d {
                    let cur = q.get(i, c);
                    q.set(i, c, cur - 2.0 * v[i - j] * proj);
                }
            }
        }
    }
    for (j, &rjj) in diag.iter().enumerate() {
        if rjj < 0.0 {
            for i in 0..d {
                let cur = q.get(i, j);
                q.set(i, j, -cur);
            }
        }
    }
    Ok(q)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    /// Sorted non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Column `j` pairs with `eigenvalues[j]`.
    pub eigenvectors: Matrix,
}

/// Symmetric eigensolver by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(S + Sᵀ)/2`. Each eigenvector is sign-fixed
/// so its first entry with magnitude above 1e-9 is positive; eigenvalue ties
/// are ordered by descending lexicographic comparison of those vectors.
pub fn sym_eig(s: &Matrix) -> Result<EigenResult> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::Shape(format!(
            "sym_eig needs a square matrix, got {:?}",
            s.shape()
        )));
    }
    if !s.is_finite() {
        return Err(Error::Numeric("sym_eig input has non-finite entries".into()));
    }
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (s.get(i, j) + s.get(j, i)));
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();

    if scale > 0.0 {
        for _ in 0..JACOBI_MAX_SWEEPS {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a.get(i, j).powi(2))
                .sum::<f64>()
                .sqrt();
            if off <= 1e-15 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.get(p, q);
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let app = a.get(p, p);
                    let aqq = a.get(q, q);
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * c;
                    rotate(&mut a, &mut v, p, q, c, sn);
                }
            }
        }
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut col = v.column(j);
            fix_sign(&mut col);
            (a.get(j, j), col)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));

    // Re-order runs of tied eigenvalues lexicographically.
    let tie_tol = 1e-12 * pairs.first().map_or(1.0, |p| p.0.abs().max(1.0));
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && (pairs[end - 1].0 - pairs[end].0).abs() <= tie_tol {
            end += 1;
        }
        if end - start > 1 {
            pairs[start..end].sort_by(|x, y| lex_cmp(&y.1, &x.1));
        }
        start = end;
    }

    let eigenvalues = pairs.iter().map(|p| p.0).collect();
    let columns: Vec<Vec<f64>> = pairs.into_iter().map(|p| p.1).collect();
    let eigenvectors = if n == 0 {
        Matrix::zeros(0, 0)
    } else {
        Matrix::from_columns(&columns)?
    };
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
    })
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

fn fix_sign(col: &mut [f64]) {
    if let Some(&pivot) = col.iter().find(|x| x.abs() > SIGN_PIVOT_TOL) {
        if pivot < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// Top-`r` left singular vectors of `A`, taken as the leading eigenvectors
/// of `AAᵀ`.
pub fn truncated_svd_left(a: &Matrix, r: usize) -> Result<Matrix> {
    let (d, m) = a.shape();
    if r == 0 || r > d.min(m) {
        return Err(Error::Shape(format!(
            "truncated SVD rank {r} out of range for {d}x{m}"
        )));
    }
    let gram = matmul_nt(a, a)?;
    let eig = sym_eig(&gram)?;
    Ok(eig.eigenvectors.slice(0, d, 0, r))
}

/// Sum of singular values.
pub fn nuclear_norm(a: &Matrix) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    let gram = if a.rows() >= a.cols() {
        matmul_tn(a, a)?
    } else {
        matmul_nt(a, a)?
    };
    let eig = sym_eig(&gram)?;
    Ok(eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum())
}

/// Cosines of the principal angles between two orthonormal bases, descending.
pub fn principal_cosines(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    let m = matmul_tn(a, b)?;
    let small = if m.rows() <= m.cols() {
        matmul_nt(&m, &m)?
    } else {
        matmul_tn(&m, &m)?
    };
    let eig = sym_eig(&small)?;
    Ok(eig
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt().min(1.0))
        .collect())
}

/// Largest principal angle (radians) between two equal-rank orthonormal bases.
///
/// Computed from the projector difference `‖P_a − P_b‖₂ = sin θ_max`, which
/// stays accurate for tiny angles where `acos` of cosines does not.
pub fn max_principal_angle(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "principal angle between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let pa = matmul_nt(a, a)?;
    let pb = matmul_nt(b, b)?;
    let diff = pa.sub(&pb)?;
    let sq = matmul(&diff, &diff)?;
    let eig = sym_eig(&sq)?;
    let top = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    Ok(top.sqrt().min(1.0).asin())
}

// ---------------------------------------------------------------------------
// Probability
// ---------------------------------------------------------------------------

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

/// Predictive entropy (nats) and top-two probability margin.
pub fn entropy_and_margin(logits: &[f64]) -> Result<(f64, f64)> {
    if logits.len() < 2 {
        return Err(Error::Shape(format!(
            "entropy/margin needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    let logp = log_softmax(logits);
    let mut entropy = 0.0;
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &lp in &logp {
        let p = lp.exp();
        if p > 0.0 {
            entropy -= p * lp;
        }
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok((entropy.max(0.0), first - second))
}

/// `KL(Bern(q) ‖ Bern(p))` with the 0·ln 0 = 0 limits.
pub fn bernoulli_kl(q: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| if a <= 0.0 { 0.0 } else { a * (a / b).ln() };
    term(q, p) + term(1.0 - q, 1.0 - p)
}
