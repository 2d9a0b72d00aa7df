//! Dense complex linear algebra kernel.
//!
//! Everything here is double precision and row-major. The solver surface is
//! deliberately small: a Cholesky-based Hermitian solve for the positive
//! definite systems produced by the optimizer, a pivoted LU for the
//! reflection-loop inverse, and seeded circularly-symmetric Gaussian
//! sampling for noise and fading draws.

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Complex scalar: a pair of 64-bit floats.
pub type C64 = Complex<f64>;

/// Relative asymmetry above which a matrix is rejected as non-Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not Hermitian (relative asymmetry {asymmetry:.3e})")]
    NonHermitian { asymmetry: f64 },
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("dimension mismatch in {context}")]
    DimensionMismatch { context: &'static str },
    #[error("matrix is singular to working precision")]
    Singular,
}

/// Dense complex matrix, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
fn czero() -> C64 {
    C64::new(0.0, 0.0)
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        CMat { rows, cols, data: vec![czero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, c(1.0, 0.0));
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = CMat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Diagonal matrix with the given diagonal entries.
    pub fn from_diag(d: &[C64]) -> Self {
        let mut m = CMat::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m.set(i, i, v);
        }
        m
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
    pub fn at(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn mul(&self, other: &CMat) -> CMat {
        assert_eq!(self.cols, other.rows, "inner dimensions must match");
        let mut out = CMat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == czero() {
                    continue;
                }
                for j in 0..other.cols {
                    let v = out.at(i, j) + a * other.at(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .fold(czero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |i, j| self.at(j, i).conj())
    }

    pub fn transpose(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    pub fn conj(&self) -> CMat {
        CMat::from_fn(self.rows, self.cols, |i, j| self.at(i, j).conj())
    }

    pub fn add(&self, other: &CMat) -> CMat {
        assert!(self.rows == other.rows && self.cols == other.cols);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        CMat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &CMat) -> CMat {
        assert!(self.rows == other.rows && self.cols == other.cols);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        CMat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: C64) -> CMat {
        let data = self.data.iter().map(|&a| a * s).collect();
        CMat { rows: self.rows, cols: self.cols, data }
    }

    /// In-place rank-one update `self += w * x x^H`.
    pub fn add_scaled_outer(&mut self, x: &[C64], w: f64) {
        assert!(self.rows == x.len() && self.cols == x.len());
        for i in 0..self.rows {
            let xi = x[i];
            for j in 0..self.cols {
                let v = self.at(i, j) + xi * x[j].conj() * w;
                self.set(i, j, v);
            }
        }
    }

    /// Scale the rows by a diagonal vector: `diag(d) * self`.
    pub fn diag_mul_left(&self, d: &[C64]) -> CMat {
        assert_eq!(d.len(), self.rows);
        CMat::from_fn(self.rows, self.cols, |i, j| d[i] * self.at(i, j))
    }

    /// Scale the columns by a diagonal vector: `self * diag(d)`.
    pub fn diag_mul_right(&self, d: &[C64]) -> CMat {
        assert_eq!(d.len(), self.cols);
        CMat::from_fn(self.rows, self.cols, |i, j| self.at(i, j) * d[j])
    }

    /// Hadamard product with the identity: keeps the diagonal, zeroes the rest.
    pub fn hadamard_identity(&self) -> CMat {
        assert_eq!(self.rows, self.cols);
        let mut out = CMat::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            out.set(i, i, self.at(i, i));
        }
        out
    }

    pub fn diagonal(&self) -> Vec<C64> {
        assert_eq!(self.rows, self.cols);
        (0..self.rows).map(|i| self.at(i, i)).collect()
    }

    pub fn trace(&self) -> C64 {
        self.diagonal().into_iter().fold(czero(), |a, b| a + b)
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Maximum absolute column sum (induced 1-norm).
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.at(i, j).norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Inner product `a^H b` (conjugate-linear in the first argument).
pub fn vdot(a: &[C64], b: &[C64]) -> C64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(czero(), |acc, (&x, &y)| acc + x.conj() * y)
}

pub fn vnorm_sq(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn vnorm(a: &[C64]) -> f64 {
    vnorm_sq(a).sqrt()
}

pub fn vadd(a: &[C64], b: &[C64]) -> Vec<C64> {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn vsub(a: &[C64], b: &[C64]) -> Vec<C64> {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn vscale(a: &[C64], s: C64) -> Vec<C64> {
    a.iter().map(|&x| x * s).collect()
}

/// Elementwise (Hadamard) product of two vectors.
pub fn vhadamard(a: &[C64], b: &[C64]) -> Vec<C64> {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

fn hermitian_asymmetry(a: &CMat) -> f64 {
    let mut asym = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..a.rows() {
        for j in i..a.cols() {
            let d = (a.at(i, j) - a.at(j, i).conj()).norm();
            asym = asym.max(d);
            scale = scale.max(a.at(i, j).norm()).max(a.at(j, i).norm());
        }
    }
    if scale > 0.0 {
        asym / scale
    } else {
        0.0
    }
}

/// Cholesky factorization `A = L L^H` of a Hermitian positive definite matrix.
///
/// Returns the lower factor. Fails with `NonHermitian` when the relative
/// asymmetry exceeds [`HERMITIAN_TOL`], and `NotPositiveDefinite` when a
/// pivot is not strictly positive.
pub fn cholesky(a: &CMat) -> Result<CMat, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::DimensionMismatch { context: "cholesky: matrix not square" });
    }
    let asym = hermitian_asymmetry(a);
    if asym > HERMITIAN_TOL {
        return Err(LinalgError::NonHermitian { asymmetry: asym });
    }
    let n = a.rows();
    let mut l = CMat::zeros(n, n);
    for j in 0..n {
        let mut d = a.at(j, j).re;
        for k in 0..j {
            d -= l.at(j, k).norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
        }
        let ljj = d.sqrt();
        l.set(j, j, c(ljj, 0.0));
        for i in (j + 1)..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k).conj();
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solve `A x = rhs` for Hermitian positive definite `A` via Cholesky.
pub fn hermitian_solve(a: &CMat, rhs: &[C64]) -> Result<Vec<C64>, LinalgError> {
    if a.rows() != rhs.len() {
        return Err(LinalgError::DimensionMismatch { context: "hermitian_solve: rhs length" });
    }
    let l = cholesky(a)?;
    Ok(cholesky_solve(&l, rhs))
}

/// Solve with a precomputed lower Cholesky factor.
pub fn cholesky_solve(l: &CMat, rhs: &[C64]) -> Vec<C64> {
    let n = l.rows();
    assert_eq!(rhs.len(), n);
    // forward: L y = rhs
    let mut y = vec![czero(); n];
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l.at(i, k) * y[k];
        }
        y[i] = s / l.at(i, i);
    }
    // backward: L^H x = y
    let mut x = vec![czero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l.at(k, i).conj() * x[k];
        }
        x[i] = s / l.at(i, i);
    }
    x
}

struct LuFactors {
    lu: CMat,
    perm: Vec<usize>,
}

fn lu_factor(a: &CMat) -> Result<LuFactors, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::DimensionMismatch { context: "lu: matrix not square" });
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut pmax = lu.at(k, k).norm();
        let mut prow = k;
        for i in (k + 1)..n {
            let m = lu.at(i, k).norm();
            if m > pmax {
                pmax = m;
                prow = i;
            }
        }
        if pmax == 0.0 || !pmax.is_finite() {
            return Err(LinalgError::Singular);
        }
        if prow != k {
            for j in 0..n {
                let tmp = lu.at(k, j);
                lu.set(k, j, lu.at(prow, j));
                lu.set(prow, j, tmp);
            }
            perm.swap(k, prow);
        }
        let pivot = lu.at(k, k);
        for i in (k + 1)..n {
            let f = lu.at(i, k) / pivot;
            lu.set(i, k, f);
            for j in (k + 1)..n {
                let v = lu.at(i, j) - f * lu.at(k, j);
                lu.set(i, j, v);
            }
        }
    }
    Ok(LuFactors { lu, perm })
}

fn lu_solve(f: &LuFactors, rhs: &[C64]) -> Vec<C64> {
    let n = f.lu.rows();
    let mut y: Vec<C64> = f.perm.iter().map(|&p| rhs[p]).collect();
    for i in 0..n {
        for k in 0..i {
            let v = f.lu.at(i, k) * y[k];
            y[i] -= v;
        }
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let v = f.lu.at(i, k) * y[k];
            y[i] -= v;
        }
        y[i] /= f.lu.at(i, i);
    }
    y
}

/// Solve a general square system `A x = rhs` with partially pivoted LU.
pub fn solve_general(a: &CMat, rhs: &[C64]) -> Result<Vec<C64>, LinalgError> {
    if a.rows() != rhs.len() {
        return Err(LinalgError::DimensionMismatch { context: "solve_general: rhs length" });
    }
    let f = lu_factor(a)?;
    Ok(lu_solve(&f, rhs))
}

/// Explicit inverse of a general square matrix.
pub fn inverse(a: &CMat) -> Result<CMat, LinalgError> {
    let n = a.rows();
    let f = lu_factor(a)?;
    let mut inv = CMat::zeros(n, n);
    let mut e = vec![czero(); n];
    for j in 0..n {
        e[j] = c(1.0, 0.0);
        let col = lu_solve(&f, &e);
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
        e[j] = czero();
    }
    Ok(inv)
}

/// 1-norm condition number via the explicit inverse.
pub fn cond_1(a: &CMat) -> Result<f64, LinalgError> {
    let inv = inverse(a)?;
    Ok(a.norm_1() * inv.norm_1())
}

/// Draw `n` i.i.d. circularly symmetric complex Gaussian entries with total
/// per-entry variance `variance` (real and imaginary parts each carry half).
/// Deterministic for a given generator state; variance 0 yields exact zeros.
pub fn sample_complex_gaussian(n: usize, variance: f64, rng: &mut impl Rng) -> Vec<C64> {
    assert!(variance >= 0.0, "variance must be nonnegative");
    let scale = (variance / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            c(scale * re, scale * im)
        })
        .collect()
}
