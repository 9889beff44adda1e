//! Complex linear-algebra and random-sampling substrate.
//!
//! Storage is interleaved real/imaginary (`Complex64` is `repr(C)`) in
//! row-major order. Everything here is immutable after construction except
//! [`RngStream`], which is single-owner: parallel code derives one stream per
//! trial with [`RngStream::substream`] and never shares one.

use std::ops::{Deref, Index};

use num_complex::Complex64;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub type Complex = Complex64;

/// Relative pivot floor used by the Cholesky factorization.
pub const PIVOT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

fn check_finite(values: &[Complex]) -> Result<()> {
    match values.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
        Some(i) => Err(NumericsError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Fixed-length vector of finite complex numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVector(Vec<Complex>);

impl ComplexVector {
    pub fn new(elements: Vec<Complex>) -> Result<Self> {
        check_finite(&elements)?;
        Ok(Self(elements))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![Complex::new(0.0, 0.0); len])
    }

    pub fn from_real(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| Complex::new(v, 0.0)).collect())
    }

    pub fn as_slice(&self) -> &[Complex] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<Complex> {
        self.0
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|z| z * factor).collect())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        ensure_len(self.len(), other.len())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }
}

impl Deref for ComplexVector {
    type Target = [Complex];

    fn deref(&self) -> &[Complex] {
        &self.0
    }
}

fn ensure_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(NumericsError::DimensionMismatch { expected, actual })
    }
}

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex>) -> Result<Self> {
        ensure_len(rows * cols, data.len())?;
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<Complex>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { Complex::new(1.0, 0.0) } else { Complex::new(0.0, 0.0) })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_real(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(rows, cols, values.iter().map(|&v| Complex::new(v, 0.0)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Complex {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Complex] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> ComplexVector {
        ComplexVector((0..self.rows).map(|r| self.get(r, c)).collect())
    }

    /// Sum of all columns.
    pub fn column_sum(&self) -> ComplexVector {
        ComplexVector(self.data.chunks_exact(self.cols).map(|row| row.iter().sum()).collect())
    }

    pub fn conj_transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r).conj())
    }

    pub fn mul_vec(&self, v: &[Complex]) -> Result<ComplexVector> {
        ensure_len(self.cols, v.len())?;
        Ok(ComplexVector(
            self.data.chunks_exact(self.cols).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect(),
        ))
    }

    /// `self · x` for a real vector `x`.
    pub fn mul_real_vec(&self, x: &[f64]) -> Result<ComplexVector> {
        ensure_len(self.cols, x.len())?;
        Ok(ComplexVector(
            self.data.chunks_exact(self.cols).map(|row| row.iter().zip(x).map(|(a, &b)| a * b).sum()).collect(),
        ))
    }

    /// `self^H · v`.
    pub fn conj_transpose_mul_vec(&self, v: &[Complex]) -> Result<ComplexVector> {
        ensure_len(self.rows, v.len())?;
        let mut out = vec![Complex::new(0.0, 0.0); self.cols];
        for (row, &vr) in self.data.chunks_exact(self.cols).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a.conj() * vr;
            }
        }
        Ok(ComplexVector(out))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        ensure_len(self.cols, other.rows)?;
        let mut out = vec![Complex::new(0.0, 0.0); self.rows * other.cols];
        for r in 0..self.rows {
            let out_row = &mut out[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { rows: self.rows, cols: other.cols, data: out })
    }

    /// `self^H · self` (Hermitian Gram matrix, cols × cols).
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut out = vec![Complex::new(0.0, 0.0); n * n];
        for row in self.data.chunks_exact(n) {
            for i in 0..n {
                let ai = row[i].conj();
                for j in i..n {
                    out[i * n + j] += ai * row[j];
                }
            }
        }
        for i in 0..n {
            out[i * n + i].im = 0.0;
            for j in 0..i {
                out[i * n + j] = out[j * n + i].conj();
            }
        }
        Self { rows: n, cols: n, data: out }
    }

    /// `self · self^H` (rows × rows).
    pub fn outer_gram(&self) -> Self {
        let n = self.rows;
        let mut out = vec![Complex::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in i..n {
                let v: Complex = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b.conj()).sum();
                out[i * n + j] = v;
                out[j * n + i] = v.conj();
            }
            out[i * n + i].im = 0.0;
        }
        Self { rows: n, cols: n, data: out }
    }

    pub fn add_diagonal(&mut self, value: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += value;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        ensure_len(self.rows, other.rows)?;
        ensure_len(self.cols, other.cols)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.frobenius_norm().max(1.0);
        (0..self.rows).all(|i| (i..self.cols).all(|j| (self.get(i, j) - self.get(j, i).conj()).norm() <= tol * scale))
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex;

    fn index(&self, (r, c): (usize, usize)) -> &Complex {
        &self.data[r * self.cols + c]
    }
}

/// Σ conj(a_m)·b_m without length checks.
#[inline]
pub(crate) fn dot_conj(a: &[Complex], b: &[Complex]) -> Complex {
    let (mut re, mut im) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        re += x.re * y.re + x.im * y.im;
        im += x.re * y.im - x.im * y.re;
    }
    Complex::new(re, im)
}

/// Hermitian inner product `a^H b = Σ conj(a_m) b_m`.
pub fn hermitian_inner(a: &[Complex], b: &[Complex]) -> Result<Complex> {
    ensure_len(a.len(), b.len())?;
    Ok(dot_conj(a, b))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Addressable random stream: `(master_seed, stream_index)` fully determines
/// the sample sequence. Backed by ChaCha8 with the stream index as the
/// ChaCha stream id, so different indices never overlap.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_index: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_index);
        Self { master_seed, stream_index, rng }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    /// Child stream keyed by `key`. Independent of how much of `self` has
    /// been consumed.
    pub fn substream(&self, key: u64) -> Self {
        Self::new(self.master_seed, splitmix64(self.stream_index ^ splitmix64(key.wrapping_add(0x5851_f42d))))
    }

    /// Child stream keyed by a path of keys, e.g. `(cell, trial)`.
    pub fn substream_path(&self, keys: &[u64]) -> Self {
        keys.iter().fold(self.clone(), |s, &k| s.substream(k))
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Overwrite `out` with independent CN(0, variance) samples.
pub fn fill_complex_gaussian(out: &mut [Complex], variance: f64, rng: &mut RngStream) {
    let sd = (variance / 2.0).sqrt();
    for z in out.iter_mut() {
        let re = rng.standard_normal();
        let im = rng.standard_normal();
        *z = Complex::new(sd * re, sd * im);
    }
}

/// One scalar CN(0, variance) sample.
pub fn complex_gaussian_scalar(variance: f64, rng: &mut RngStream) -> Complex {
    let sd = (variance / 2.0).sqrt();
    let re = rng.standard_normal();
    let im = rng.standard_normal();
    Complex::new(sd * re, sd * im)
}

/// Circularly-symmetric complex Gaussian vector, i.i.d. CN(0, variance) entries.
pub fn sample_complex_gaussian(dim: usize, per_element_variance: f64, rng: &mut RngStream) -> Result<ComplexVector> {
    if dim == 0 {
        return Err(NumericsError::InvalidArgument("dimension must be at least 1".into()));
    }
    if !per_element_variance.is_finite() || per_element_variance < 0.0 {
        return Err(NumericsError::InvalidArgument(format!(
            "variance must be finite and non-negative, got {per_element_variance}"
        )));
    }
    let mut v = vec![Complex::new(0.0, 0.0); dim];
    fill_complex_gaussian(&mut v, per_element_variance, rng);
    Ok(ComplexVector(v))
}

/// Lower-triangular Cholesky factor `L` with `A = L L^H`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: ComplexMatrix,
}

impl Cholesky {
    pub fn factor(a: &ComplexMatrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(NumericsError::InvalidArgument(format!("matrix must be square, got {}x{}", a.rows, a.cols)));
        }
        if !a.is_hermitian(1e-10) {
            return Err(NumericsError::InvalidArgument("matrix must be Hermitian".into()));
        }
        let n = a.rows;
        let mut l = vec![Complex::new(0.0, 0.0); n * n];
        let mut leading = 0.0;
        for j in 0..n {
            let row_j = j * n;
            let mut d = a.data[row_j + j].re;
            for k in 0..j {
                d -= l[row_j + k].norm_sqr();
            }
            if j == 0 {
                leading = d;
            }
            if !(d > 0.0) || d <= PIVOT_FLOOR * leading {
                return Err(NumericsError::NotPositiveDefinite { index: j, pivot: d });
            }
            let ljj = d.sqrt();
            l[row_j + j] = Complex::new(ljj, 0.0);
            for i in (j + 1)..n {
                let row_i = i * n;
                let mut s = a.data[row_i + j];
                for k in 0..j {
                    s -= l[row_i + k] * l[row_j + k].conj();
                }
                l[row_i + j] = s / ljj;
            }
        }
        Ok(Self { l: ComplexMatrix { rows: n, cols: n, data: l } })
    }

    pub fn factor_matrix(&self) -> &ComplexMatrix {
        &self.l
    }

    pub fn into_factor(self) -> ComplexMatrix {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Squared ratio of the largest to smallest diagonal of `L`. A lower
    /// bound on the 2-norm condition number of `A`.
    pub fn condition_estimate(&self) -> f64 {
        let diag = (0..self.dim()).map(|i| self.l.get(i, i).re);
        let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
        (hi / lo).powi(2)
    }

    pub fn solve(&self, b: &[Complex]) -> Result<ComplexVector> {
        ensure_len(self.dim(), b.len())?;
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        Ok(ComplexVector(x))
    }

    /// Forward then backward substitution; `x` holds `b` on entry.
    pub fn solve_in_place(&self, x: &mut [Complex]) {
        let n = self.dim();
        let l = &self.l.data;
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= l[i * n + k] * x[k];
            }
            x[i] = s / l[i * n + i].re;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= l[k * n + i].conj() * x[k];
            }
            x[i] = s / l[i * n + i].re;
        }
    }

    /// Explicit `A^{-1}`, one solve per column.
    pub fn inverse(&self) -> ComplexMatrix {
        let n = self.dim();
        let mut inv = ComplexMatrix::zeros(n, n);
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for c in 0..n {
            col.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
            col[c] = Complex::new(1.0, 0.0);
            self.solve_in_place(&mut col);
            for r in 0..n {
                inv.data[r * n + c] = col[r];
            }
        }
        inv
    }
}

pub fn cholesky_factor(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    Cholesky::factor(a).map(Cholesky::into_factor)
}

pub fn solve_hermitian_positive_system(a: &ComplexMatrix, b: &[Complex]) -> Result<ComplexVector> {
    ensure_len(a.rows, b.len())?;
    Cholesky::factor(a)?.solve(b)
}

/// Solve a real symmetric positive-definite system given row-major `a` (n × n).
pub fn solve_real_spd(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let m = ComplexMatrix::from_real(n, n, a)?;
    let x = solve_hermitian_positive_system(&m, &ComplexVector::from_real(b)?)?;
    Ok(x.iter().map(|z| z.re).collect())
}
