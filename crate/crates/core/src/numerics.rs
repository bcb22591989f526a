//! Small dense linear algebra, seeded sampling and summary statistics.
//!
//! Matrices here are tiny (the vehicle model has two states and one
//! measurement), so everything is a plain row-major `Vec<f64>`.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            if i > 0 {
                write!(f, "; ")?;
            }
            for j in 0..self.cols {
                if j > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{:e}", self[(i, j)])?;
            }
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values supplied for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input, which is a programming error.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            assert_eq!(r.as_ref().len(), m, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: n,
            cols: m,
            data,
        }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[k * rhs.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    fn zip_with(&self, rhs: &Matrix, op: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(format!(
                "shape {:?} does not match {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| op(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `(A + Aᵀ) / 2`; callers guarantee squareness.
    pub fn symmetrize(&self) -> Matrix {
        debug_assert!(self.is_square());
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Induced infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// `A^k` by repeated squaring.
    pub fn pow(&self, mut k: usize) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::dim("power of a non-square matrix"));
        }
        let mut result = Matrix::identity(self.rows);
        let mut base = self.clone();
        while k > 0 {
            if k & 1 == 1 {
                result = result.mul(&base)?;
            }
            k >>= 1;
            if k > 0 {
                base = base.mul(&base)?;
            }
        }
        Ok(result)
    }
}

/// Solves `A·X = B` by LU factorization with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::dim(format!("solve needs a square matrix, got {:?}", a.shape())));
    }
    if a.rows() != b.rows() {
        return Err(Error::dim(format!(
            "right-hand side has {} rows, matrix has {}",
            b.rows(),
            a.rows()
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NumericOverflow("solve_linear input"));
    }
    let n = a.rows();
    let k = b.cols();
    let threshold = 1e-14 * a.max_abs();
    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, lu[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs <= threshold || pivot_abs == 0.0 {
            return Err(Error::Singular { pivot: pivot_abs });
        }
        if pivot_row != col {
            for j in 0..n {
                lu.data.swap(col * n + j, pivot_row * n + j);
            }
            for j in 0..k {
                x.data.swap(col * k + j, pivot_row * k + j);
            }
        }
        let pivot = lu[(col, col)];
        for r in (col + 1)..n {
            let factor = lu[(r, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            lu[(r, col)] = 0.0;
            for j in (col + 1)..n {
                lu[(r, j)] -= factor * lu[(col, j)];
            }
            for j in 0..k {
                x[(r, j)] -= factor * x[(col, j)];
            }
        }
    }

    for col in (0..n).rev() {
        let pivot = lu[(col, col)];
        for j in 0..k {
            let mut acc = x[(col, j)];
            for c in (col + 1)..n {
                acc -= lu[(col, c)] * x[(c, j)];
            }
            x[(col, j)] = acc / pivot;
        }
    }
    Ok(x)
}

/// Lower-triangular `L` with `L·Lᵀ = A`.
pub fn cholesky_factor(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::dim(format!("cholesky of non-square {:?}", a.shape())));
    }
    if !a.is_symmetric(1e-12) {
        return Err(Error::NotSymmetric);
    }
    factor_lower(a, false)
}

fn factor_lower(a: &Matrix, allow_semidefinite: bool) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            // A zero pivot with a zero column below it is a legitimate
            // semidefinite direction; anything else is indefinite.
            let column_zero = ((j + 1)..n).all(|i| {
                let mut v = a[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                v == 0.0
            });
            if allow_semidefinite && d == 0.0 && column_zero {
                continue;
            }
            return Err(Error::NotPositiveDefinite { index: j, value: d });
        }
        let diag = d.sqrt();
        l[(j, j)] = diag;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / diag;
        }
    }
    Ok(l)
}

/// Seeded source of random variates.
///
/// Backed by ChaCha8, whose output stream is fixed by the seed on every
/// platform. Parallel work must derive child sources with [`RandomSource::derive`]
/// rather than share one.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        RandomSource {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent source for work item `index`, seeded `seed + index`.
    pub fn derive(&self, index: u64) -> RandomSource {
        RandomSource::new(self.seed.wrapping_add(index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on the half-open interval `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.rng.random();
        lo + (hi - lo) * u
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// Draws from `N(0, cov)` as `L·z`. A zero covariance yields the zero vector.
pub fn gaussian_vector(rng: &mut RandomSource, cov: &Matrix) -> Result<Vec<f64>> {
    if !cov.is_square() {
        return Err(Error::dim("covariance must be square"));
    }
    let l = factor_lower(cov, true)?;
    let z: Vec<f64> = (0..cov.rows()).map(|_| rng.standard_normal()).collect();
    l.mul_vec(&z)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("series lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InsufficientData("rmse of empty series".into()));
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let mu = mean(values);
    values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (values.len() - 1) as f64
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Chi-square quantile by the Wilson–Hilferty cube approximation.
pub fn chi_square_quantile(dof: f64, p: f64) -> f64 {
    let z = normal_quantile(p);
    let c = 2.0 / (9.0 * dof);
    let base = 1.0 - c + z * c.sqrt();
    dof * base.max(0.0).powi(3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_matrix(rng: &mut RandomSource, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let mut rng = RandomSource::new(1);
        let b = random_matrix(&mut rng, 3, 2);
        let x = solve_linear(&Matrix::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solve_diagonal() {
        let a = Matrix::from_rows(&[[2.0, 0.0], [0.0, 4.0]]);
        let b = Matrix::column(&[2.0, 8.0]);
        let x = solve_linear(&a, &b).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn solve_random_well_conditioned_multiplies_back() {
        let mut rng = RandomSource::new(7);
        for _ in 0..20 {
            let mut a = random_matrix(&mut rng, 5, 5);
            for i in 0..5 {
                a[(i, i)] += 5.0;
            }
            let b = random_matrix(&mut rng, 5, 3);
            let x = solve_linear(&a, &b).unwrap();
            let resid = a.mul(&x).unwrap().sub(&b).unwrap();
            assert!(resid.max_abs() <= 1e-10 * b.max_abs());
        }
    }

    #[test]
    fn solve_needs_pivoting() {
        let a = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let b = Matrix::column(&[3.0, 5.0]);
        assert_eq!(solve_linear(&a, &b).unwrap().as_slice(), &[5.0, 3.0]);
    }

    #[test]
    fn solve_singular_is_reported() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        let b = Matrix::column(&[1.0, 1.0]);
        assert!(matches!(solve_linear(&a, &b), Err(Error::Singular { .. })));
    }

    #[test]
    fn solve_shape_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            solve_linear(&a, &Matrix::zeros(2, 1)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            solve_linear(&Matrix::identity(2), &Matrix::zeros(3, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cholesky_small_cases() {
        assert_eq!(cholesky_factor(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        assert_eq!(cholesky_factor(&Matrix::scalar(4.0)).unwrap(), Matrix::scalar(2.0));
    }

    #[test]
    fn cholesky_dataset_scale_diagonal() {
        let a = Matrix::from_diag(&[1e-5, 1e-3]);
        let l = cholesky_factor(&a).unwrap();
        assert_relative_eq!(l[(0, 0)], 1e-5_f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(l[(1, 1)], 1e-3_f64.sqrt(), max_relative = 1e-15);
        assert_eq!(l[(1, 0)], 0.0);
        let back = l.mul(&l.transpose()).unwrap();
        assert!(back.sub(&a).unwrap().max_abs() <= 1e-10 * a.max_abs());
    }

    #[test]
    fn cholesky_rejects_indefinite_and_asymmetric() {
        let indefinite = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(
            cholesky_factor(&indefinite),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
        let asym = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]);
        assert!(matches!(cholesky_factor(&asym), Err(Error::NotSymmetric)));
        assert!(cholesky_factor(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn gaussian_zero_covariance_is_zero() {
        let mut rng = RandomSource::new(3);
        let v = gaussian_vector(&mut rng, &Matrix::zeros(3, 3)).unwrap();
        assert_eq!(v, vec![0.0; 3]);
    }

    #[test]
    fn gaussian_unit_moments() {
        let mut rng = RandomSource::new(11);
        let cov = Matrix::identity(1);
        let draws: Vec<f64> = (0..1_000_000)
            .map(|_| gaussian_vector(&mut rng, &cov).unwrap()[0])
            .collect();
        let m = mean(&draws);
        let v = variance(&draws);
        assert!(m.abs() <= 0.005, "mean {m}");
        assert!((v - 1.0).abs() <= 0.01, "variance {v}");
    }

    #[test]
    fn gaussian_fixed_seed_repeats() {
        let cov = Matrix::identity(2);
        let run = || {
            let mut rng = RandomSource::new(42);
            (0..50)
                .flat_map(|_| gaussian_vector(&mut rng, &cov).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gaussian_rejects_indefinite() {
        let mut rng = RandomSource::new(0);
        let cov = Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0]]);
        assert!(gaussian_vector(&mut rng, &cov).is_err());
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_relative_eq!(rmse(&[3.0, 0.0], &[0.0, 4.0]).unwrap(), 12.5f64.sqrt());
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn matrix_power() {
        let a = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]);
        assert_eq!(a.pow(0).unwrap(), Matrix::identity(2));
        assert_eq!(a.pow(5).unwrap(), Matrix::from_rows(&[[1.0, 5.0], [0.0, 1.0]]));
    }

    #[test]
    fn wilson_hilferty_tracks_exact_quantiles() {
        use statrs::distribution::ChiSquared;
        for &dof in &[50.0, 100.0, 1000.0, 5000.0] {
            let exact = ChiSquared::new(dof).unwrap();
            for &p in &[0.025, 0.975] {
                let approx = chi_square_quantile(dof, p);
                let truth = exact.inverse_cdf(p);
                assert!((approx - truth).abs() / truth < 3e-3, "dof {dof} p {p}");
            }
        }
    }

    #[test]
    fn normal_quantile_reference_points() {
        assert_relative_eq!(normal_quantile(0.975), 1.959963984540054, max_relative = 1e-9);
        assert_relative_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-12);
    }
}
