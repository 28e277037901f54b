//! Small dense linear algebra used by the covariance computations.
//!
//! Every matrix in this crate is at most a few dozen entries wide (frames are
//! expected to number eight or fewer), so a row-major `Vec<f64>` with
//! straightforward loops is both the simplest and the fastest representation.

use thiserror::Error;

/// Errors raised by the dense kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("matrix has a negative eigenvalue {0:e}")]
    NegativeEigenvalue(f64),
    #[error("linear system is singular (pivot {pivot:e}, scale {scale:e})")]
    Singular { pivot: f64, scale: f64 },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from a closure evaluated at every `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::Dimension("ragged rows".into()));
        }
        Ok(Self::from_fn(r, c, |i, j| rows[i][j]))
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn mul(&self, other: &Mat) -> Result<Mat, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if self.cols != v.len() {
            return Err(LinalgError::Dimension("matrix-vector length".into()));
        }
        Ok((0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)] * v[j]).sum())
            .collect())
    }

    pub fn add(&self, other: &Mat) -> Result<Mat, LinalgError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat, LinalgError> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::Dimension("elementwise shape".into()));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| a * s).collect() }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise absolute difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        if self.rows != other.rows || self.cols != other.cols {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Returns `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Mat {
        Mat::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// Principal submatrix on the given index set.
    pub fn select(&self, idx: &[usize]) -> Mat {
        Mat::from_fn(idx.len(), idx.len(), |i, j| self[(idx[i], idx[j])])
    }

    /// Rectangular block on row set `ri` and column set `ci`.
    pub fn select_rect(&self, ri: &[usize], ci: &[usize]) -> Mat {
        Mat::from_fn(ri.len(), ci.len(), |i, j| self[(ri[i], ci[j])])
    }

    /// Returns `Q A Qᵀ`.
    pub fn congruence(&self, q: &Mat) -> Result<Mat, LinalgError> {
        q.mul(self)?.mul(&q.transpose())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition `A = V diag(values) Vᵀ` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, ordered like `values`.
    pub vectors: Mat,
}

impl SymEigen {
    /// Reassembles `V f(Λ) Vᵀ`.
    pub fn recompose(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.values.len();
        let mapped: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        Mat::from_fn(n, n, |i, j| {
            (0..n).map(|k| self.vectors[(i, k)] * mapped[k] * self.vectors[(j, k)]).sum()
        })
    }
}

/// Off-diagonal Frobenius threshold at which cyclic Jacobi stops, relative to
/// the Frobenius norm of the input.
pub const JACOBI_OFF_TOL: f64 = 1e-13;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eigen(a: &Mat) -> Result<SymEigen, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::Dimension("eigendecomposition needs a square matrix".into()));
    }
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Mat::identity(n);
    let fro = m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_OFF_TOL * fro.max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off = off_diagonal_norm(&m);
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEigen { values, vectors })
}

fn off_diagonal_norm(m: &Mat) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Eigenvalues above `-NEG_EIG_TOL` (scaled by the matrix magnitude) are
/// treated as round-off and clamped to zero.
pub const NEG_EIG_TOL: f64 = 1e-9;

/// Symmetric tolerance used when validating covariance inputs.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Principal square root of a symmetric positive semidefinite matrix.
///
/// One- and two-dimensional inputs use closed forms; larger inputs go through
/// [`sym_eigen`] with eigenvalues clamped at zero.
pub fn psd_sqrt(a: &Mat) -> Result<Mat, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::Dimension("square root needs a square matrix".into()));
    }
    let scale = a.max_abs().max(1.0);
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(LinalgError::Asymmetric(asym));
    }
    let a = a.symmetrized();
    match a.rows() {
        0 => Ok(a),
        1 => {
            let v = a[(0, 0)];
            if v < -NEG_EIG_TOL * scale {
                return Err(LinalgError::NegativeEigenvalue(v));
            }
            Ok(Mat::diag(&[v.max(0.0).sqrt()]))
        }
        2 => sqrt_2x2(&a, scale),
        _ => {
            let eig = sym_eigen(&a)?;
            if let Some(&lo) = eig.values.first() {
                if lo < -NEG_EIG_TOL * scale {
                    return Err(LinalgError::NegativeEigenvalue(lo));
                }
            }
            Ok(eig.recompose(|v| v.max(0.0).sqrt()))
        }
    }
}

/// Closed-form root `(A + √det·I) / √(tr A + 2√det)` of a 2×2 PSD matrix.
fn sqrt_2x2(a: &Mat, scale: f64) -> Result<Mat, LinalgError> {
    let (p, q, r) = (a[(0, 0)], a[(0, 1)], a[(1, 1)]);
    let half_tr = 0.5 * (p + r);
    let radius = (0.25 * (p - r) * (p - r) + q * q).sqrt();
    let lo = half_tr - radius;
    if lo < -NEG_EIG_TOL * scale {
        return Err(LinalgError::NegativeEigenvalue(lo));
    }
    let hi = half_tr + radius;
    let lo = lo.max(0.0);
    let hi = hi.max(0.0);
    // Products of clamped eigenvalues avoid cancellation in p*r - q*q.
    let sdet = (lo * hi).sqrt();
    let denom = (hi.sqrt() + lo.sqrt()).max(0.0);
    if denom == 0.0 {
        return Ok(Mat::zeros(2, 2));
    }
    Ok(Mat::from_fn(2, 2, |i, j| {
        let base = a[(i, j)] + if i == j { sdet } else { 0.0 };
        base / denom
    }))
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
///
/// The system is declared singular when a pivot falls below
/// `rel_tol × max|A|`.
pub fn solve(a: &Mat, b: &[f64], rel_tol: f64) -> Result<Vec<f64>, LinalgError> {
    let n = a.rows();
    if !a.is_square() || b.len() != n {
        return Err(LinalgError::Dimension("solve needs square A and matching b".into()));
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let (piv_row, piv_val) = (col..n)
            .map(|r| (r, m[(r, col)].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("non-empty pivot range");
        if piv_val < rel_tol * scale {
            return Err(LinalgError::Singular { pivot: piv_val, scale });
        }
        if piv_row != col {
            for k in 0..n {
                let tmp = m[(col, k)];
                m[(col, k)] = m[(piv_row, k)];
                m[(piv_row, k)] = tmp;
            }
            x.swap(col, piv_row);
        }
        for r in (col + 1)..n {
            let factor = m[(r, col)] / m[(col, col)];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[(r, k)] -= factor * m[(col, k)];
            }
            x[r] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let tail: f64 = ((col + 1)..n).map(|k| m[(col, k)] * x[k]).sum();
        x[col] = (x[col] - tail) / m[(col, col)];
    }
    Ok(x)
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix; eigenvalues below
/// `rel_tol × λ_max` are treated as zero.
pub fn psd_pinv(a: &Mat, rel_tol: f64) -> Result<Mat, LinalgError> {
    let n = a.rows();
    if n == 0 {
        return Ok(a.clone());
    }
    let eig = sym_eigen(a)?;
    let top = eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cut = rel_tol * top;
    Ok(eig.recompose(|v| if v > cut && v > 0.0 { 1.0 / v } else { 0.0 }))
}

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> Mat {
        Mat::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 2.0]]).unwrap()
    }

    #[test]
    fn jacobi_reconstructs_input() {
        let a = spd3();
        let eig = sym_eigen(&a).unwrap();
        let back = eig.recompose(|v| v);
        assert!(back.max_abs_diff(&a) < 1e-12);
        assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sqrt_squares_back() {
        for a in [spd3(), Mat::from_rows(&[vec![2.0, 0.7], vec![0.7, 1.0]]).unwrap()] {
            let r = psd_sqrt(&a).unwrap();
            let sq = r.mul(&r).unwrap();
            assert!(sq.max_abs_diff(&a) < 1e-12, "{sq:?}");
        }
    }

    #[test]
    fn sqrt_of_rank_one_2x2() {
        let a = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = psd_sqrt(&a).unwrap();
        assert!(r.mul(&r).unwrap().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(psd_sqrt(&a), Err(LinalgError::NegativeEigenvalue(_))));
    }

    #[test]
    fn solve_with_pivoting() {
        let a = Mat::from_rows(&[vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let x = solve(&a, &[4.0, 5.0], 1e-12).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
        let sing = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(solve(&sing, &[1.0, 1.0], 1e-12).is_err());
    }

    #[test]
    fn pinv_of_singular_matrix() {
        let a = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let p = psd_pinv(&a, 1e-12).unwrap();
        let apa = a.mul(&p).unwrap().mul(&a).unwrap();
        assert!(apa.max_abs_diff(&a) < 1e-12);
    }
}
