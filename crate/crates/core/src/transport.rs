//! Wasserstein-2 distances and optimal couplings: exact 1-D discrete transport
//! by the quantile coupling, 1-D Gaussians, and n-dimensional Gaussians via
//! the trace formula.

use crate::linalg::{self, LinalgError, Mat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `Σ p_i = 1`.
pub const PMF_SUM_TOL: f64 = 1e-12;
/// Support points closer than this are merged when building pmfs from data.
pub const SUPPORT_MERGE_TOL: f64 = 1e-12;
/// Gaussian W2 results with magnitude below this are clamped to zero.
pub const GAUSS_CLAMP_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid pmf: {0}")]
    InvalidPmf(String),
    #[error("negative standard deviation {0}")]
    NegativeInput(f64),
    #[error("covariance dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Finite-support probability mass function on the real line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarPmf {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl ScalarPmf {
    /// Validates a strictly increasing support and strictly positive
    /// probabilities summing to one.
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self, TransportError> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(TransportError::InvalidPmf(format!(
                "support has {} points, probabilities {}",
                support.len(),
                probs.len()
            )));
        }
        if support.iter().any(|v| !v.is_finite()) {
            return Err(TransportError::InvalidPmf("non-finite support point".into()));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TransportError::InvalidPmf("support is not strictly increasing".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(TransportError::InvalidPmf(format!("probability {p} is not positive")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PMF_SUM_TOL {
            return Err(TransportError::InvalidPmf(format!("probabilities sum to {total}")));
        }
        Ok(Self { support, probs })
    }

    /// Point mass at `x`.
    pub fn delta(x: f64) -> Self {
        Self { support: vec![x], probs: vec![1.0] }
    }

    /// Builds a pmf from unordered weighted atoms: atoms are sorted, values
    /// within [`SUPPORT_MERGE_TOL`] are merged, zero weights are dropped, and
    /// the result is normalized by the total weight.
    pub fn from_weighted(atoms: impl IntoIterator<Item = (f64, f64)>) -> Result<Self, TransportError> {
        let mut atoms: Vec<(f64, f64)> = atoms.into_iter().filter(|(_, w)| *w > 0.0).collect();
        if atoms.iter().any(|(v, w)| !v.is_finite() || !w.is_finite()) {
            return Err(TransportError::InvalidPmf("non-finite atom".into()));
        }
        let total: f64 = atoms.iter().map(|(_, w)| w).sum();
        if atoms.is_empty() || total <= 0.0 {
            return Err(TransportError::InvalidPmf("total mass is zero".into()));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut support: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut probs: Vec<f64> = Vec::with_capacity(atoms.len());
        for (v, w) in atoms {
            match support.last() {
                Some(last) if (v - last).abs() <= SUPPORT_MERGE_TOL => {
                    *probs.last_mut().expect("parallel vectors") += w;
                }
                _ => {
                    support.push(v);
                    probs.push(w);
                }
            }
        }
        for p in &mut probs {
            *p /= total;
        }
        Ok(Self { support, probs })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(v, p)| v * v * p).sum()
    }

    /// Probability of the support point within [`SUPPORT_MERGE_TOL`] of `x`.
    pub fn prob_of(&self, x: f64) -> f64 {
        self.index_of(x).map_or(0.0, |i| self.probs[i])
    }

    /// Index of the support point within [`SUPPORT_MERGE_TOL`] of `x`.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let pos = self.support.partition_point(|v| *v < x - SUPPORT_MERGE_TOL);
        (pos < self.support.len() && (self.support[pos] - x).abs() <= SUPPORT_MERGE_TOL).then_some(pos)
    }
}

/// Joint mass matrix with prescribed marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteCoupling {
    pub rows: ScalarPmf,
    pub cols: ScalarPmf,
    /// `mass[i][k]` is the probability of `(rows.support[i], cols.support[k])`.
    pub mass: Vec<Vec<f64>>,
}

impl DiscreteCoupling {
    /// `Σ mass_ik (x_i - y_k)²`.
    pub fn cost(&self) -> f64 {
        let mut total = 0.0;
        for (i, row) in self.mass.iter().enumerate() {
            let x = self.rows.support[i];
            for (k, m) in row.iter().enumerate() {
                let d = x - self.cols.support[k];
                total += m * d * d;
            }
        }
        total
    }

    /// Largest deviation of the row and column sums from the marginals.
    pub fn marginal_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, row) in self.mass.iter().enumerate() {
            worst = worst.max((row.iter().sum::<f64>() - self.rows.probs[i]).abs());
        }
        for k in 0..self.cols.len() {
            let col: f64 = self.mass.iter().map(|row| row[k]).sum();
            worst = worst.max((col - self.cols.probs[k]).abs());
        }
        worst
    }

    /// Conditional law of the column variable given row index `i`, as
    /// `(column index, probability)` pairs with positive mass.
    pub fn row_conditional(&self, i: usize) -> Vec<(usize, f64)> {
        let p = self.rows.probs[i];
        self.mass[i]
            .iter()
            .enumerate()
            .filter(|(_, m)| **m > 0.0)
            .map(|(k, m)| (k, m / p))
            .collect()
    }
}

/// Walks the quantile coupling, calling `visit(i, k, mass)` for every cell
/// with positive mass.
fn quantile_walk(p: &ScalarPmf, q: &ScalarPmf, mut visit: impl FnMut(usize, usize, f64)) {
    let (np, nq) = (p.len(), q.len());
    let (mut i, mut k) = (0, 0);
    let (mut a, mut b) = (p.probs[0], q.probs[0]);
    while i < np && k < nq {
        let m = a.min(b);
        if m > 0.0 {
            visit(i, k, m);
        }
        a -= m;
        b -= m;
        if a <= 0.0 {
            i += 1;
            a = p.probs.get(i).copied().unwrap_or(0.0);
        }
        if b <= 0.0 {
            k += 1;
            b = q.probs.get(k).copied().unwrap_or(0.0);
        }
    }
    // Round-off can exhaust one side first; the leftover mass of the other
    // side is at rounding level and joins the last atom of the exhausted one.
    while i < np {
        if a > 0.0 {
            visit(i, nq - 1, a);
        }
        i += 1;
        a = p.probs.get(i).copied().unwrap_or(0.0);
    }
    while k < nq {
        if b > 0.0 {
            visit(np - 1, k, b);
        }
        k += 1;
        b = q.probs.get(k).copied().unwrap_or(0.0);
    }
}

/// Squared W2 distance between two discrete laws via the monotone coupling.
pub fn w2sq_discrete_1d(p: &ScalarPmf, q: &ScalarPmf) -> f64 {
    let mut total = 0.0;
    quantile_walk(p, q, |i, k, m| {
        let d = p.support[i] - q.support[k];
        total += m * d * d;
    });
    total
}

/// The quantile (monotone) coupling of `p` and `q`.
pub fn monotone_coupling(p: &ScalarPmf, q: &ScalarPmf) -> DiscreteCoupling {
    let mut mass = vec![vec![0.0; q.len()]; p.len()];
    quantile_walk(p, q, |i, k, m| mass[i][k] += m);
    DiscreteCoupling { rows: p.clone(), cols: q.clone(), mass }
}

/// Squared W2 distance `(σ_p - σ_q)²` between zero-mean 1-D Gaussians.
pub fn w2sq_gauss_1d(sigma_p: f64, sigma_q: f64) -> Result<f64, TransportError> {
    for s in [sigma_p, sigma_q] {
        if s.is_nan() || s < 0.0 {
            return Err(TransportError::NegativeInput(s));
        }
    }
    Ok((sigma_p - sigma_q) * (sigma_p - sigma_q))
}

/// Squared W2 distance between zero-mean Gaussians with covariances `Σ_p`,
/// `Σ_q`: `tr(Σ_p + Σ_q - 2 (Σ_p^{1/2} Σ_q Σ_p^{1/2})^{1/2})`.
pub fn w2sq_gauss_nd(cov_p: &Mat, cov_q: &Mat) -> Result<f64, TransportError> {
    if cov_p.rows() != cov_q.rows() || !cov_p.is_square() || !cov_q.is_square() {
        return Err(TransportError::Dimension(cov_p.rows(), cov_q.rows()));
    }
    if cov_p.rows() == 1 {
        let (a, b) = (cov_p[(0, 0)], cov_q[(0, 0)]);
        for v in [a, b] {
            if v < -linalg::NEG_EIG_TOL * v.abs().max(1.0) {
                return Err(LinalgError::NegativeEigenvalue(v).into());
            }
        }
        return w2sq_gauss_1d(a.max(0.0).sqrt(), b.max(0.0).sqrt());
    }
    let root_p = linalg::psd_sqrt(cov_p)?;
    // Validates the second argument in the same way as the first.
    linalg::psd_sqrt(cov_q)?;
    let middle = cov_q.congruence(&root_p)?.symmetrized();
    let cross = linalg::psd_sqrt(&middle)?;
    let value = cov_p.trace() + cov_q.trace() - 2.0 * cross.trace();
    Ok(if value.abs() < GAUSS_CLAMP_TOL { value.max(0.0) } else { value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_pmfs_have_zero_distance() {
        let p = ScalarPmf::new(vec![-1.0, 0.5, 2.0], vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(w2sq_discrete_1d(&p, &p), 0.0);
        let c = monotone_coupling(&p, &p);
        for (i, row) in c.mass.iter().enumerate() {
            for (k, m) in row.iter().enumerate() {
                if i != k {
                    assert_eq!(*m, 0.0);
                }
            }
        }
    }

    #[test]
    fn point_masses() {
        assert_eq!(w2sq_discrete_1d(&ScalarPmf::delta(0.0), &ScalarPmf::delta(3.0)), 9.0);
    }

    #[test]
    fn two_point_uniforms() {
        let p = ScalarPmf::new(vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let q = ScalarPmf::new(vec![-2.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert!((w2sq_discrete_1d(&p, &q) - 1.0).abs() < 1e-15);
        let c = monotone_coupling(&p, &q);
        assert_eq!(c.mass, vec![vec![0.5, 0.0], vec![0.0, 0.5]]);
    }

    #[test]
    fn coupling_marginals_and_cost() {
        let p = ScalarPmf::new(vec![0.0, 1.0, 4.0], vec![0.1, 0.6, 0.3]).unwrap();
        let q = ScalarPmf::new(vec![-1.0, 2.0], vec![0.55, 0.45]).unwrap();
        let c = monotone_coupling(&p, &q);
        assert!(c.marginal_error() < 1e-15);
        assert!((c.cost() - w2sq_discrete_1d(&p, &q)).abs() < 1e-15);
    }

    #[test]
    fn pmf_validation_and_merging() {
        assert!(ScalarPmf::new(vec![1.0, 0.0], vec![0.5, 0.5]).is_err());
        assert!(ScalarPmf::new(vec![0.0, 1.0], vec![0.5, 0.4]).is_err());
        assert!(ScalarPmf::new(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        let m = ScalarPmf::from_weighted([(1.0, 2.0), (0.0, 1.0), (1.0 + 1e-13, 1.0), (5.0, 0.0)]).unwrap();
        assert_eq!(m.support(), &[0.0, 1.0]);
        assert!((m.probs()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(w2sq_gauss_1d(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(w2sq_gauss_1d(2.0, 0.5).unwrap(), 2.25);
        assert!(w2sq_gauss_1d(-1.0, 0.5).is_err());
        let a = Mat::diag(&[4.0, 9.0]);
        let b = Mat::diag(&[1.0, 0.25]);
        let expected = (2.0_f64 - 1.0).powi(2) + (3.0_f64 - 0.5).powi(2);
        assert!((w2sq_gauss_nd(&a, &b).unwrap() - expected).abs() < 1e-12);
        let one_p = Mat::diag(&[2.0]);
        let one_q = Mat::diag(&[0.5]);
        assert_eq!(
            w2sq_gauss_nd(&one_p, &one_q).unwrap(),
            w2sq_gauss_1d(2.0_f64.sqrt(), 0.5_f64.sqrt()).unwrap()
        );
    }

    #[test]
    fn gaussian_rejects_asymmetric_input() {
        let a = Mat::from_rows(&[vec![1.0, 0.5], vec![0.2, 1.0]]).unwrap();
        assert!(w2sq_gauss_nd(&a, &Mat::identity(2)).is_err());
    }
}
