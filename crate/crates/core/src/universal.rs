//! Decoder-side linear transforms of a fixed MMSE representation.
//!
//! Given the representation `X_r,1..X_r,T` produced by the MMSE recursion at
//! rates `R`, any target law on the distortion-perception frontier at rates
//! `R' ≤ R` is reached by `X̂_j = Σ_{i≤j} c_{j,i} X_r,i + Z_j` with independent
//! Gaussian noise `Z_j`. Frame `j` has `j` unknown coefficients, fixed by the
//! `j − 1` covariances `E[X̂_j X̂_i]` with earlier outputs and by
//! `E[X̂_j X_j]`; the noise variance then matches `Var X̂_j`.

use crate::extremal::MmseRepresentationStats;
use crate::gauss_solver::{perception_of_stats, SolverError, TradeoffPoint};
use crate::linalg::{self, dot, LinalgError, Mat};
use crate::model::{assemble_joint_stats, GaussMarkovSource, JointGaussianStats, ModelError, PlfKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pivot threshold, relative to the largest matrix entry, below which a frame
/// system is reported singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Negative noise variances down to `-NOISE_TOL × scale` are clamped to zero.
pub const NOISE_TOL: f64 = 1e-9;

/// Small allowance when comparing target rates with representation rates.
pub const RATE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UniversalError {
    #[error("invalid transform input: {0}")]
    InvalidInput(String),
    #[error("frame {frame} needs negative noise: {detail}")]
    NegativeNoise { frame: usize, detail: String },
    #[error("frame {frame} system is singular: {source}")]
    SingularSystem { frame: usize, source: LinalgError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Causal linear map from the representation to the reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalTransform {
    /// `coefficients[j][i]` multiplies `X_r,i` in `X̂_j`, for `i ≤ j`.
    pub coefficients: Vec<Vec<f64>>,
    /// `Var Z_j`, clamped at zero.
    pub noise_vars: Vec<f64>,
}

impl UniversalTransform {
    /// `X̂_j = X_r,j` with no noise.
    pub fn identity(frames: usize) -> Self {
        let coefficients = (0..frames)
            .map(|j| {
                let mut row = vec![0.0; j + 1];
                row[j] = 1.0;
                row
            })
            .collect();
        Self { coefficients, noise_vars: vec![0.0; frames] }
    }

    pub fn frames(&self) -> usize {
        self.coefficients.len()
    }
}

/// Outcome of comparing a transformed representation with its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    /// Largest entrywise gap between the two covariances of `(X, X̂)`.
    pub max_cov_deviation: f64,
    /// Every noise variance is non-negative.
    pub noise_feasible: bool,
    pub min_noise_var: f64,
    /// Distortions of the transformed law.
    pub distortion: Vec<f64>,
    /// Perception values of the transformed law under the target's PLF.
    pub perception: Vec<f64>,
}

fn check_rates(mmse: &MmseRepresentationStats, target: &TradeoffPoint) -> Result<(), UniversalError> {
    let t = mmse.frames();
    if target.rates.len() != t || target.law.frames() != t {
        return Err(UniversalError::InvalidInput(format!(
            "representation has {t} frames, target has {}",
            target.rates.len()
        )));
    }
    for j in 0..t {
        let (rep, tgt) = (mmse.rates[j], target.rates[j]);
        if rep <= 0.0 || tgt <= 0.0 {
            return Err(UniversalError::InvalidInput(format!("frame {j} has a zero rate")));
        }
        if tgt > rep + RATE_TOL {
            return Err(UniversalError::NegativeNoise {
                frame: j,
                detail: format!("target rate {tgt} exceeds representation rate {rep}"),
            });
        }
    }
    Ok(())
}

/// `E[X_r,k X̂_i]` for every `k`, given the transform row of frame `i`.
fn rep_cross_output(mmse: &MmseRepresentationStats, row: &[f64]) -> Vec<f64> {
    (0..mmse.frames()).map(|k| row.iter().enumerate().map(|(l, c)| c * mmse.rep(k, l)).sum()).collect()
}

/// Solves frame by frame for the transform reaching `target`.
pub fn solve_transform(
    source: &GaussMarkovSource,
    mmse: &MmseRepresentationStats,
    target: &TradeoffPoint,
) -> Result<UniversalTransform, UniversalError> {
    check_rates(mmse, target)?;
    let t = mmse.frames();
    let goal = assemble_joint_stats(source, &target.law)?;
    let mut coefficients: Vec<Vec<f64>> = Vec::with_capacity(t);
    let mut cross_out: Vec<Vec<f64>> = Vec::with_capacity(t);
    let mut noise_vars = Vec::with_capacity(t);
    for j in 0..t {
        let n = j + 1;
        let mut a = Mat::zeros(n, n);
        let mut b = vec![0.0; n];
        for (i, cross) in cross_out.iter().enumerate() {
            for k in 0..n {
                a[(i, k)] = cross[k];
            }
            b[i] = goal.cov[(goal.xhat(j), goal.xhat(i))];
        }
        for k in 0..n {
            a[(j, k)] = mmse.cross(j, k);
        }
        b[j] = goal.cov[(goal.x(j), goal.xhat(j))];
        let c = linalg::solve(&a, &b, SINGULAR_TOL).map_err(|e| UniversalError::SingularSystem { frame: j, source: e })?;
        let rep = Mat::from_fn(n, n, |k, l| mmse.rep(k, l));
        let explained = dot(&c, &rep.mul_vec(&c)?);
        let target_var = goal.cov[(goal.xhat(j), goal.xhat(j))];
        let noise = target_var - explained;
        let scale = target_var.abs().max(source.sigma(j).powi(2));
        if noise < -NOISE_TOL * scale {
            return Err(UniversalError::NegativeNoise {
                frame: j,
                detail: format!("Var X̂ = {target_var}, explained variance {explained}"),
            });
        }
        noise_vars.push(noise.max(0.0));
        cross_out.push(rep_cross_output(mmse, &c));
        coefficients.push(c);
    }
    Ok(UniversalTransform { coefficients, noise_vars })
}

/// Covariance of `(X_1..X_T, X̂_1..X̂_T)` when `X̂` is produced by the
/// transform.
pub fn transformed_stats(
    mmse: &MmseRepresentationStats,
    transform: &UniversalTransform,
) -> Result<JointGaussianStats, UniversalError> {
    let t = mmse.frames();
    if transform.frames() != t || transform.noise_vars.len() != t {
        return Err(UniversalError::InvalidInput(format!(
            "transform has {} frames, representation has {t}",
            transform.frames()
        )));
    }
    for (j, row) in transform.coefficients.iter().enumerate() {
        if row.len() != j + 1 {
            return Err(UniversalError::InvalidInput(format!(
                "frame {j} must read exactly {} representations, got {}",
                j + 1,
                row.len()
            )));
        }
    }
    let map = Mat::from_fn(2 * t, 2 * t, |r, c| {
        if r < t {
            if r == c {
                1.0
            } else {
                0.0
            }
        } else if c >= t {
            transform.coefficients[r - t].get(c - t).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    });
    let mut cov = mmse.stats.cov.congruence(&map)?;
    for (j, v) in transform.noise_vars.iter().enumerate() {
        cov[(t + j, t + j)] += v;
    }
    Ok(JointGaussianStats { frames: t, cov: cov.symmetrized() })
}

/// Compares the full covariance reached by the transform with the target's.
pub fn verify_transform(
    source: &GaussMarkovSource,
    mmse: &MmseRepresentationStats,
    transform: &UniversalTransform,
    target: &TradeoffPoint,
) -> Result<TransformReport, UniversalError> {
    let reached = transformed_stats(mmse, transform)?;
    let goal = assemble_joint_stats(source, &target.law)?;
    let max_cov_deviation = reached.cov.max_abs_diff(&goal.cov);
    let min_noise_var = transform.noise_vars.iter().copied().fold(f64::INFINITY, f64::min);
    let perception = perception_of_stats(source, &reached, target.plf)?;
    Ok(TransformReport {
        max_cov_deviation,
        noise_feasible: min_noise_var >= 0.0,
        min_noise_var,
        distortion: reached.distortions(),
        perception,
    })
}

/// One verified target, in the shape written by the command-line tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalRecord {
    pub rates: Vec<f64>,
    pub distortion: Vec<f64>,
    pub perception: Vec<f64>,
    pub plf: PlfKind,
    pub coefficients: Vec<Vec<f64>>,
    pub noise_vars: Vec<f64>,
    pub max_cov_deviation: f64,
}

/// Solves and verifies every target in parallel; the output order follows
/// the input order.
pub fn verify_batch(
    source: &GaussMarkovSource,
    mmse: &MmseRepresentationStats,
    targets: &[TradeoffPoint],
) -> Vec<Result<UniversalRecord, UniversalError>> {
    targets
        .par_iter()
        .map(|target| {
            let transform = solve_transform(source, mmse, target)?;
            let report = verify_transform(source, mmse, &transform, target)?;
            Ok(UniversalRecord {
                rates: target.rates.values().to_vec(),
                distortion: report.distortion,
                perception: report.perception,
                plf: target.plf,
                coefficients: transform.coefficients,
                noise_vars: transform.noise_vars,
                max_cov_deviation: report.max_cov_deviation,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extremal::{mmse_recursion, rates_for_constant_mmse};
    use crate::gauss_solver::{solve_point, SolverConfig};
    use crate::model::{PerceptionTuple, RateTuple};

    #[test]
    fn mmse_target_gives_identity() {
        let source = GaussMarkovSource::symmetric(2, 1.0, 0.8).unwrap();
        let rates = RateTuple::new(vec![1.0, 0.7]).unwrap();
        let mmse = mmse_recursion(&source, &rates).unwrap();
        let p = PerceptionTuple::uniform(2, f64::INFINITY).unwrap();
        let target = solve_point(&source, &rates, &p, PlfKind::Fmd, &SolverConfig::default()).unwrap();
        let tr = solve_transform(&source, &mmse, &target).unwrap();
        let id = UniversalTransform::identity(2);
        for (a, b) in tr.coefficients.iter().flatten().zip(id.coefficients.iter().flatten()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!(tr.noise_vars.iter().all(|v| *v < 1e-9));
    }

    #[test]
    fn constant_distortion_scaling() {
        let (rho, d) = (0.7, 0.3);
        let source = GaussMarkovSource::symmetric(3, 1.0, rho).unwrap();
        let rates = rates_for_constant_mmse(rho, d, 3).unwrap();
        let mmse = mmse_recursion(&source, &rates).unwrap();
        for plf in [PlfKind::Fmd, PlfKind::Jd] {
            let p = PerceptionTuple::uniform(3, 0.0).unwrap();
            let target = solve_point(&source, &rates, &p, plf, &SolverConfig::default()).unwrap();
            let tr = solve_transform(&source, &mmse, &target).unwrap();
            for (j, row) in tr.coefficients.iter().enumerate() {
                for (i, c) in row.iter().enumerate() {
                    let want = if i == j { 1.0 / (1.0 - d).sqrt() } else { 0.0 };
                    assert!((c - want).abs() < 1e-10, "{plf} frame {j} coefficient {i}: {c}");
                }
            }
            let report = verify_transform(&source, &mmse, &tr, &target).unwrap();
            assert!(report.max_cov_deviation < 1e-10);
            for dj in &report.distortion {
                assert!((dj - (2.0 - 2.0 * (1.0 - d).sqrt())).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn excess_rate_is_rejected() {
        let source = GaussMarkovSource::symmetric(2, 1.0, 0.5).unwrap();
        let mmse = mmse_recursion(&source, &RateTuple::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let rates = RateTuple::new(vec![0.5, 1.0]).unwrap();
        let p = PerceptionTuple::uniform(2, 0.0).unwrap();
        let target = solve_point(&source, &rates, &p, PlfKind::Fmd, &SolverConfig::default()).unwrap();
        assert!(matches!(solve_transform(&source, &mmse, &target), Err(UniversalError::NegativeNoise { frame: 1, .. })));
    }
}
