//! Domain types shared across the crate: Gauss-Markov source laws, rate,
//! distortion and perception tuples, linear Gaussian reconstruction laws and
//! the covariance assembly every analytic computation reads from.

use crate::linalg::{LinalgError, Mat};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Errors raised while validating or assembling model objects.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid source: {0}")]
    InvalidSource(String),
    #[error("invalid tuple: {0}")]
    InvalidTuple(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("negative implied variance {value:e} at frame {frame}")]
    NegativeVariance { frame: usize, value: f64 },
    #[error("inconsistent reconstruction variance at frame {frame}: stored {stored}, implied {implied}")]
    InconsistentVariance { frame: usize, stored: f64, implied: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Zero-mean scalar Gauss-Markov source
/// `X_{j+1} = ρ_j (σ_{j+1}/σ_j) X_j + N_j` with `Var N_j = (1-ρ_j²) σ_{j+1}²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussMarkovSource {
    sigma: Vec<f64>,
    rho: Vec<f64>,
}

impl GaussMarkovSource {
    /// Validates `σ_j > 0` and `|ρ_j| ≤ 1`; `rho` must have one entry fewer
    /// than `sigma`.
    pub fn new(sigma: Vec<f64>, rho: Vec<f64>) -> Result<Self, ModelError> {
        if sigma.is_empty() {
            return Err(ModelError::InvalidSource("at least one frame is required".into()));
        }
        if rho.len() + 1 != sigma.len() {
            return Err(ModelError::InvalidSource(format!(
                "{} frames need {} correlation coefficients, got {}",
                sigma.len(),
                sigma.len() - 1,
                rho.len()
            )));
        }
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(ModelError::InvalidSource(format!("standard deviation {s} is not positive")));
        }
        if let Some(r) = rho.iter().find(|r| !(r.is_finite() && r.abs() <= 1.0)) {
            return Err(ModelError::InvalidSource(format!("correlation {r} outside [-1, 1]")));
        }
        Ok(Self { sigma, rho })
    }

    /// Stationary source with equal variances and a common correlation.
    pub fn symmetric(frames: usize, sigma: f64, rho: f64) -> Result<Self, ModelError> {
        Self::new(vec![sigma; frames], vec![rho; frames.saturating_sub(1)])
    }

    pub fn frames(&self) -> usize {
        self.sigma.len()
    }

    /// Standard deviation of frame `j` (zero-based).
    pub fn sigma(&self, j: usize) -> f64 {
        self.sigma[j]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Correlation between frames `j` and `j+1` (zero-based).
    pub fn rho(&self, j: usize) -> f64 {
        self.rho[j]
    }

    pub fn rhos(&self) -> &[f64] {
        &self.rho
    }

    /// Innovation variance `(1-ρ_j²) σ_{j+1}²`, clamped at zero.
    pub fn innovation_var(&self, j: usize) -> f64 {
        ((1.0 - self.rho[j] * self.rho[j]) * self.sigma[j + 1] * self.sigma[j + 1]).max(0.0)
    }

    /// Regression coefficient of `X_{j+1}` on `X_j`.
    pub fn transition_gain(&self, j: usize) -> f64 {
        self.rho[j] * self.sigma[j + 1] / self.sigma[j]
    }

    /// `Cov(X_i, X_k) = σ_i σ_k ∏_{l=min}^{max-1} ρ_l`.
    pub fn cov(&self, i: usize, k: usize) -> f64 {
        let (lo, hi) = if i <= k { (i, k) } else { (k, i) };
        let prod: f64 = self.rho[lo..hi].iter().product();
        self.sigma[i] * self.sigma[k] * prod
    }

    /// Covariance matrix of `(X_1..X_T)`.
    pub fn covariance(&self) -> Mat {
        let t = self.frames();
        Mat::from_fn(t, t, |i, k| self.cov(i, k))
    }

    /// Source restricted to the first `frames` frames.
    pub fn truncated(&self, frames: usize) -> Result<Self, ModelError> {
        if frames == 0 || frames > self.frames() {
            return Err(ModelError::Dimension(format!("cannot truncate to {frames} frames")));
        }
        Self::new(self.sigma[..frames].to_vec(), self.rho[..frames - 1].to_vec())
    }
}

macro_rules! bound_tuple {
    ($(#[$doc:meta])* $name:ident, $what:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(Vec<f64>);

        impl $name {
            /// Accepts non-negative entries; `+inf` means unconstrained.
            pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
                if let Some(v) = values.iter().find(|v| v.is_nan() || **v < 0.0) {
                    return Err(ModelError::InvalidTuple(format!("{} entry {v} is negative", $what)));
                }
                Ok(Self(values))
            }

            pub fn uniform(frames: usize, value: f64) -> Result<Self, ModelError> {
                Self::new(vec![value; frames])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn values(&self) -> &[f64] {
                &self.0
            }

            pub fn get(&self, j: usize) -> f64 {
                self.0[j]
            }
        }

        impl std::ops::Index<usize> for $name {
            type Output = f64;
            fn index(&self, j: usize) -> &f64 {
                &self.0[j]
            }
        }
    };
}

bound_tuple!(
    /// Per-frame rates in bits.
    RateTuple,
    "rate"
);
bound_tuple!(
    /// Per-frame mean squared errors.
    DistortionTuple,
    "distortion"
);
bound_tuple!(
    /// Per-frame perception values or thresholds (squared Wasserstein-2).
    PerceptionTuple,
    "perception"
);

/// Perception loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlfKind {
    /// Per-frame marginal distributions.
    Fmd,
    /// Joint distribution of all frames so far.
    Jd,
}

impl fmt::Display for PlfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlfKind::Fmd => "FMD",
            PlfKind::Jd => "JD",
        })
    }
}

impl std::str::FromStr for PlfKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fmd" => Ok(PlfKind::Fmd),
            "jd" => Ok(PlfKind::Jd),
            other => Err(ModelError::InvalidTuple(format!("unknown perception kind {other:?}"))),
        }
    }
}

/// One frame of a linear Gaussian decoder
/// `X̂_j = Σ_{i<j} a_i X̂_i + b X_j + Z_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLaw {
    /// Coefficients `a_i` on earlier reconstructions.
    pub past: Vec<f64>,
    /// Coefficient `b` on the current source frame.
    pub source: f64,
    /// Variance of the independent noise `Z_j`.
    pub noise_var: f64,
    /// Variance of `X̂_j` implied by the coefficients and the source law.
    pub sigma_hat_sq: f64,
}

/// Tolerance for the stored-versus-implied reconstruction variance check.
pub const SELF_CONSISTENCY_TOL: f64 = 1e-12;

/// Linear Gaussian reconstruction law for all frames.
///
/// The noise `Z_j` is independent of every source frame and of every other
/// noise term, which is the Markov structure a causal decoder induces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReconstructionLaw {
    frames: Vec<FrameLaw>,
}

/// Coefficients of one frame before the implied variance is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCoefficients {
    pub past: Vec<f64>,
    pub source: f64,
    pub noise_var: f64,
}

impl FrameCoefficients {
    pub fn new(past: Vec<f64>, source: f64, noise_var: f64) -> Self {
        Self { past, source, noise_var }
    }
}

impl LinearReconstructionLaw {
    /// Builds a law from coefficients, computing each `σ̂_j²` from the
    /// source law.
    pub fn from_coefficients(
        source: &GaussMarkovSource,
        coefficients: Vec<FrameCoefficients>,
    ) -> Result<Self, ModelError> {
        let provisional = Self {
            frames: coefficients
                .into_iter()
                .map(|c| FrameLaw { past: c.past, source: c.source, noise_var: c.noise_var, sigma_hat_sq: 0.0 })
                .collect(),
        };
        let stats = assemble_joint_stats(source, &provisional)?;
        let mut frames = provisional.frames;
        for (j, f) in frames.iter_mut().enumerate() {
            f.sigma_hat_sq = stats.cov[(stats.xhat(j), stats.xhat(j))];
        }
        Ok(Self { frames })
    }

    /// Accepts fully specified frames after checking that every stored
    /// `σ̂_j²` matches the implied variance within [`SELF_CONSISTENCY_TOL`]
    /// (relative to the variance scale).
    pub fn new(source: &GaussMarkovSource, frames: Vec<FrameLaw>) -> Result<Self, ModelError> {
        let law = Self { frames };
        let stats = assemble_joint_stats(source, &law)?;
        let t = source.frames();
        for (j, f) in law.frames.iter().enumerate() {
            let implied = stats.cov[(t + j, t + j)];
            if (implied - f.sigma_hat_sq).abs() > SELF_CONSISTENCY_TOL * implied.abs().max(1.0) {
                return Err(ModelError::InconsistentVariance { frame: j, stored: f.sigma_hat_sq, implied });
            }
        }
        Ok(law)
    }

    /// `X̂_j = X_j` for every frame.
    pub fn identity(source: &GaussMarkovSource) -> Self {
        let frames = (0..source.frames())
            .map(|j| FrameLaw {
                past: vec![0.0; j],
                source: 1.0,
                noise_var: 0.0,
                sigma_hat_sq: source.sigma(j) * source.sigma(j),
            })
            .collect();
        Self { frames }
    }

    pub fn frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, j: usize) -> &FrameLaw {
        &self.frames[j]
    }

    pub fn frame_laws(&self) -> &[FrameLaw] {
        &self.frames
    }

    /// Law restricted to the first `frames` frames.
    pub fn truncated(&self, frames: usize) -> Self {
        Self { frames: self.frames[..frames.min(self.frames.len())].to_vec() }
    }

    /// Coefficients of every frame, without the stored variances.
    pub fn coefficients(&self) -> Vec<FrameCoefficients> {
        self.frames
            .iter()
            .map(|f| FrameCoefficients::new(f.past.clone(), f.source, f.noise_var))
            .collect()
    }
}

/// Covariance of `(X_1..X_T, X̂_1..X̂_T)`; all means are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussianStats {
    /// Number of frames `T`; the matrix has dimension `2T`.
    pub frames: usize,
    pub cov: Mat,
}

impl JointGaussianStats {
    /// Index of `X_j` in the covariance matrix.
    pub fn x(&self, j: usize) -> usize {
        j
    }

    /// Index of `X̂_j` in the covariance matrix.
    pub fn xhat(&self, j: usize) -> usize {
        self.frames + j
    }

    /// Covariance of `(X_1..X_T)`.
    pub fn source_block(&self) -> Mat {
        let idx: Vec<usize> = (0..self.frames).collect();
        self.cov.select(&idx)
    }

    /// Covariance of `(X̂_1..X̂_T)`.
    pub fn reconstruction_block(&self) -> Mat {
        let idx: Vec<usize> = (self.frames..2 * self.frames).collect();
        self.cov.select(&idx)
    }

    /// Covariance of `(X_1..X_j)` (first `j` frames).
    pub fn source_prefix(&self, j: usize) -> Mat {
        let idx: Vec<usize> = (0..j).collect();
        self.cov.select(&idx)
    }

    /// Covariance of `(X̂_1..X̂_j)`.
    pub fn reconstruction_prefix(&self, j: usize) -> Mat {
        let idx: Vec<usize> = (self.frames..self.frames + j).collect();
        self.cov.select(&idx)
    }

    /// `E[(X_j - X̂_j)²]` for every frame.
    pub fn distortions(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|j| {
                let (a, b) = (self.x(j), self.xhat(j));
                (self.cov[(a, a)] + self.cov[(b, b)] - 2.0 * self.cov[(a, b)]).max(0.0)
            })
            .collect()
    }
}

/// Relative tolerance on the positive semidefiniteness of assembled
/// covariances.
pub const PSD_TOL: f64 = 1e-9;

/// Assembles the covariance of `(X_1..X_T, X̂_1..X̂_T)` by forward
/// substitution through the linear law.
pub fn assemble_joint_stats(
    source: &GaussMarkovSource,
    law: &LinearReconstructionLaw,
) -> Result<JointGaussianStats, ModelError> {
    let t = source.frames();
    if law.frames() != t {
        return Err(ModelError::Dimension(format!("law has {} frames, source has {t}", law.frames())));
    }
    let n = 2 * t;
    let mut cov = Mat::zeros(n, n);
    for i in 0..t {
        for k in 0..t {
            cov[(i, k)] = source.cov(i, k);
        }
    }
    for j in 0..t {
        let f = &law.frames[j];
        if f.past.len() != j {
            return Err(ModelError::Dimension(format!(
                "frame {j} needs {j} past coefficients, got {}",
                f.past.len()
            )));
        }
        if f.noise_var.is_nan() || f.noise_var < 0.0 {
            return Err(ModelError::NegativeVariance { frame: j, value: f.noise_var });
        }
        // Linear combination row over the already-defined variables.
        let mut row = vec![0.0; n];
        row[j] = f.source;
        for (i, a) in f.past.iter().enumerate() {
            row[t + i] = *a;
        }
        let defined = t + j;
        let mut cross = vec![0.0; defined];
        for (v, c) in cross.iter_mut().enumerate() {
            *c = (0..defined).map(|u| row[u] * cov[(u, v)]).sum();
        }
        let signal: f64 = (0..defined).map(|u| row[u] * cross[u]).sum();
        let var = signal + f.noise_var;
        if var < -PSD_TOL * var.abs().max(1.0) {
            return Err(ModelError::NegativeVariance { frame: j, value: var });
        }
        let me = t + j;
        for (v, c) in cross.iter().enumerate() {
            cov[(me, v)] = *c;
            cov[(v, me)] = *c;
        }
        cov[(me, me)] = var.max(0.0);
    }
    Ok(JointGaussianStats { frames: t, cov })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_validation() {
        assert!(GaussMarkovSource::new(vec![1.0, 0.0], vec![0.5]).is_err());
        assert!(GaussMarkovSource::new(vec![1.0, 1.0], vec![1.5]).is_err());
        assert!(GaussMarkovSource::new(vec![1.0, 1.0], vec![]).is_err());
        let s = GaussMarkovSource::new(vec![1.0, 2.0, 0.5], vec![0.5, -1.0]).unwrap();
        assert_eq!(s.innovation_var(1), 0.0);
        assert!((s.cov(0, 2) - 1.0 * 0.5 * 0.5 * -1.0).abs() < 1e-15);
    }

    #[test]
    fn tuples_reject_negative_and_accept_infinity() {
        assert!(RateTuple::new(vec![1.0, -0.1]).is_err());
        assert!(PerceptionTuple::new(vec![f64::INFINITY]).is_ok());
        assert!(DistortionTuple::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn identity_law_copies_source_block() {
        let s = GaussMarkovSource::new(vec![1.0, 1.5, 0.7], vec![0.9, 0.3]).unwrap();
        let stats = assemble_joint_stats(&s, &LinearReconstructionLaw::identity(&s)).unwrap();
        assert_eq!(stats.source_block(), stats.reconstruction_block());
        assert!(stats.distortions().iter().all(|d| *d == 0.0));
    }

    #[test]
    fn stored_variance_is_checked() {
        let s = GaussMarkovSource::symmetric(1, 1.0, 0.0).unwrap();
        let good = FrameLaw { past: vec![], source: 0.5, noise_var: 0.25, sigma_hat_sq: 0.5 };
        assert!(LinearReconstructionLaw::new(&s, vec![good.clone()]).is_ok());
        let bad = FrameLaw { sigma_hat_sq: 0.6, ..good };
        assert!(matches!(
            LinearReconstructionLaw::new(&s, vec![bad]),
            Err(ModelError::InconsistentVariance { .. })
        ));
    }
}
