//! Closed-form evaluators: dominant-term reconstructions at extremal rates,
//! low-rate distortion coefficients for `T` frames, and the MMSE
//! representation recursion.

use crate::gauss_solver::{rate_gain, solve_point, SolverConfig, SolverError};
use crate::model::{
    assemble_joint_stats, DistortionTuple, FrameCoefficients, GaussMarkovSource, JointGaussianStats,
    LinearReconstructionLaw, ModelError, PerceptionTuple, PlfKind, RateTuple,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use std::fmt;
use thiserror::Error;

/// Rate (in bits) that stands in for an infinite rate when a closed form is
/// compared against the numerical solver.
pub const INFINITE_RATE_PROXY: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtremalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no closed form for {0}")]
    NotInTable(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Which of the two rates is small.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RatePattern {
    /// `R₁ = R₂ = ε`.
    LowLow,
    /// `R₁ = ∞`, `R₂ = ε`.
    InfLow,
    /// `R₁ = ε`, `R₂ = ∞`.
    LowInf,
}

impl RatePattern {
    pub const ALL: [RatePattern; 3] = [RatePattern::LowLow, RatePattern::InfLow, RatePattern::LowInf];

    /// Symbolic rates; infinite entries are `f64::INFINITY`.
    pub fn rates(self, eps: f64) -> [f64; 2] {
        match self {
            RatePattern::LowLow => [eps, eps],
            RatePattern::InfLow => [f64::INFINITY, eps],
            RatePattern::LowInf => [eps, f64::INFINITY],
        }
    }

    /// Rates with infinite entries replaced by [`INFINITE_RATE_PROXY`].
    pub fn solver_rates(self, eps: f64) -> [f64; 2] {
        self.rates(eps).map(|r| if r.is_infinite() { INFINITE_RATE_PROXY } else { r })
    }
}

impl fmt::Display for RatePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatePattern::LowLow => "eps_eps",
            RatePattern::InfLow => "inf_eps",
            RatePattern::LowInf => "eps_inf",
        })
    }
}

/// Reconstruction family: unconstrained MMSE or zero perception under a PLF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    Mmse,
    ZeroPerception(PlfKind),
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Mmse, Scheme::ZeroPerception(PlfKind::Fmd), Scheme::ZeroPerception(PlfKind::Jd)];
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Mmse => f.write_str("MMSE"),
            Scheme::ZeroPerception(k) => write!(f, "{k}"),
        }
    }
}

/// A rate pattern with its small rate `ε` (bits) and a scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremalRegime {
    pub pattern: RatePattern,
    pub eps: f64,
    pub scheme: Scheme,
}

/// Order in `ε` of the gap between a dominant-term distortion and the exact
/// optimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorOrder {
    Eps,
    EpsSquared,
}

/// Dominant-term law and distortions of one extremal cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremalCell {
    pub law: LinearReconstructionLaw,
    pub d1: f64,
    pub d2: f64,
    pub order: ErrorOrder,
}

/// Dominant-term reconstruction of an extremal-rate cell for
/// `σ₁ = σ₂ = σ`, writing `a = 2ε ln 2`.
///
/// Distortions are the values implied by each law: in particular the
/// joint-realism cell with `R₁ = ε`, `R₂ = ∞` has `D₁ = 2(1 − √a)σ²`, and the
/// noise variance of the marginal-realism cell with `R₁ = ∞`, `R₂ = ε` is
/// `((1 − ρ²)/ρ²)·a·σ²`.
pub fn table1_law(regime: ExtremalRegime, sigma: f64, rho: f64) -> Result<ExtremalCell, ExtremalError> {
    let eps = regime.eps;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(ExtremalError::InvalidArgument(format!("eps = {eps} must be positive")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) || !(-1.0..=1.0).contains(&rho) {
        return Err(ExtremalError::InvalidArgument(format!("sigma = {sigma}, rho = {rho}")));
    }
    let source = GaussMarkovSource::symmetric(2, sigma, rho)?;
    let s2 = sigma * sigma;
    let a = 2.0 * eps * LN_2;
    let ra = a.sqrt();
    let r2 = rho * rho;
    let c = FrameCoefficients::new;
    let (f1, f2, d1, d2, order) = match (regime.scheme, regime.pattern) {
        (Scheme::Mmse, RatePattern::LowLow) => (
            c(vec![], a, a * s2),
            c(vec![rho], a, a * s2),
            (1.0 - a) * s2,
            (1.0 - (1.0 + r2) * a) * s2,
            ErrorOrder::EpsSquared,
        ),
        (Scheme::Mmse, RatePattern::InfLow) => (
            c(vec![], 1.0, 0.0),
            c(vec![rho - rho * a], a, (1.0 - r2) * a * s2),
            0.0,
            (1.0 - r2 - (1.0 - r2) * a) * s2,
            ErrorOrder::EpsSquared,
        ),
        (Scheme::Mmse, RatePattern::LowInf) => {
            (c(vec![], a, a * s2), c(vec![0.0], 1.0, 0.0), (1.0 - a) * s2, 0.0, ErrorOrder::EpsSquared)
        }
        (Scheme::ZeroPerception(PlfKind::Fmd), RatePattern::LowLow) => (
            c(vec![], ra, (1.0 - a) * s2),
            c(
                vec![rho / (1.0 + r2).sqrt()],
                (a / (1.0 + r2)).sqrt(),
                (1.0 - r2 / (1.0 + r2) - (1.0 + 2.0 * r2) / (1.0 + r2) * a) * s2,
            ),
            2.0 * (1.0 - ra) * s2,
            2.0 * (1.0 - ((1.0 + r2) * a).sqrt()) * s2,
            ErrorOrder::Eps,
        ),
        (Scheme::ZeroPerception(PlfKind::Fmd), RatePattern::InfLow) => {
            if rho == 0.0 {
                return Err(ExtremalError::NotInTable("marginal realism with R1 = inf needs rho != 0".into()));
            }
            (
                c(vec![], 1.0, 0.0),
                c(vec![1.0 - (1.0 + r2) * a / (2.0 * r2)], a / rho, (1.0 - r2) / r2 * a * s2),
                0.0,
                2.0 * (1.0 - rho - (1.0 - r2) / (2.0 * rho) * a) * s2,
                ErrorOrder::EpsSquared,
            )
        }
        (Scheme::ZeroPerception(PlfKind::Fmd), RatePattern::LowInf) => {
            (c(vec![], ra, (1.0 - a) * s2), c(vec![0.0], 1.0, 0.0), 2.0 * (1.0 - ra) * s2, 0.0, ErrorOrder::Eps)
        }
        (Scheme::ZeroPerception(PlfKind::Jd), RatePattern::LowLow) => (
            c(vec![], ra, (1.0 - a) * s2),
            c(vec![rho], ((1.0 - r2) * a).sqrt(), (1.0 - r2 - (1.0 - r2) * a) * s2),
            2.0 * (1.0 - ra) * s2,
            2.0 * (1.0 - (r2 + (1.0 - r2).sqrt()) * ra) * s2,
            ErrorOrder::Eps,
        ),
        (Scheme::ZeroPerception(PlfKind::Jd), RatePattern::InfLow) => (
            c(vec![], 1.0, 0.0),
            c(vec![rho - rho * ra], ra, (1.0 - r2) * s2),
            0.0,
            2.0 * (1.0 - r2 - (1.0 - r2) * ra) * s2,
            ErrorOrder::Eps,
        ),
        (Scheme::ZeroPerception(PlfKind::Jd), RatePattern::LowInf) => (
            c(vec![], ra, (1.0 - a) * s2),
            c(vec![rho], (1.0 - r2).sqrt(), 0.0),
            2.0 * (1.0 - ra) * s2,
            2.0 * (1.0 - (1.0 - r2).sqrt() - r2 * ra) * s2,
            ErrorOrder::Eps,
        ),
    };
    let law = LinearReconstructionLaw::from_coefficients(&source, vec![f1, f2])?;
    Ok(ExtremalCell { law, d1, d2, order })
}

/// Distortions of an extremal cell computed by the numerical solver, with
/// infinite rates replaced by [`INFINITE_RATE_PROXY`].
pub fn solver_distortions(regime: ExtremalRegime, sigma: f64, rho: f64, cfg: &SolverConfig) -> Result<[f64; 2], ExtremalError> {
    let source = GaussMarkovSource::symmetric(2, sigma, rho)?;
    let rates = RateTuple::new(regime.pattern.solver_rates(regime.eps).to_vec())?;
    let (plf, p) = match regime.scheme {
        Scheme::Mmse => (PlfKind::Fmd, f64::INFINITY),
        Scheme::ZeroPerception(k) => (k, 0.0),
    };
    let point = solve_point(&source, &rates, &PerceptionTuple::uniform(2, p)?, plf, cfg)?;
    Ok([point.distortion[0], point.distortion[1]])
}

/// Low-rate distortion coefficients of frame `j` under both PLFs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowRateDeltas {
    pub delta_fmd: f64,
    pub delta_jd: f64,
    /// `2(1 − Δ_FMD √(2ε ln 2))σ²`.
    pub d_fmd: f64,
    /// `2(1 − Δ_JD √(2ε ln 2))σ²`.
    pub d_jd: f64,
}

/// Low-rate coefficients for frame `j ≥ 1` (one-based) with `R_i = ε`,
/// `ρ_i = ρ`, `σ_i = σ`:
/// `Δ_FMD,j = √(1 + ρ²((2ρ²)^{j−1} − 1)/(2ρ² − 1))` (taken as
/// `√(1 + (j−1)/2)` at `ρ² = 1/2`) and
/// `Δ_JD,j = ρ^{2(j−1)} + 1{j ≥ 2}·√(1 − ρ²)·Σ_{i=0}^{j−2} ρ^{2i}`.
///
/// For `j ≥ 3` and `ρ` near one this `Δ_FMD,j` exceeds `√j`, which no
/// scheme reaches: frame `j` sees at most `jε` bits, so a reconstruction with
/// `Var X̂_j = σ²` has `Cov(X_j, X̂_j) ≤ σ²√(1 − 2^{−2jε})` and hence `Δ ≤ √j`
/// to leading order. The sequential optimum attains [`fmd_delta_sequential`].
pub fn theorem5_deltas(rho: f64, j: usize, eps: f64, sigma: f64) -> Result<LowRateDeltas, ExtremalError> {
    if j == 0 {
        return Err(ExtremalError::InvalidArgument("frame index is one-based".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(ExtremalError::InvalidArgument(format!("rho = {rho} outside [0, 1]")));
    }
    let r2 = rho * rho;
    let n = (j - 1) as i32;
    let base = 2.0 * r2;
    // ρ²·Σ_{i=0}^{j−2} (2ρ²)^i equals ρ²((2ρ²)^{j−1} − 1)/(2ρ² − 1) and stays
    // finite at 2ρ² = 1.
    let geometric: f64 = if (base - 1.0).abs() < 1e-8 {
        (0..n).map(|i| base.powi(i)).sum()
    } else {
        (base.powi(n) - 1.0) / (base - 1.0)
    };
    let delta_fmd = (1.0 + r2 * geometric).sqrt();
    let tail: f64 = if j >= 2 { (1.0 - r2).sqrt() * (0..(j - 1) as i32).map(|i| r2.powi(i)).sum::<f64>() } else { 0.0 };
    let delta_jd = r2.powi(n) + tail;
    let root = (2.0 * eps * LN_2).sqrt();
    let s2 = sigma * sigma;
    Ok(LowRateDeltas {
        delta_fmd,
        delta_jd,
        d_fmd: 2.0 * (1.0 - delta_fmd * root) * s2,
        d_jd: 2.0 * (1.0 - delta_jd * root) * s2,
    })
}

/// Leading low-rate coefficient of the sequential marginal-realism optimum:
/// `Δ_j = √(Σ_{i=0}^{j−1} ρ^{2i})`.
pub fn fmd_delta_sequential(rho: f64, j: usize) -> f64 {
    (0..j as i32).map(|i| (rho * rho).powi(i)).sum::<f64>().sqrt()
}

/// Joint second-order statistics of the source and the MMSE representation.
#[derive(Debug, Clone, PartialEq)]
pub struct MmseRepresentationStats {
    pub rates: RateTuple,
    pub distortion: DistortionTuple,
    /// Representation written as a causal linear law.
    pub law: LinearReconstructionLaw,
    /// Covariance of `(X_1..X_T, X_r,1..X_r,T)`.
    pub stats: JointGaussianStats,
}

impl MmseRepresentationStats {
    /// `E[X_i X_r,k]`.
    pub fn cross(&self, i: usize, k: usize) -> f64 {
        self.stats.cov[(self.stats.x(i), self.stats.xhat(k))]
    }

    /// `E[X_r,i X_r,k]`.
    pub fn rep(&self, i: usize, k: usize) -> f64 {
        self.stats.cov[(self.stats.xhat(i), self.stats.xhat(k))]
    }

    pub fn frames(&self) -> usize {
        self.stats.frames
    }
}

/// MMSE distortions `D_1 = σ₁²2^{−2R₁}`,
/// `D_{j+1} = (ρ_j²(σ²_{j+1}/σ²_j)D_j + (1−ρ_j²)σ²_{j+1})·2^{−2R_{j+1}}`,
/// and the representation built from the innovations.
///
/// With `X_j = X_r,j + Z_j` and `Z_j ⊥ X_r,≤j`, the innovation
/// `W_{j+1} = X_{j+1} − g_j X_r,j = g_j Z_j + N_j` (with `g_j = ρ_j σ_{j+1}/σ_j`)
/// is quantized by the Gaussian test channel
/// `W̃ = K W + Ξ`, `Var Ξ = K(1−K)Var W`, giving
/// `X_r,j+1 = (1−K) g_j X_r,j + K X_{j+1} + Ξ`.
pub fn mmse_recursion(source: &GaussMarkovSource, rates: &RateTuple) -> Result<MmseRepresentationStats, ExtremalError> {
    let t = source.frames();
    if rates.len() != t {
        return Err(ExtremalError::InvalidArgument(format!("{t} frames need {t} rates, got {}", rates.len())));
    }
    let mut d = Vec::with_capacity(t);
    let mut coeffs = Vec::with_capacity(t);
    for j in 0..t {
        let k = rate_gain(rates[j]);
        let (innovation_var, gain) = if j == 0 {
            (source.sigma(0).powi(2), 0.0)
        } else {
            let g = source.transition_gain(j - 1);
            (g * g * d[j - 1] + source.innovation_var(j - 1), g)
        };
        d.push(innovation_var * (1.0 - k));
        let mut past = vec![0.0; j];
        if j > 0 {
            past[j - 1] = (1.0 - k) * gain;
        }
        coeffs.push(FrameCoefficients::new(past, k, k * (1.0 - k) * innovation_var));
    }
    let law = LinearReconstructionLaw::from_coefficients(source, coeffs)?;
    let stats = assemble_joint_stats(source, &law)?;
    Ok(MmseRepresentationStats { rates: rates.clone(), distortion: DistortionTuple::new(d)?, law, stats })
}

/// Rates making every MMSE distortion equal to `d` on a stationary unit
/// source: `R₁ = ½log₂(1/d)` and `R_j = ½log₂((ρ²d + 1 − ρ²)/d)` for `j ≥ 2`.
pub fn rates_for_constant_mmse(rho: f64, d: f64, frames: usize) -> Result<RateTuple, ExtremalError> {
    if !(d > 0.0 && d < 1.0) {
        return Err(ExtremalError::InvalidArgument(format!("target distortion {d} outside (0, 1)")));
    }
    let r1 = 0.5 * (1.0 / d).log2();
    let rj = 0.5 * ((rho * rho * d + 1.0 - rho * rho) / d).log2();
    Ok(RateTuple::new((0..frames).map(|j| if j == 0 { r1 } else { rj }).collect())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deltas_at_full_correlation() {
        for j in 1..=5 {
            let d = theorem5_deltas(1.0, j, 1e-3, 1.0).unwrap();
            assert!((d.delta_fmd - 2f64.powf((j as f64 - 1.0) / 2.0)).abs() < 1e-12);
            assert!((d.delta_jd - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn deltas_at_the_removable_singularity() {
        let rho = 0.5f64.sqrt();
        for j in 1..=6 {
            let d = theorem5_deltas(rho, j, 1e-3, 1.0).unwrap();
            assert!((d.delta_fmd - (1.0 + (j as f64 - 1.0) / 2.0).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn mmse_cell_values() {
        let reg = ExtremalRegime { pattern: RatePattern::LowLow, eps: 1e-3, scheme: Scheme::Mmse };
        let cell = table1_law(reg, 1.0, 0.6).unwrap();
        let a = 2e-3 * LN_2;
        assert!((cell.d1 - (1.0 - a)).abs() < 1e-15);
        assert!((cell.d2 - (1.0 - 1.36 * a)).abs() < 1e-15);
    }

    #[test]
    fn joint_cell_law_with_infinite_second_rate() {
        let reg = ExtremalRegime { pattern: RatePattern::InfLow, eps: 1e-3, scheme: Scheme::ZeroPerception(PlfKind::Jd) };
        let cell = table1_law(reg, 1.0, 0.6).unwrap();
        let ra = (2e-3 * LN_2).sqrt();
        let f = cell.law.frame(1);
        assert!((f.past[0] - (0.6 - 0.6 * ra)).abs() < 1e-15 && (f.source - ra).abs() < 1e-15);
        assert!((f.noise_var - 0.64).abs() < 1e-15);
    }

    #[test]
    fn recursion_examples() {
        let s = GaussMarkovSource::symmetric(1, 1.0, 0.0).unwrap();
        let d: f64 = 0.3;
        let rep = mmse_recursion(&s, &RateTuple::new(vec![0.5 * (1.0 / d).log2()]).unwrap()).unwrap();
        assert!((rep.distortion[0] - d).abs() < 1e-15);
        let s3 = GaussMarkovSource::symmetric(3, 1.0, 0.8).unwrap();
        let zero = mmse_recursion(&s3, &RateTuple::uniform(3, 0.0).unwrap()).unwrap();
        assert!(zero.distortion.values().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }
}
