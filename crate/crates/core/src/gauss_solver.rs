//! Gaussian rate-distortion-perception frontier for two frames, plus a
//! sequential per-frame solver for longer horizons.
//!
//! Frame 1 is a scalar problem. For frame 2, write `X_2 = (c/s₁) X̂_1 + E`
//! with `E ⊥ X̂_1` and `Var E = V`. With the rate constraint tight, the decoder
//! `X̂_2 = ω₁ X̂_1 + ω₂ X_2 + Z_2` is parametrized by the orthogonal coordinates
//! `u = (ω₁ + ω₂ c/s₁)√s₁` and `w = ω₂√(V/K)` (with `K = 1 − 2^{−2R₂}`). In
//! these coordinates `D_2 = V·2^{−2R₂} + (u − u*)² + (w − w*)²` and
//! `Var X̂_2 = u² + w²`, so the constrained optimum is the feasible point
//! nearest to the unconstrained one. The solver finds it by scanning rays out
//! of `(u*, w*)` for the first feasible radius and refining the best
//! directions by golden-section search.

use crate::linalg::{self, dot, LinalgError, Mat};
use crate::model::{
    assemble_joint_stats, DistortionTuple, FrameCoefficients, GaussMarkovSource, JointGaussianStats, LinearReconstructionLaw,
    ModelError,
    PerceptionTuple, PlfKind, RateTuple,
};
use crate::transport::{w2sq_gauss_1d, w2sq_gauss_nd, TransportError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
    #[error("frame {frame} is infeasible: {detail}")]
    Infeasible { frame: usize, detail: String },
    #[error("unsupported problem: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Search parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Base resolution: the ray search uses `8·grid` directions and
    /// `2·grid` radial steps per ray.
    pub grid: usize,
    /// Number of best directions refined locally.
    pub seeds: usize,
    /// Iteration cap of each local refinement.
    pub iterations: usize,
    /// Target accuracy of the objective.
    pub tolerance: f64,
    /// Slack allowed on perception constraints.
    pub feasibility_tolerance: f64,
    /// Restrict the search to `ω₁ω₂ρ₁ ≥ 0`.
    pub restrict_sign: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { grid: 64, seeds: 16, iterations: 200, tolerance: 1e-10, feasibility_tolerance: 1e-9, restrict_sign: true }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.grid == 0 || self.seeds == 0 || self.iterations == 0 {
            return Err(SolverError::InvalidInput("grid, seeds and iterations must be positive".into()));
        }
        if !(self.tolerance > 0.0 && self.feasibility_tolerance > 0.0) {
            return Err(SolverError::InvalidInput("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// How a tradeoff point was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    /// Numerical search.
    Optimal,
    /// Closed-form answer.
    Analytic,
    /// Frame 1 was moved toward the source variance so that the joint
    /// constraint at frame 2 became feasible.
    Frame1Adjusted,
    /// Replaced by a point with a smaller threshold that had lower distortion.
    Cleaned,
    /// The interior check found a slack-rate point that beats the reported one.
    InteriorBetter,
}

impl fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverStatus::Optimal => "optimal",
            SolverStatus::Analytic => "analytic",
            SolverStatus::Frame1Adjusted => "frame1_adjusted",
            SolverStatus::Cleaned => "cleaned",
            SolverStatus::InteriorBetter => "interior_better",
        })
    }
}

/// One point of the tradeoff with the law that achieves it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub rates: RateTuple,
    pub distortion: DistortionTuple,
    /// Achieved perception values of the law.
    pub perception: PerceptionTuple,
    /// Thresholds the point was solved for.
    pub thresholds: PerceptionTuple,
    pub law: LinearReconstructionLaw,
    pub plf: PlfKind,
    pub status: SolverStatus,
}

/// `1 − 2^{−2R}`, equal to one at infinite rate.
pub fn rate_gain(r: f64) -> f64 {
    if r.is_infinite() {
        1.0
    } else {
        -(-2.0 * r * std::f64::consts::LN_2).exp_m1()
    }
}

/// Optimal first frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame1Solution {
    pub nu: f64,
    pub sigma_hat_sq: f64,
    pub noise_var: f64,
    pub distortion: f64,
}

/// First frame with a prescribed reconstruction standard deviation and the
/// rate constraint tight: `ν = (σ̂/σ₁)√K₁`, `Var Z₁ = σ̂²(1 − K₁)`.
pub fn frame1_with_sigma_hat(source: &GaussMarkovSource, r1: f64, sigma_hat: f64) -> Frame1Solution {
    let s = source.sigma(0);
    let k = rate_gain(r1);
    let nu = sigma_hat / s * k.sqrt();
    Frame1Solution {
        nu,
        sigma_hat_sq: sigma_hat * sigma_hat,
        noise_var: sigma_hat * sigma_hat * (1.0 - k),
        distortion: (s * s + sigma_hat * sigma_hat - 2.0 * s * sigma_hat * k.sqrt()).max(0.0),
    }
}

/// Minimizes `σ₁² + σ̂² − 2σ₁σ̂√K₁` over `σ̂ ∈ [max(0, σ₁ − √P₁), σ₁ + √P₁]`.
/// The objective is a convex quadratic in `σ̂`, so the minimizer is its
/// vertex `σ₁√K₁` clamped to the interval.
pub fn solve_frame1(source: &GaussMarkovSource, r1: f64, p1: f64, cfg: &SolverConfig) -> Result<Frame1Solution, SolverError> {
    cfg.validate()?;
    if r1.is_nan() || r1 < 0.0 {
        return Err(SolverError::InvalidInput(format!("rate {r1} is negative")));
    }
    if p1.is_nan() || p1 < 0.0 {
        return Err(SolverError::Infeasible { frame: 0, detail: format!("perception threshold {p1} is negative") });
    }
    let s = source.sigma(0);
    let vertex = s * rate_gain(r1).sqrt();
    let sigma_hat = if p1.is_infinite() { vertex } else { vertex.clamp((s - p1.sqrt()).max(0.0), s + p1.sqrt()) };
    Ok(frame1_with_sigma_hat(source, r1, sigma_hat))
}

/// Optimal second frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame2Solution {
    pub omega1: f64,
    pub omega2: f64,
    pub noise_var: f64,
    pub sigma_hat_sq: f64,
    pub distortion: f64,
    pub analytic: bool,
    /// Set when the coarse slack-rate grid found a strictly better point.
    pub interior_better: bool,
}

/// Closed-form squared W2 distance between zero-mean 2-D Gaussians:
/// `tr A + tr B − 2√(tr(AB) + 2√(det A det B))`.
fn w2sq_2x2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let tr_ab = a[0] * b[0] + 2.0 * a[1] * b[1] + a[2] * b[2];
    let det_a = (a[0] * a[2] - a[1] * a[1]).max(0.0);
    let det_b = (b[0] * b[2] - b[1] * b[1]).max(0.0);
    let inner = (tr_ab + 2.0 * (det_a * det_b).sqrt()).max(0.0);
    (a[0] + a[2] + b[0] + b[2] - 2.0 * inner.sqrt()).max(0.0)
}

struct Frame2Geometry {
    sigma1: f64,
    sigma2: f64,
    rho: f64,
    s1: f64,
    c12: f64,
    v: f64,
    k2: f64,
    q: f64,
    ustar: f64,
    wstar: f64,
    dmin: f64,
    u_fixed: bool,
    w_fixed: bool,
}

impl Frame2Geometry {
    fn new(source: &GaussMarkovSource, f1: &Frame1Solution, r2: f64) -> Self {
        let (sigma1, sigma2, rho) = (source.sigma(0), source.sigma(1), source.rho(0));
        let s1 = f1.sigma_hat_sq;
        let u_fixed = s1 <= 1e-300;
        let c12 = f1.nu * rho * sigma1 * sigma2;
        let v = if u_fixed { sigma2 * sigma2 } else { (sigma2 * sigma2 - c12 * c12 / s1).max(0.0) };
        let k2 = rate_gain(r2);
        let q = if r2.is_infinite() { f64::INFINITY } else { (2.0 * r2 * std::f64::consts::LN_2).exp_m1() };
        let w_fixed = v <= 1e-14 * sigma2 * sigma2 || k2 == 0.0;
        let ustar = if u_fixed { 0.0 } else { c12 / s1.sqrt() };
        let wstar = if w_fixed { 0.0 } else { (v * k2).sqrt() };
        Self { sigma1, sigma2, rho, s1, c12, v, k2, q, ustar, wstar, dmin: v * (1.0 - k2), u_fixed, w_fixed }
    }

    /// `(ω₁, ω₂, Var Z₂)` of the point `(u, w)`.
    fn coefficients(&self, u: f64, w: f64) -> (f64, f64, f64) {
        let omega2 = if self.w_fixed { 0.0 } else { w * (self.k2 / self.v).sqrt() };
        let noise = if self.q.is_infinite() || omega2 == 0.0 { 0.0 } else { omega2 * omega2 * self.v / self.q };
        let omega1 = if self.u_fixed { 0.0 } else { u / self.s1.sqrt() - omega2 * self.c12 / self.s1 };
        (omega1, omega2, noise)
    }

    fn distortion(&self, u: f64, w: f64, extra: f64) -> f64 {
        self.dmin + (u - self.ustar).powi(2) + (w - self.wstar).powi(2) + extra
    }

    fn perception(&self, u: f64, w: f64, extra: f64, plf: PlfKind) -> f64 {
        let var2 = u * u + w * w + extra;
        match plf {
            PlfKind::Fmd => (self.sigma2 - var2.sqrt()).powi(2),
            PlfKind::Jd => {
                let p = [self.sigma1 * self.sigma1, self.rho * self.sigma1 * self.sigma2, self.sigma2 * self.sigma2];
                let q = [self.s1, u * self.s1.sqrt(), var2];
                w2sq_2x2(p, q)
            }
        }
    }

    fn feasible(&self, u: f64, w: f64, extra: f64, p2: f64, plf: PlfKind, cfg: &SolverConfig) -> bool {
        if w < 0.0 || (self.w_fixed && w != 0.0) || (self.u_fixed && u != 0.0) {
            return false;
        }
        if cfg.restrict_sign {
            let (o1, o2, _) = self.coefficients(u, w);
            let scale = (u / self.s1.sqrt()).abs() + (o2 * self.c12 / self.s1).abs();
            if o2 > 0.0 && self.rho * o1 < -1e-12 * scale.max(f64::MIN_POSITIVE) {
                return false;
            }
        }
        if p2.is_infinite() {
            return true;
        }
        match plf {
            PlfKind::Fmd => {
                // Only the lower side of |σ₂ − σ̂₂| ≤ √P₂ is imposed during the
                // search: the unconstrained optimum has σ̂₂ ≤ σ₂, so the nearest
                // point of the lower-side set never exceeds σ₂ + √P₂. Keeping a
                // set with interior makes the ray scan work at P₂ = 0.
                let sh = (u * u + w * w + extra).sqrt();
                (self.sigma2 - p2.sqrt()) - sh <= cfg.feasibility_tolerance
            }
            PlfKind::Jd => self.perception(u, w, extra, plf) <= p2 + cfg.feasibility_tolerance,
        }
    }
}

struct RaySearch<'a> {
    g: &'a Frame2Geometry,
    p2: f64,
    plf: PlfKind,
    cfg: &'a SolverConfig,
    r_max: f64,
}

impl RaySearch<'_> {
    fn point(&self, theta: f64, r: f64) -> (f64, f64) {
        let u = if self.g.u_fixed { 0.0 } else { self.g.ustar + r * theta.cos() };
        let w = if self.g.w_fixed { 0.0 } else { self.g.wstar + r * theta.sin() };
        (u, w)
    }

    fn ok(&self, theta: f64, r: f64) -> bool {
        let (u, w) = self.point(theta, r);
        self.g.feasible(u, w, 0.0, self.p2, self.plf, self.cfg)
    }

    /// Smallest feasible radius along direction `theta`.
    fn first_radius(&self, theta: f64) -> f64 {
        let steps = 2 * self.cfg.grid;
        let mut prev = 0.0;
        for i in 1..=steps {
            let r = self.r_max * i as f64 / steps as f64;
            if self.ok(theta, r) {
                let (mut lo, mut hi) = (prev, r);
                for _ in 0..200 {
                    if hi - lo <= 4.0 * f64::EPSILON * hi {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    if self.ok(theta, mid) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return hi;
            }
            prev = r;
        }
        f64::INFINITY
    }

    fn golden(&self, mut a: f64, mut b: f64) -> (f64, f64) {
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let (mut fc, mut fd) = (self.first_radius(c), self.first_radius(d));
        for _ in 0..self.cfg.iterations {
            if (b - a).abs() < 1e-13 {
                break;
            }
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = self.first_radius(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = self.first_radius(d);
            }
        }
        if fc <= fd {
            (c, fc)
        } else {
            (d, fd)
        }
    }

    /// Nearest feasible point to `(u*, w*)` as `(θ, r)`.
    fn run(&self) -> Option<(f64, f64)> {
        if self.ok(0.0, 0.0) {
            return Some((0.0, 0.0));
        }
        let directions: Vec<f64> = if self.g.u_fixed && self.g.w_fixed {
            return None;
        } else if self.g.w_fixed {
            vec![0.0, PI]
        } else if self.g.u_fixed {
            vec![0.5 * PI, 1.5 * PI]
        } else {
            let n = 8 * self.cfg.grid;
            (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
        };
        let radii: Vec<f64> = directions.par_iter().map(|t| self.first_radius(*t)).collect();
        let n = directions.len();
        if n <= 2 {
            return (0..n)
                .filter(|i| radii[*i].is_finite())
                .map(|i| (directions[i], radii[i]))
                .min_by(|x, y| x.1.total_cmp(&y.1));
        }
        let mut minima: Vec<usize> = (0..n)
            .filter(|&i| radii[i].is_finite() && radii[i] <= radii[(i + n - 1) % n] && radii[i] <= radii[(i + 1) % n])
            .collect();
        minima.sort_by(|a, b| radii[*a].total_cmp(&radii[*b]));
        minima.truncate(self.cfg.seeds);
        let step = 2.0 * PI / n as f64;
        let refined: Vec<(f64, f64)> =
            minima.par_iter().map(|&i| self.golden(directions[i] - step, directions[i] + step)).collect();
        refined
            .into_iter()
            .chain(minima.iter().map(|&i| (directions[i], radii[i])))
            .filter(|(_, r)| r.is_finite())
            .min_by(|x, y| x.1.total_cmp(&y.1))
    }
}

/// Second frame given the first. See the module documentation for the
/// coordinates; joint perception at `P₂ = 0` is solved in closed form.
pub fn solve_frame2(
    source: &GaussMarkovSource,
    f1: &Frame1Solution,
    r2: f64,
    p2: f64,
    plf: PlfKind,
    cfg: &SolverConfig,
) -> Result<Frame2Solution, SolverError> {
    cfg.validate()?;
    if source.frames() < 2 {
        return Err(SolverError::InvalidInput("source has fewer than two frames".into()));
    }
    if r2.is_nan() || r2 < 0.0 {
        return Err(SolverError::InvalidInput(format!("rate {r2} is negative")));
    }
    if p2.is_nan() || p2 < 0.0 {
        return Err(SolverError::Infeasible { frame: 1, detail: format!("perception threshold {p2} is negative") });
    }
    let g = Frame2Geometry::new(source, f1, r2);
    let finish = |u: f64, w: f64, analytic: bool| {
        let (omega1, omega2, noise_var) = g.coefficients(u, w);
        Frame2Solution {
            omega1,
            omega2,
            noise_var,
            sigma_hat_sq: u * u + w * w,
            distortion: g.distortion(u, w, 0.0),
            analytic,
            interior_better: false,
        }
    };
    if plf == PlfKind::Jd && p2 == 0.0 {
        let s1_sq = g.sigma1 * g.sigma1;
        if (g.s1 - s1_sq).abs() > 1e-12 * s1_sq {
            return Err(SolverError::Infeasible {
                frame: 1,
                detail: format!("joint realism needs Var X̂_1 = {s1_sq}, have {}", g.s1),
            });
        }
        let u = g.rho * g.sigma2;
        let w = ((1.0 - g.rho * g.rho) * g.sigma2 * g.sigma2).max(0.0).sqrt();
        if g.w_fixed && w > 1e-12 * g.sigma2 {
            return Err(SolverError::Infeasible {
                frame: 1,
                detail: "joint realism needs fresh innovation but frame 2 carries no new information".into(),
            });
        }
        return Ok(finish(u, if g.w_fixed { 0.0 } else { w }, true));
    }
    // Keeping the source conditional law of frame 2 given frame 1 costs no
    // joint perception beyond frame 1's own. Without budget left over after
    // frame 1 this is the only feasible point.
    let anchor = (g.rho * g.sigma2, if g.w_fixed { 0.0 } else { ((1.0 - g.rho * g.rho) * g.sigma2 * g.sigma2).max(0.0).sqrt() });
    let frame1_cost = (g.sigma1 - g.s1.sqrt()).powi(2);
    if plf == PlfKind::Jd && p2 - frame1_cost <= cfg.feasibility_tolerance {
        if !g.feasible(anchor.0, anchor.1, 0.0, f64::INFINITY, plf, cfg) || frame1_cost > p2 + cfg.feasibility_tolerance {
            return Err(SolverError::Infeasible {
                frame: 1,
                detail: format!("frame 1 uses joint perception {frame1_cost}, threshold is {p2}"),
            });
        }
        return Ok(finish(anchor.0, anchor.1, true));
    }
    let root = if p2.is_finite() { p2.sqrt() } else { g.sigma2 };
    let r_max = g.ustar.hypot(g.wstar) + g.sigma2 + root;
    let search = RaySearch { g: &g, p2, plf, cfg, r_max };
    let found = search.run().map(|(theta, r)| search.point(theta, r));
    let anchor = Some(anchor).filter(|(u, w)| plf == PlfKind::Jd && g.feasible(*u, *w, 0.0, p2, plf, cfg));
    let (u, w) = [found, anchor]
        .into_iter()
        .flatten()
        .min_by(|a, b| g.distortion(a.0, a.1, 0.0).total_cmp(&g.distortion(b.0, b.1, 0.0)))
        .ok_or_else(|| SolverError::Infeasible {
            frame: 1,
            detail: format!("no feasible point found for {plf} threshold {p2} (Var X̂_1 = {}, V = {})", g.s1, g.v),
        })?;
    if plf == PlfKind::Fmd && p2.is_finite() && u.hypot(w) > g.sigma2 + p2.sqrt() + cfg.feasibility_tolerance {
        return Err(SolverError::Infeasible { frame: 1, detail: "reconstruction variance above the upper bound".into() });
    }
    let mut sol = finish(u, w, false);
    sol.interior_better = interior_check(&g, &sol, p2, plf, cfg, r_max);
    Ok(sol)
}

/// Coarse grid over slack-rate points `(u, w, extra noise)`; reports whether
/// any feasible one beats the tight-rate optimum.
fn interior_check(g: &Frame2Geometry, sol: &Frame2Solution, p2: f64, plf: PlfKind, cfg: &SolverConfig, span: f64) -> bool {
    const N: usize = 7;
    let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (N - 1) as f64;
    for i in 0..N {
        let u = if g.u_fixed { 0.0 } else { lin(g.ustar - span, g.ustar + span, i) };
        for k in 0..N {
            let w = if g.w_fixed { 0.0 } else { lin(0.0, g.wstar + span, k) };
            for e in 1..N {
                let extra = lin(0.0, span * span, e);
                if g.feasible(u, w, extra, p2, plf, cfg) && g.distortion(u, w, extra) < sol.distortion - 1e-9 {
                    return true;
                }
            }
        }
    }
    false
}

fn check_source_rates(source: &GaussMarkovSource, rates: &RateTuple, thresholds: &PerceptionTuple) -> Result<(), SolverError> {
    if rates.len() != source.frames() || thresholds.len() != source.frames() {
        return Err(SolverError::InvalidInput(format!(
            "source has {} frames, rates {}, thresholds {}",
            source.frames(),
            rates.len(),
            thresholds.len()
        )));
    }
    Ok(())
}

/// Full two-frame solve (or one-frame when the source has a single frame).
///
/// Frames are solved in order. Under joint perception, if frame 2 is
/// infeasible given the optimal frame 1, frame 1's reconstruction standard
/// deviation is moved toward `σ₁` by bisection until frame 2 becomes feasible.
pub fn solve_point(
    source: &GaussMarkovSource,
    rates: &RateTuple,
    thresholds: &PerceptionTuple,
    plf: PlfKind,
    cfg: &SolverConfig,
) -> Result<TradeoffPoint, SolverError> {
    check_source_rates(source, rates, thresholds)?;
    let t = source.frames();
    if t > 2 {
        return solve_sequential(source, rates, thresholds, plf);
    }
    let f1 = solve_frame1(source, rates[0], thresholds[0], cfg)?;
    let mut coeffs = vec![FrameCoefficients::new(vec![], f1.nu, f1.noise_var)];
    let mut status = SolverStatus::Optimal;
    if t == 2 {
        let (f1, f2, adjusted) = match solve_frame2(source, &f1, rates[1], thresholds[1], plf, cfg) {
            Ok(f2) => (f1, f2, false),
            Err(SolverError::Infeasible { .. }) if plf == PlfKind::Jd && thresholds[1] > 0.0 => {
                let (a, b) = adjust_frame1(source, &f1, rates, thresholds, cfg)?;
                (a, b, true)
            }
            Err(e) => return Err(e),
        };
        coeffs[0] = FrameCoefficients::new(vec![], f1.nu, f1.noise_var);
        coeffs.push(FrameCoefficients::new(vec![f2.omega1], f2.omega2, f2.noise_var));
        status = if adjusted {
            SolverStatus::Frame1Adjusted
        } else if f2.interior_better {
            SolverStatus::InteriorBetter
        } else if f2.analytic {
            SolverStatus::Analytic
        } else {
            SolverStatus::Optimal
        };
    } else if thresholds[0] == 0.0 || thresholds[0].is_infinite() {
        status = SolverStatus::Analytic;
    }
    let law = LinearReconstructionLaw::from_coefficients(source, coeffs)?;
    build_point(source, rates, thresholds, plf, law, status)
}

fn adjust_frame1(
    source: &GaussMarkovSource,
    f1: &Frame1Solution,
    rates: &RateTuple,
    thresholds: &PerceptionTuple,
    cfg: &SolverConfig,
) -> Result<(Frame1Solution, Frame2Solution), SolverError> {
    let s = source.sigma(0);
    let attempt = |sh: f64| {
        let cand = frame1_with_sigma_hat(source, rates[0], sh);
        solve_frame2(source, &cand, rates[1], thresholds[1], PlfKind::Jd, cfg).map(|f2| (cand, f2))
    };
    let mut best = attempt(s)?;
    let (mut lo, mut hi) = (f1.sigma_hat_sq.sqrt(), s);
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    let toward_source_is_hi = f1.sigma_hat_sq.sqrt() <= s;
    let (mut bad, mut good) = if toward_source_is_hi { (lo, hi) } else { (hi, lo) };
    for _ in 0..40 {
        let mid = 0.5 * (bad + good);
        match attempt(mid) {
            Ok(found) => {
                best = found;
                good = mid;
            }
            Err(SolverError::Infeasible { .. }) => bad = mid,
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}

fn build_point(
    source: &GaussMarkovSource,
    rates: &RateTuple,
    thresholds: &PerceptionTuple,
    plf: PlfKind,
    law: LinearReconstructionLaw,
    status: SolverStatus,
) -> Result<TradeoffPoint, SolverError> {
    let stats = assemble_joint_stats(source, &law)?;
    let distortion = DistortionTuple::new(stats.distortions())?;
    let perception = PerceptionTuple::new(perception_of(source, &law, plf)?)?;
    Ok(TradeoffPoint { rates: rates.clone(), distortion, perception, thresholds: thresholds.clone(), law, plf, status })
}

/// Achieved perception per frame: marginal W2² under FMD, W2² of the frame
/// prefix under JD.
pub fn perception_of(source: &GaussMarkovSource, law: &LinearReconstructionLaw, plf: PlfKind) -> Result<Vec<f64>, SolverError> {
    let stats = assemble_joint_stats(source, law)?;
    perception_of_stats(source, &stats, plf)
}

/// Perception values read from an assembled covariance of `(X, X̂)`.
pub fn perception_of_stats(
    source: &GaussMarkovSource,
    stats: &JointGaussianStats,
    plf: PlfKind,
) -> Result<Vec<f64>, SolverError> {
    (0..source.frames())
        .map(|j| match plf {
            PlfKind::Fmd => Ok(w2sq_gauss_1d(source.sigma(j), stats.cov[(stats.xhat(j), stats.xhat(j))].max(0.0).sqrt())?),
            PlfKind::Jd => {
                let value = w2sq_gauss_nd(&stats.source_prefix(j + 1), &stats.reconstruction_prefix(j + 1))?;
                // Square roots of rank-deficient covariances carry errors of
                // order sqrt(machine epsilon) relative to the variance scale.
                let scale = (0..=j).map(|i| source.sigma(i).powi(2)).fold(1.0, f64::max);
                if value < 0.0 && value > -PERCEPTION_ROUNDOFF * scale {
                    Ok(0.0)
                } else {
                    Ok(value)
                }
            }
        })
        .collect()
}

/// Relative size of negative W2² values treated as round-off when reporting
/// achieved joint perception.
pub const PERCEPTION_ROUNDOFF: f64 = 1e-6;

/// Conditional variance `Var(A | B) = Σ_AA − Σ_AB Σ_BB⁺ Σ_BA` of a scalar
/// `A` given a vector `B`.
fn conditional_var(cov: &Mat, a: usize, b: &[usize]) -> Result<f64, SolverError> {
    if b.is_empty() {
        return Ok(cov[(a, a)]);
    }
    let bb = cov.select(b);
    let ab: Vec<f64> = b.iter().map(|i| cov[(a, *i)]).collect();
    let pinv = linalg::psd_pinv(&bb, 1e-12)?;
    let proj = pinv.mul_vec(&ab)?;
    Ok(cov[(a, a)] - dot(&ab, &proj))
}

/// Rate used by each frame, `I(X_j; X̂_j | X̂_<j)` in bits, from Gaussian
/// conditional variances. A noiseless informative frame uses infinite rate.
pub fn rate_usage(source: &GaussMarkovSource, law: &LinearReconstructionLaw) -> Result<Vec<f64>, SolverError> {
    let stats = assemble_joint_stats(source, law)?;
    let mut out = Vec::with_capacity(source.frames());
    for j in 0..source.frames() {
        let past: Vec<usize> = (0..j).map(|i| stats.xhat(i)).collect();
        let mut with_x = past.clone();
        with_x.push(stats.x(j));
        let scale = stats.cov[(stats.xhat(j), stats.xhat(j))].max(source.sigma(j).powi(2));
        let num = conditional_var(&stats.cov, stats.xhat(j), &past)?;
        let den = conditional_var(&stats.cov, stats.xhat(j), &with_x)?;
        out.push(if num <= 1e-13 * scale {
            0.0
        } else if den <= 1e-300 {
            f64::INFINITY
        } else {
            0.5 * (num / den).log2().max(0.0)
        });
    }
    Ok(out)
}

/// Sequential per-frame solver for any horizon.
///
/// Frame `j` regresses `X_j` on the earlier reconstructions `Y` (`β = C⁺c`,
/// residual variance `V`) and chooses `X̂_j = aᵀY + bX_j + Z_j` with the rate
/// tight. Supported constraints per frame: none (`P = ∞`), any marginal
/// threshold, and joint realism with `P = 0`.
pub fn solve_sequential(
    source: &GaussMarkovSource,
    rates: &RateTuple,
    thresholds: &PerceptionTuple,
    plf: PlfKind,
) -> Result<TradeoffPoint, SolverError> {
    check_source_rates(source, rates, thresholds)?;
    let t = source.frames();
    let mut coeffs: Vec<FrameCoefficients> = Vec::with_capacity(t);
    for j in 0..t {
        let sigma_sq = source.sigma(j).powi(2);
        let (c_mat, c, tau) = if j == 0 {
            (Mat::zeros(0, 0), vec![], vec![])
        } else {
            let partial = source.truncated(j + 1)?;
            let mut tmp = coeffs.clone();
            tmp.push(FrameCoefficients::new(vec![0.0; j], 0.0, 0.0));
            let law = LinearReconstructionLaw::from_coefficients(&partial, tmp)?;
            let stats = assemble_joint_stats(&partial, &law)?;
            let past: Vec<usize> = (0..j).map(|i| stats.xhat(i)).collect();
            let c: Vec<f64> = past.iter().map(|i| stats.cov[(*i, stats.x(j))]).collect();
            let tau: Vec<f64> = (0..j).map(|i| source.cov(i, j)).collect();
            (stats.cov.select(&past), c, tau)
        };
        let pinv = if j == 0 { Mat::zeros(0, 0) } else { linalg::psd_pinv(&c_mat, 1e-10)? };
        let beta = if j == 0 { vec![] } else { pinv.mul_vec(&c)? };
        let explained = dot(&c, &beta);
        let v = (sigma_sq - explained).max(0.0);
        let k = rate_gain(rates[j]);
        let v_zero = v <= 1e-14 * sigma_sq;
        let p = thresholds[j];
        let (a, b, noise): (Vec<f64>, f64, f64) = if p.is_infinite() {
            (beta.iter().map(|x| (1.0 - k) * x).collect(), k, k * (1.0 - k) * v)
        } else if plf == PlfKind::Fmd || j == 0 && p == 0.0 {
            let s = (sigma_sq - v * (1.0 - k)).max(0.0).sqrt();
            let sigma = source.sigma(j);
            let target = s.clamp((sigma - p.sqrt()).max(0.0), sigma + p.sqrt());
            if s <= 1e-300 {
                (vec![0.0; j], 0.0, target * target)
            } else {
                let gamma = target / s;
                let b = gamma * k;
                (beta.iter().map(|x| (gamma - b) * x).collect(), b, gamma * gamma * v * k * (1.0 - k))
            }
        } else if p == 0.0 {
            let t_proj = pinv.mul_vec(&tau)?;
            let spare = (sigma_sq - dot(&tau, &t_proj)).max(0.0);
            let b = if v_zero { 0.0 } else { (spare * k / v).sqrt() };
            let a: Vec<f64> = (0..j).map(|i| t_proj[i] - b * beta[i]).collect();
            (a, b, (spare - b * b * v).max(0.0))
        } else {
            return Err(SolverError::Unsupported(format!(
                "sequential solving supports joint realism only at threshold 0 (frame {j} has {p})"
            )));
        };
        coeffs.push(FrameCoefficients::new(a, b, noise));
    }
    let law = LinearReconstructionLaw::from_coefficients(source, coeffs)?;
    build_point(source, rates, thresholds, plf, law, SolverStatus::Analytic)
}

/// Deviation above which a monotonicity repair is flagged.
pub const CLEANUP_FLAG_TOL: f64 = 1e-6;

/// Tradeoff curve at fixed rates: one point per threshold in `p_grid`
/// (applied to every frame). Points are then repaired so that distortion is
/// non-increasing in the threshold.
pub fn dp_sweep(
    source: &GaussMarkovSource,
    rates: &RateTuple,
    plf: PlfKind,
    p_grid: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<TradeoffPoint>, SolverError> {
    if p_grid.is_empty() {
        return Err(SolverError::InvalidInput("empty perception grid".into()));
    }
    let t = source.frames();
    let mut points = p_grid
        .iter()
        .map(|p| {
            let thresholds = PerceptionTuple::uniform(t, *p)?;
            solve_point(source, rates, &thresholds, plf, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|a, b| p_grid[*a].total_cmp(&p_grid[*b]));
    for w in 1..order.len() {
        let (prev, cur) = (order[w - 1], order[w]);
        let worst = (0..t)
            .map(|j| points[cur].distortion[j] - points[prev].distortion[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if worst > 0.0 {
            let replacement = TradeoffPoint {
                thresholds: points[cur].thresholds.clone(),
                status: if worst > CLEANUP_FLAG_TOL { SolverStatus::Cleaned } else { points[prev].status },
                ..points[prev].clone()
            };
            points[cur] = replacement;
        }
    }
    Ok(points)
}

/// One CSV row of a tradeoff curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub frame: usize,
    pub r_bits: f64,
    pub p_threshold: f64,
    pub d: f64,
    /// Frame-1 source coefficient.
    pub nu: f64,
    /// Coefficient on the previous reconstruction (zero at frame 1).
    pub omega1: f64,
    /// Coefficient on the current source frame (zero at frame 1).
    pub omega2: f64,
    pub sigma_hat_sq: f64,
    pub plf: PlfKind,
    pub status: SolverStatus,
}

/// Flattens points into per-frame rows (frames numbered from 1).
pub fn curve_rows(points: &[TradeoffPoint]) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    for p in points {
        let nu = p.law.frame(0).source;
        for j in 0..p.law.frames() {
            let f = p.law.frame(j);
            rows.push(CurveRow {
                frame: j + 1,
                r_bits: p.rates[j],
                p_threshold: p.thresholds[j],
                d: p.distortion[j],
                nu,
                omega1: if j == 0 { 0.0 } else { *f.past.last().expect("frame has a past") },
                omega2: if j == 0 { 0.0 } else { f.source },
                sigma_hat_sq: f.sigma_hat_sq,
                plf: p.plf,
                status: p.status,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn frame1_closed_forms() {
        let s = GaussMarkovSource::symmetric(2, 1.3, 0.7).unwrap();
        let r = 0.8;
        let d_min = 1.69 * 2f64.powf(-2.0 * r);
        assert!((solve_frame1(&s, r, f64::INFINITY, &cfg()).unwrap().distortion - d_min).abs() < 1e-14);
        let zero = solve_frame1(&s, r, 0.0, &cfg()).unwrap();
        assert!((zero.sigma_hat_sq - 1.69).abs() < 1e-14);
        assert!((zero.distortion - 2.0 * 1.69 * (1.0 - (1.0 - 2f64.powf(-2.0 * r)).sqrt())).abs() < 1e-13);
        let lossless = solve_frame1(&s, f64::INFINITY, 0.3, &cfg()).unwrap();
        assert!(lossless.distortion < 1e-15 && (lossless.nu - 1.0).abs() < 1e-15);
    }

    #[test]
    fn closed_form_w2_matches_trace_formula() {
        let a = Mat::from_rows(&[vec![1.0, 0.6], vec![0.6, 1.5]]).unwrap();
        let b = Mat::from_rows(&[vec![0.7, -0.2], vec![-0.2, 0.4]]).unwrap();
        let fast = w2sq_2x2([1.0, 0.6, 1.5], [0.7, -0.2, 0.4]);
        assert!((fast - w2sq_gauss_nd(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_frame2_is_the_mmse_recursion() {
        let s = GaussMarkovSource::new(vec![1.0, 1.4], vec![0.8]).unwrap();
        let (r1, r2) = (0.7, 1.1);
        let f1 = solve_frame1(&s, r1, f64::INFINITY, &cfg()).unwrap();
        let f2 = solve_frame2(&s, &f1, r2, f64::INFINITY, PlfKind::Fmd, &cfg()).unwrap();
        let d1 = 2f64.powf(-2.0 * r1);
        let want = (0.64 * 1.96 * d1 + 0.36 * 1.96) * 2f64.powf(-2.0 * r2);
        assert!((f2.distortion - want).abs() < 1e-12);
    }

    #[test]
    fn joint_realism_at_full_correlation_repeats_frame1() {
        let s = GaussMarkovSource::symmetric(2, 1.0, 1.0).unwrap();
        let rates = RateTuple::new(vec![0.01, 0.01]).unwrap();
        let p = PerceptionTuple::uniform(2, 0.0).unwrap();
        let pt = solve_point(&s, &rates, &p, PlfKind::Jd, &cfg()).unwrap();
        assert!(pt.law.frame(1).source.abs() < 1e-12);
        assert!((pt.distortion[0] - pt.distortion[1]).abs() < 1e-12);
    }

    #[test]
    fn sequential_matches_two_frame_solver() {
        let s = GaussMarkovSource::new(vec![1.0, 0.8], vec![0.6]).unwrap();
        let rates = RateTuple::new(vec![0.5, 0.9]).unwrap();
        for p in [0.0, 0.05, f64::INFINITY] {
            let th = PerceptionTuple::uniform(2, p).unwrap();
            let a = solve_point(&s, &rates, &th, PlfKind::Fmd, &cfg()).unwrap();
            let b = solve_sequential(&s, &rates, &th, PlfKind::Fmd).unwrap();
            for j in 0..2 {
                assert!((a.distortion[j] - b.distortion[j]).abs() < 1e-9, "p={p} frame {j}");
            }
        }
        let th = PerceptionTuple::uniform(2, 0.0).unwrap();
        let a = solve_point(&s, &rates, &th, PlfKind::Jd, &cfg()).unwrap();
        let b = solve_sequential(&s, &rates, &th, PlfKind::Jd).unwrap();
        assert!((a.distortion[1] - b.distortion[1]).abs() < 1e-10);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let s = GaussMarkovSource::symmetric(2, 1.0, 0.5).unwrap();
        let rates = RateTuple::uniform(2, 1.0).unwrap();
        assert!(dp_sweep(&s, &rates, PlfKind::Fmd, &[], &cfg()).is_err());
    }
}
