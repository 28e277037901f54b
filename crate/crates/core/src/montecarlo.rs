//! Monte-Carlo cross-checks of the analytic Gaussian laws.
//!
//! Samples are generated in fixed blocks, each with its own ChaCha20 stream,
//! and block results are combined in block order, so reports do not depend on
//! the number of worker threads. Distortion errors come from the per-sample
//! spread. Perception is the plug-in Gaussian W2² between the sample second
//! moments of the reconstruction and the analytic source covariance; its
//! standard error is estimated from the spread of per-block values.

use crate::linalg::Mat;
use crate::model::{assemble_joint_stats, GaussMarkovSource, LinearReconstructionLaw, ModelError, PlfKind};
use crate::transport::{w2sq_gauss_1d, w2sq_gauss_nd, TransportError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest accepted sample count.
pub const MIN_SAMPLES: usize = 1_000;

/// Number of independent blocks a run is split into.
pub const BLOCKS: usize = 64;

/// Multiple of the standard error accepted by [`SimReport::agrees_with`].
pub const SE_MULTIPLIER: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonteCarloError {
    #[error("invalid simulation input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub standard_error: f64,
}

impl Estimate {
    /// `|value − reference| ≤ k·SE`, with a floor of a few ulps of the scale
    /// so that exact agreement on a degenerate estimate still passes.
    pub fn agrees(&self, reference: f64, k: f64) -> bool {
        let floor = 1e-12 * reference.abs().max(1.0);
        (self.value - reference).abs() <= k * self.standard_error + floor
    }
}

/// Empirical distortion and perception of a law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub n: usize,
    pub seed: u64,
    pub distortion: Vec<Estimate>,
    pub perception_fmd: Vec<Estimate>,
    pub perception_jd: Vec<Estimate>,
}

/// Analytic counterparts of a [`SimReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticValues {
    pub distortion: Vec<f64>,
    pub perception_fmd: Vec<f64>,
    pub perception_jd: Vec<f64>,
}

/// One failed comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub quantity: String,
    pub frame: usize,
    pub empirical: f64,
    pub standard_error: f64,
    pub analytic: f64,
}

impl SimReport {
    pub fn perception(&self, plf: PlfKind) -> &[Estimate] {
        match plf {
            PlfKind::Fmd => &self.perception_fmd,
            PlfKind::Jd => &self.perception_jd,
        }
    }

    /// Every estimate that misses its analytic value by more than
    /// `k` standard errors.
    pub fn disagreements(&self, analytic: &AnalyticValues, k: f64) -> Vec<Disagreement> {
        let groups = [
            ("distortion", &self.distortion, &analytic.distortion),
            ("perception_fmd", &self.perception_fmd, &analytic.perception_fmd),
            ("perception_jd", &self.perception_jd, &analytic.perception_jd),
        ];
        let mut out = Vec::new();
        for (name, est, exact) in groups {
            for (frame, (e, a)) in est.iter().zip(exact.iter()).enumerate() {
                if !e.agrees(*a, k) {
                    out.push(Disagreement {
                        quantity: name.to_string(),
                        frame,
                        empirical: e.value,
                        standard_error: e.standard_error,
                        analytic: *a,
                    });
                }
            }
        }
        out
    }

    /// No disagreement at [`SE_MULTIPLIER`] standard errors.
    pub fn agrees_with(&self, analytic: &AnalyticValues) -> bool {
        self.disagreements(analytic, SE_MULTIPLIER).is_empty()
    }
}

/// Distortion and both perception measures from the joint covariance.
pub fn analytic_values(source: &GaussMarkovSource, law: &LinearReconstructionLaw) -> Result<AnalyticValues, MonteCarloError> {
    let stats = assemble_joint_stats(source, law)?;
    let t = source.frames();
    let mut fmd = Vec::with_capacity(t);
    let mut jd = Vec::with_capacity(t);
    for j in 0..t {
        fmd.push(w2sq_gauss_1d(source.sigma(j), stats.cov[(stats.xhat(j), stats.xhat(j))].max(0.0).sqrt())?);
        jd.push(w2sq_gauss_nd(&stats.source_prefix(j + 1), &stats.reconstruction_prefix(j + 1))?.max(0.0));
    }
    Ok(AnalyticValues { distortion: stats.distortions(), perception_fmd: fmd, perception_jd: jd })
}

fn block_rng(seed: u64, block: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

fn block_sizes(n: usize) -> Vec<usize> {
    let base = n / BLOCKS;
    let extra = n % BLOCKS;
    (0..BLOCKS).map(|b| base + usize::from(b < extra)).collect()
}

/// Draws one source trajectory into `x`.
fn draw_source<R: Rng + ?Sized>(source: &GaussMarkovSource, rng: &mut R, x: &mut [f64]) {
    for j in 0..x.len() {
        let z: f64 = rng.sample(StandardNormal);
        x[j] = if j == 0 {
            source.sigma(0) * z
        } else {
            source.transition_gain(j - 1) * x[j - 1] + source.innovation_var(j - 1).sqrt() * z
        };
    }
}

/// `n` trajectories of the source, one row per sample.
pub fn gaussian_sampler(source: &GaussMarkovSource, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let t = source.frames();
    let sizes = block_sizes(n);
    let blocks: Vec<Vec<Vec<f64>>> = sizes
        .par_iter()
        .enumerate()
        .map(|(b, &m)| {
            let mut rng = block_rng(seed, b as u64);
            (0..m)
                .map(|_| {
                    let mut x = vec![0.0; t];
                    draw_source(source, &mut rng, &mut x);
                    x
                })
                .collect()
        })
        .collect();
    blocks.into_iter().flatten().collect()
}

/// Sums accumulated over one block.
struct BlockSums {
    count: usize,
    err: Vec<Kahan>,
    err_sq: Vec<Kahan>,
    /// Uncentered second moments of the reconstruction.
    moments: Vec<Kahan>,
}

fn run_block(source: &GaussMarkovSource, law: &LinearReconstructionLaw, m: usize, rng: &mut ChaCha20Rng) -> BlockSums {
    let t = source.frames();
    let mut sums = BlockSums {
        count: m,
        err: vec![Kahan::default(); t],
        err_sq: vec![Kahan::default(); t],
        moments: vec![Kahan::default(); t * t],
    };
    let noise_sd: Vec<f64> = law.frame_laws().iter().map(|f| f.noise_var.sqrt()).collect();
    let mut x = vec![0.0; t];
    let mut xh = vec![0.0; t];
    for _ in 0..m {
        draw_source(source, rng, &mut x);
        for j in 0..t {
            let f = law.frame(j);
            let mut v = f.source * x[j];
            for (i, a) in f.past.iter().enumerate() {
                v += a * xh[i];
            }
            if noise_sd[j] > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v += noise_sd[j] * z;
            }
            xh[j] = v;
            let e = (x[j] - v) * (x[j] - v);
            sums.err[j].add(e);
            sums.err_sq[j].add(e * e);
        }
        for a in 0..t {
            for b in 0..=a {
                sums.moments[a * t + b].add(xh[a] * xh[b]);
            }
        }
    }
    sums
}

fn moment_matrix(moments: &[f64], t: usize, count: f64) -> Mat {
    Mat::from_fn(t, t, |a, b| {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        moments[hi * t + lo] / count
    })
}

fn perceptions(source: &GaussMarkovSource, m: &Mat) -> Result<(Vec<f64>, Vec<f64>), MonteCarloError> {
    let t = source.frames();
    let cov = source.covariance();
    let mut fmd = Vec::with_capacity(t);
    let mut jd = Vec::with_capacity(t);
    for j in 0..t {
        fmd.push(w2sq_gauss_1d(source.sigma(j), m[(j, j)].max(0.0).sqrt())?);
        let idx: Vec<usize> = (0..=j).collect();
        jd.push(w2sq_gauss_nd(&cov.select(&idx), &m.select(&idx))?.max(0.0));
    }
    Ok((fmd, jd))
}

fn batch_estimate(total: f64, per_block: &[f64]) -> Estimate {
    let b = per_block.len() as f64;
    let mean = per_block.iter().sum::<f64>() / b;
    let var = per_block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1.0);
    Estimate { value: total, standard_error: (var / b).sqrt() }
}

/// Simulates `n` samples of `(X, X̂)` under `law`.
pub fn simulate(
    source: &GaussMarkovSource,
    law: &LinearReconstructionLaw,
    n: usize,
    seed: u64,
) -> Result<SimReport, MonteCarloError> {
    if n < MIN_SAMPLES {
        return Err(MonteCarloError::InvalidInput(format!("at least {MIN_SAMPLES} samples are required")));
    }
    if law.frames() != source.frames() {
        return Err(MonteCarloError::InvalidInput("law and source frame counts differ".into()));
    }
    // Rejects laws with inconsistent dimensions or negative noise.
    assemble_joint_stats(source, law)?;
    let t = source.frames();
    let blocks: Vec<BlockSums> = block_sizes(n)
        .par_iter()
        .enumerate()
        .map(|(b, &m)| run_block(source, law, m, &mut block_rng(seed, b as u64)))
        .collect();

    let mut err = vec![Kahan::default(); t];
    let mut err_sq = vec![Kahan::default(); t];
    let mut moments = vec![Kahan::default(); t * t];
    for blk in &blocks {
        for j in 0..t {
            err[j].add(blk.err[j].sum);
            err_sq[j].add(blk.err_sq[j].sum);
        }
        for (acc, v) in moments.iter_mut().zip(&blk.moments) {
            acc.add(v.sum);
        }
    }
    let nf = n as f64;
    let distortion = (0..t)
        .map(|j| {
            let mean = err[j].sum / nf;
            let var = (err_sq[j].sum / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
            Estimate { value: mean, standard_error: (var / nf).sqrt() }
        })
        .collect();

    let totals: Vec<f64> = moments.iter().map(|k| k.sum).collect();
    let (fmd_all, jd_all) = perceptions(source, &moment_matrix(&totals, t, nf))?;
    let mut fmd_blocks = vec![Vec::with_capacity(BLOCKS); t];
    let mut jd_blocks = vec![Vec::with_capacity(BLOCKS); t];
    for blk in &blocks {
        let sums: Vec<f64> = blk.moments.iter().map(|k| k.sum).collect();
        let (f, d) = perceptions(source, &moment_matrix(&sums, t, blk.count as f64))?;
        for j in 0..t {
            fmd_blocks[j].push(f[j]);
            jd_blocks[j].push(d[j]);
        }
    }
    Ok(SimReport {
        n,
        seed,
        distortion,
        perception_fmd: (0..t).map(|j| batch_estimate(fmd_all[j], &fmd_blocks[j])).collect(),
        perception_jd: (0..t).map(|j| batch_estimate(jd_all[j], &jd_blocks[j])).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_law_has_zero_distortion() {
        let source = GaussMarkovSource::symmetric(3, 1.0, 0.7).unwrap();
        let law = LinearReconstructionLaw::identity(&source);
        let report = simulate(&source, &law, 5_000, 3).unwrap();
        for d in &report.distortion {
            assert_eq!(d.value, 0.0);
        }
    }

    #[test]
    fn full_correlation_repeats_the_first_frame() {
        let source = GaussMarkovSource::symmetric(2, 1.5, 1.0).unwrap();
        for x in gaussian_sampler(&source, 1_000, 11) {
            assert_eq!(x[0], x[1]);
        }
    }

    #[test]
    fn reports_are_reproducible() {
        let source = GaussMarkovSource::symmetric(2, 1.0, 0.5).unwrap();
        let law = LinearReconstructionLaw::from_coefficients(
            &source,
            vec![
                crate::model::FrameCoefficients::new(vec![], 0.6, 0.2),
                crate::model::FrameCoefficients::new(vec![0.3], 0.5, 0.1),
            ],
        )
        .unwrap();
        let a = simulate(&source, &law, 4_000, 5).unwrap();
        let b = simulate(&source, &law, 4_000, 5).unwrap();
        assert_eq!(a, b);
    }
}
