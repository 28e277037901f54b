//! Perfect-realism reconstructions for fixed discrete encoders.
//!
//! Starting from the MMSE reconstruction `X̃` of a fixed encoder, the
//! constructions here transport `X̃_j` onto the source law. Under a marginal
//! (FMD) constraint each frame is coupled with `P_{X_j}` independently; under
//! a joint (JD) constraint frame `j` is coupled, conditionally on the earlier
//! outputs, with `P_{X_j | X_{j-1}}` evaluated at the previous output.

use crate::discrete_core::{
    evaluate, for_each_path, joint_law, marginal_of, mmse_reconstruction, uniform, DiscreteEncoder, DiscreteError,
    DiscreteMarkovSource, DiscreteReconstruction, DiscreteSystem, JointLaw, KernelTable, MmseReconstruction,
    DEFAULT_CELL_CAP,
};
use crate::transport::{monotone_coupling, w2sq_discrete_1d, ScalarPmf};
use rand::Rng;
use rayon::prelude::*;
use std::collections::HashMap;

/// Exact joint law and MMSE reconstruction of a system, computed once and
/// shared by the threshold and construction routines.
#[derive(Debug, Clone)]
pub struct SystemAnalysis {
    pub joint: JointLaw,
    pub mmse: MmseReconstruction,
}

impl SystemAnalysis {
    pub fn new(system: &DiscreteSystem) -> Result<Self, DiscreteError> {
        let joint = system.joint()?;
        let mmse = mmse_reconstruction(&joint)?;
        Ok(Self { joint, mmse })
    }
}

/// A perfect-realism reconstruction with its exact per-frame thresholds.
#[derive(Debug, Clone)]
pub struct RealismConstruction {
    pub reconstruction: DiscreteReconstruction,
    /// `MMSE_j + expected conditional W2²` per frame.
    pub threshold: Vec<f64>,
}

/// Zero-perception threshold under the marginal constraint:
/// `D_j = E[(X_j − X̃_j)²] + W2²(P_{X̃_j}, P_{X_j})`.
pub fn fmd_threshold(system: &DiscreteSystem) -> Result<Vec<f64>, DiscreteError> {
    fmd_threshold_of(&SystemAnalysis::new(system)?)
}

pub fn fmd_threshold_of(a: &SystemAnalysis) -> Result<Vec<f64>, DiscreteError> {
    (0..a.joint.frames())
        .map(|j| {
            let tilde = a.mmse.marginal(&a.joint, j)?;
            let target = a.joint.marginal_x(j)?;
            Ok(a.mmse.distortion[j] + w2sq_discrete_1d(&tilde, &target))
        })
        .collect()
}

/// Reconstruction attaining [`fmd_threshold`]: per context, `X̂_j` is drawn
/// from the row of the monotone coupling of `P_{X̃_j}` with `P_{X_j}` at the
/// context's conditional mean.
pub fn fmd_construct(system: &DiscreteSystem) -> Result<DiscreteReconstruction, DiscreteError> {
    Ok(fmd_construct_of(&SystemAnalysis::new(system)?)?.reconstruction)
}

pub fn fmd_construct_of(a: &SystemAnalysis) -> Result<RealismConstruction, DiscreteError> {
    let src = a.joint.source();
    let t = a.joint.frames();
    let mut kernels = Vec::with_capacity(t);
    let mut threshold = Vec::with_capacity(t);
    for j in 0..t {
        let tilde = a.mmse.marginal(&a.joint, j)?;
        let target = a.joint.marginal_x(j)?;
        let coupling = monotone_coupling(&tilde, &target);
        threshold.push(a.mmse.distortion[j] + coupling.cost());
        let rows = coupling_rows(&coupling, src.values(j));
        let mut table = KernelTable::new();
        for (key, mean) in &a.mmse.means[j] {
            let i = tilde.index_of(*mean).expect("conditional mean lies in its own marginal");
            table.insert((*key, 0), rows[i].clone());
        }
        kernels.push(table);
    }
    let outputs = (0..t).map(|j| src.values(j).to_vec()).collect();
    let reconstruction = DiscreteReconstruction::new(outputs, vec![false; t], kernels)?;
    Ok(RealismConstruction { reconstruction, threshold })
}

/// Per-row conditional laws of a coupling, with column indices mapped into
/// the frame alphabet and renormalized against rounding.
fn coupling_rows(coupling: &crate::transport::DiscreteCoupling, alphabet: &[f64]) -> Vec<Vec<(usize, f64)>> {
    (0..coupling.rows.len())
        .map(|i| {
            let row = coupling.row_conditional(i);
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            row.into_iter()
                .map(|(k, p)| {
                    let y = coupling.cols.support()[k];
                    let idx = alphabet.iter().position(|v| *v == y).expect("target supported on alphabet");
                    (idx, p / total)
                })
                .collect()
        })
        .collect()
}

/// Zero-perception threshold under the joint constraint:
/// `D_j = MMSE_j + Σ_path P(path) W2²(P_{X̃_j | X̂_<j = path}, P_{X_j | X_{j−1} = x̂_{j−1}})`,
/// with the earlier outputs produced by [`jd_construct`].
pub fn jd_threshold(system: &DiscreteSystem) -> Result<Vec<f64>, DiscreteError> {
    Ok(jd_construct_of(&SystemAnalysis::new(system)?)?.threshold)
}

/// Sequential joint-realism reconstruction. Frame 1 matches the marginal
/// construction; frame `j ≥ 2` couples `P_{X̃_j | X̂_<j}` with the source
/// transition out of the previous output.
pub fn jd_construct(system: &DiscreteSystem) -> Result<DiscreteReconstruction, DiscreteError> {
    Ok(jd_construct_of(&SystemAnalysis::new(system)?)?.reconstruction)
}

pub fn jd_construct_of(a: &SystemAnalysis) -> Result<RealismConstruction, DiscreteError> {
    let src = a.joint.source();
    let t = a.joint.frames();
    let outputs: Vec<Vec<f64>> = (0..t).map(|j| src.values(j).to_vec()).collect();
    let mut reads_past = vec![false; t];
    let mut kernels: Vec<KernelTable> = vec![KernelTable::new(); t];
    let mut threshold = Vec::with_capacity(t);

    let first = fmd_construct_of(a)?;
    kernels[0] = first.reconstruction.kernel_table(0).clone();
    threshold.push(first.threshold[0]);

    for j in 1..t {
        reads_past[j] = true;
        let partial = DiscreteReconstruction::new(outputs.clone(), reads_past.clone(), kernels.clone())?;
        // Per earlier-output path: weighted conditional means, and the set of
        // decoder contexts reached along it.
        let mut by_path: HashMap<Vec<usize>, (Vec<(f64, f64)>, HashMap<u64, f64>)> = HashMap::new();
        for_each_path(&a.joint, &partial, j, |c, path, w| {
            let key = a.joint.context_key(c, j);
            let mean = a.mmse.means[j][&key];
            let entry = by_path.entry(path.to_vec()).or_default();
            entry.0.push((mean, w));
            entry.1.insert(key, mean);
        })?;
        let mut cost = 0.0;
        let mut paths: Vec<_> = by_path.into_iter().collect();
        paths.sort_by(|x, y| x.0.cmp(&y.0));
        for (path, (atoms, contexts)) in paths {
            let weight: f64 = atoms.iter().map(|(_, w)| w).sum();
            let tilde = marginal_of(atoms)?;
            let target = src.conditional(j - 1, path[j - 1])?;
            let coupling = monotone_coupling(&tilde, &target);
            cost += weight * coupling.cost();
            let rows = coupling_rows(&coupling, src.values(j));
            let past = partial.past_key(j, &path);
            for (key, mean) in contexts {
                let i = tilde.index_of(mean).expect("conditional mean lies in its own law");
                kernels[j].insert((key, past), rows[i].clone());
            }
        }
        threshold.push(a.mmse.distortion[j] + cost);
    }
    let reconstruction = DiscreteReconstruction::new(outputs, reads_past, kernels)?;
    Ok(RealismConstruction { reconstruction, threshold })
}

/// Largest cellwise gap between the joint law of the outputs and the source
/// joint law.
pub fn joint_law_deviation(joint: &JointLaw, recon: &DiscreteReconstruction) -> Result<f64, DiscreteError> {
    let eval = evaluate(joint, recon)?;
    let src = joint.source().joint_paths(joint.frames());
    let mut worst: f64 = 0.0;
    for (path, p) in &src {
        worst = worst.max((eval.output_paths.get(path).copied().unwrap_or(0.0) - p).abs());
    }
    for (path, p) in &eval.output_paths {
        if !src.iter().any(|(q, _)| q == path) {
            worst = worst.max(p.abs());
        }
    }
    Ok(worst)
}

/// Largest per-frame gap between the output marginals and the source
/// marginals, measured as total variation on the merged support.
pub fn marginal_deviation(joint: &JointLaw, recon: &DiscreteReconstruction) -> Result<f64, DiscreteError> {
    let eval = evaluate(joint, recon)?;
    let mut worst: f64 = 0.0;
    for j in 0..joint.frames() {
        let got = eval.marginal(recon, j)?;
        let want = joint.marginal_x(j)?;
        worst = worst.max(pmf_max_gap(&got, &want));
    }
    Ok(worst)
}

fn pmf_max_gap(p: &ScalarPmf, q: &ScalarPmf) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, w) in p.support().iter().zip(p.probs()) {
        worst = worst.max((w - q.prob_of(*x)).abs());
    }
    for (x, w) in q.support().iter().zip(q.probs()) {
        worst = worst.max((w - p.prob_of(*x)).abs());
    }
    worst
}

/// The two-frame system in which the first message is independent of the
/// source and the second message reveals `X_2` exactly, on a binary chain
/// over `{−1, +1}` with uniform start and the given flip probability.
pub fn counterexample_system(flip: f64) -> Result<DiscreteSystem, DiscreteError> {
    let source = DiscreteMarkovSource::binary_chain(2, -1.0, 1.0, 0.5, flip)?;
    let enc = DiscreteEncoder::from_fn(vec![1.0], vec![2, 2], vec![1, 2], |j, _, _, x| {
        if j == 0 {
            vec![1.0]
        } else {
            let mut v = vec![0.0; 2];
            v[x] = 1.0;
            v
        }
    })?;
    DiscreteSystem::new(source, enc)
}

/// Noisy version of a base encoder: with probability `mu` the base message
/// is sent, otherwise a message is drawn from the base message law given the
/// earlier messages and `K`, independently of the source.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyEncoderSpec {
    pub mu: f64,
    pub base: DiscreteSystem,
}

impl NoisyEncoderSpec {
    pub fn new(mu: f64, base: DiscreteSystem) -> Result<Self, DiscreteError> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(DiscreteError::InvalidEncoder(format!("mixing weight {mu} outside [0, 1]")));
        }
        Ok(Self { mu, base })
    }

    /// The induced system.
    pub fn system(&self) -> Result<DiscreteSystem, DiscreteError> {
        let base_joint = joint_law(&self.base.source, &self.base.encoder, DEFAULT_CELL_CAP)?;
        let enc = &self.base.encoder;
        let sizes = enc.msg_sizes().to_vec();
        // Base law of M_j given (K, M_<j), keyed by the frame-j context of
        // the full message prefix.
        let mut prior: Vec<HashMap<(usize, Vec<usize>), Vec<f64>>> = vec![HashMap::new(); sizes.len()];
        for c in 0..base_joint.len() {
            for (j, table) in prior.iter_mut().enumerate() {
                let prev = base_joint.messages(c, j);
                let row = table.entry((base_joint.k(c), prev)).or_insert_with(|| vec![0.0; sizes[j]]);
                row[base_joint.m(c, j)] += base_joint.prob(c);
            }
        }
        for table in &mut prior {
            for row in table.values_mut() {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let mu = self.mu;
        let noisy = DiscreteEncoder::from_fn(
            enc.k_probs().to_vec(),
            enc.x_sizes().to_vec(),
            sizes.clone(),
            |j, k, prev, x| {
                let base = enc.row(j, k, prev, x);
                let noise = prior[j].get(&(k, prev.to_vec())).cloned().unwrap_or_else(|| uniform(sizes[j]));
                let mut row: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| mu * b + (1.0 - mu) * n).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            },
        )?;
        DiscreteSystem::new(self.base.source.clone(), noisy)
    }
}

/// One row of a noisy-encoder sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySweepRow {
    pub mu: f64,
    pub mmse: Vec<f64>,
    pub jd_mse: Vec<f64>,
    /// `jd_mse − 2·mmse` per frame.
    pub gap: Vec<f64>,
}

/// Builds the noisy system at each `mu`, runs the joint-realism
/// construction, and reports its MSE against twice the MMSE.
pub fn noisy_factor_two_sweep(base: &DiscreteSystem, mus: &[f64]) -> Result<Vec<NoisySweepRow>, DiscreteError> {
    mus.par_iter()
        .map(|&mu| {
            let sys = NoisyEncoderSpec::new(mu, base.clone())?.system()?;
            let a = SystemAnalysis::new(&sys)?;
            let built = jd_construct_of(&a)?;
            let jd_mse = evaluate(&a.joint, &built.reconstruction)?.mse;
            let gap = jd_mse.iter().zip(&a.mmse.distortion).map(|(d, m)| d - 2.0 * m).collect();
            Ok(NoisySweepRow { mu, mmse: a.mmse.distortion.clone(), jd_mse, gap })
        })
        .collect()
}

/// Least-squares fit `g ≈ c·μ` through the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OriginFit {
    pub slope: f64,
    /// Uncentered coefficient of determination `1 − Σ(g − cμ)² / Σg²`; equal
    /// to one when every value is zero.
    pub r_squared: f64,
}

pub fn fit_through_origin(xs: &[f64], ys: &[f64]) -> OriginFit {
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    OriginFit { slope, r_squared }
}

/// Random enumerable system for property checks.
///
/// Alphabets have between 2 and `max_alphabet` strictly increasing values in
/// `[-2, 2]`; probabilities are drawn uniformly and normalized, with roughly
/// one entry in six set to zero to exercise degenerate contexts.
pub fn random_system<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    max_alphabet: usize,
    max_messages: usize,
    k_size: usize,
) -> Result<DiscreteSystem, DiscreteError> {
    let values: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            let n = rng.random_range(2..=max_alphabet.max(2));
            let mut v: Vec<f64> = Vec::with_capacity(n);
            let mut x = rng.random_range(-2.0..-1.0);
            for _ in 0..n {
                v.push(x);
                x += rng.random_range(0.1..1.0);
            }
            v
        })
        .collect();
    let initial = random_pmf(rng, values[0].len());
    let transitions = (1..frames)
        .map(|j| (0..values[j - 1].len()).map(|_| random_pmf(rng, values[j].len())).collect())
        .collect();
    let source = DiscreteMarkovSource::new(values, initial, transitions)?;
    let x_sizes: Vec<usize> = (0..frames).map(|j| source.alphabet_size(j)).collect();
    let msg_sizes: Vec<usize> = (0..frames).map(|_| rng.random_range(1..=max_messages.max(1))).collect();
    let enc = DiscreteEncoder::from_fn(uniform(k_size), x_sizes, msg_sizes.clone(), |j, _, _, _| {
        random_pmf(rng, msg_sizes[j])
    })?;
    DiscreteSystem::new(source, enc)
}

fn random_pmf<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(1.0 / 6.0) { 0.0 } else { rng.random_range(0.05..1.0) })
        .collect();
    if p.iter().all(|v| *v == 0.0) {
        p[rng.random_range(0..n)] = 1.0;
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}
