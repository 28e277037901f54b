//! Exact enumeration engine for finite-alphabet causal systems.
//!
//! A system is a first-order Markov source, a causal stochastic encoder with
//! shared randomness `K`, and (optionally) a causal reconstruction. Everything
//! is enumerated cell by cell, so all distortions and laws are exact up to
//! floating-point rounding.

use crate::transport::{ScalarPmf, TransportError};
use std::collections::HashMap;
use thiserror::Error;

/// Default cap on the enumerated state-space size.
pub const DEFAULT_CELL_CAP: usize = 10_000_000;
/// Default size of the uniform shared-randomness alphabet.
pub const DEFAULT_K_SIZE: usize = 4;
/// Tolerance on conditional pmf normalization.
pub const PMF_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscreteError {
    #[error("invalid source: {0}")]
    InvalidSource(String),
    #[error("invalid encoder: {0}")]
    InvalidEncoder(String),
    #[error("invalid reconstruction: {0}")]
    InvalidReconstruction(String),
    #[error("state space of {cells} cells exceeds the cap of {cap}")]
    CapExceeded { cells: u128, cap: usize },
    #[error("conditioning event has zero probability")]
    ZeroProbability,
    #[error("reconstruction has no kernel for frame {frame} in a context of positive probability")]
    MissingContext { frame: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

fn check_pmf(p: &[f64], what: &str) -> Result<(), String> {
    if p.is_empty() {
        return Err(format!("{what} is empty"));
    }
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(format!("{what} has invalid entry {v}"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PMF_TOL {
        return Err(format!("{what} sums to {s}"));
    }
    Ok(())
}

/// Finite-alphabet first-order Markov source with real-valued symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMarkovSource {
    values: Vec<Vec<f64>>,
    initial: Vec<f64>,
    /// `transitions[j][a][b] = P(X_{j+1} = values[j+1][b] | X_j = values[j][a])`.
    transitions: Vec<Vec<Vec<f64>>>,
}

impl DiscreteMarkovSource {
    pub fn new(
        values: Vec<Vec<f64>>,
        initial: Vec<f64>,
        transitions: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, DiscreteError> {
        if values.is_empty() {
            return Err(DiscreteError::InvalidSource("no frames".into()));
        }
        for (j, v) in values.iter().enumerate() {
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| w[0] >= w[1]) {
                return Err(DiscreteError::InvalidSource(format!(
                    "frame {j} values must be finite and strictly increasing"
                )));
            }
        }
        if initial.len() != values[0].len() {
            return Err(DiscreteError::InvalidSource("initial pmf length".into()));
        }
        check_pmf(&initial, "initial pmf").map_err(DiscreteError::InvalidSource)?;
        if transitions.len() + 1 != values.len() {
            return Err(DiscreteError::InvalidSource("need one transition matrix per step".into()));
        }
        for (j, m) in transitions.iter().enumerate() {
            if m.len() != values[j].len() {
                return Err(DiscreteError::InvalidSource(format!("transition {j} row count")));
            }
            for (a, row) in m.iter().enumerate() {
                if row.len() != values[j + 1].len() {
                    return Err(DiscreteError::InvalidSource(format!("transition {j} row {a} length")));
                }
                check_pmf(row, &format!("transition {j} row {a}")).map_err(DiscreteError::InvalidSource)?;
            }
        }
        Ok(Self { values, initial, transitions })
    }

    /// Binary chain on `{lo, hi}` with `P(X_1 = lo) = p_lo` and flip
    /// probability `flip` at every step.
    pub fn binary_chain(frames: usize, lo: f64, hi: f64, p_lo: f64, flip: f64) -> Result<Self, DiscreteError> {
        let values = vec![vec![lo, hi]; frames];
        let step = vec![vec![1.0 - flip, flip], vec![flip, 1.0 - flip]];
        Self::new(values, vec![p_lo, 1.0 - p_lo], vec![step; frames.saturating_sub(1)])
    }

    pub fn frames(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    pub fn alphabet_size(&self, j: usize) -> usize {
        self.values[j].len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    /// `P(X_{j+1} = · | X_j = values[j][a])`.
    pub fn transition_row(&self, j: usize, a: usize) -> &[f64] {
        &self.transitions[j][a]
    }

    /// Probability of a full index path.
    pub fn path_prob(&self, xs: &[usize]) -> f64 {
        let mut p = self.initial[xs[0]];
        for j in 1..xs.len() {
            p *= self.transitions[j - 1][xs[j - 1]][xs[j]];
        }
        p
    }

    /// Marginal probabilities of frame `j` over its alphabet.
    pub fn marginal_probs(&self, j: usize) -> Vec<f64> {
        let mut p = self.initial.clone();
        for step in &self.transitions[..j] {
            let mut next = vec![0.0; step[0].len()];
            for (a, row) in step.iter().enumerate() {
                for (b, t) in row.iter().enumerate() {
                    next[b] += p[a] * t;
                }
            }
            p = next;
        }
        p
    }

    /// Marginal law of frame `j`.
    pub fn marginal(&self, j: usize) -> Result<ScalarPmf, DiscreteError> {
        marginal_of(self.values[j].iter().copied().zip(self.marginal_probs(j)))
    }

    /// Law of `X_{j+1}` given `X_j = values[j][a]`.
    pub fn conditional(&self, j: usize, a: usize) -> Result<ScalarPmf, DiscreteError> {
        marginal_of(self.values[j + 1].iter().copied().zip(self.transitions[j][a].iter().copied()))
    }

    /// Joint pmf of the first `frames` frames as `(index path, probability)`
    /// pairs with positive probability.
    pub fn joint_paths(&self, frames: usize) -> Vec<(Vec<usize>, f64)> {
        let mut out: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
        for j in 0..frames {
            let mut next = Vec::new();
            for (path, p) in out {
                for b in 0..self.values[j].len() {
                    let t = if j == 0 { self.initial[b] } else { self.transitions[j - 1][path[j - 1]][b] };
                    if t > 0.0 {
                        let mut np = path.clone();
                        np.push(b);
                        next.push((np, p * t));
                    }
                }
            }
            out = next;
        }
        out
    }
}

/// Builds an exact pmf from weighted atoms, merging support points within
/// `1e-12`.
pub fn marginal_of(atoms: impl IntoIterator<Item = (f64, f64)>) -> Result<ScalarPmf, DiscreteError> {
    let atoms: Vec<(f64, f64)> = atoms.into_iter().collect();
    if atoms.iter().map(|(_, w)| w.max(0.0)).sum::<f64>() <= 0.0 {
        return Err(DiscreteError::ZeroProbability);
    }
    Ok(ScalarPmf::from_weighted(atoms)?)
}

/// Mixed-radix index of a prefix of digits.
fn mixed_radix(digits: impl IntoIterator<Item = (usize, usize)>) -> u64 {
    digits.into_iter().fold(0u64, |acc, (d, radix)| acc * radix as u64 + d as u64)
}

/// Causal stochastic encoder with shared randomness.
///
/// Frame `j` draws `M_j` from `P(M_j | X_j, M_1..M_{j-1}, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteEncoder {
    k_probs: Vec<f64>,
    x_sizes: Vec<usize>,
    msg_sizes: Vec<usize>,
    /// Frame `j` table indexed `[((k·Π|M_<j|) + ctx)·|X_j| + x]·|M_j| + m`.
    maps: Vec<Vec<f64>>,
}

impl DiscreteEncoder {
    /// Builds an encoder from a closure returning `P(M_j = · | x, m_<j, k)`.
    pub fn from_fn(
        k_probs: Vec<f64>,
        x_sizes: Vec<usize>,
        msg_sizes: Vec<usize>,
        mut f: impl FnMut(usize, usize, &[usize], usize) -> Vec<f64>,
    ) -> Result<Self, DiscreteError> {
        check_pmf(&k_probs, "shared randomness pmf").map_err(DiscreteError::InvalidEncoder)?;
        if x_sizes.len() != msg_sizes.len() || msg_sizes.iter().any(|m| *m == 0) {
            return Err(DiscreteError::InvalidEncoder("frame count or empty message alphabet".into()));
        }
        let mut maps = Vec::with_capacity(msg_sizes.len());
        for j in 0..msg_sizes.len() {
            let n_ctx: usize = msg_sizes[..j].iter().product();
            let mut table = Vec::with_capacity(k_probs.len() * n_ctx * x_sizes[j] * msg_sizes[j]);
            for k in 0..k_probs.len() {
                for ctx in 0..n_ctx {
                    let prev = decode_radix(ctx, &msg_sizes[..j]);
                    for x in 0..x_sizes[j] {
                        let row = f(j, k, &prev, x);
                        if row.len() != msg_sizes[j] {
                            return Err(DiscreteError::InvalidEncoder(format!("frame {j} row length")));
                        }
                        check_pmf(&row, &format!("encoder frame {j}")).map_err(DiscreteError::InvalidEncoder)?;
                        table.extend(row);
                    }
                }
            }
            maps.push(table);
        }
        Ok(Self { k_probs, x_sizes, msg_sizes, maps })
    }

    /// `M_j = X_j`, ignoring shared randomness.
    pub fn lossless(source: &DiscreteMarkovSource, k_size: usize) -> Result<Self, DiscreteError> {
        let sizes: Vec<usize> = (0..source.frames()).map(|j| source.alphabet_size(j)).collect();
        let rows = sizes.clone();
        Self::from_fn(uniform(k_size), sizes.clone(), sizes, move |j, _, _, x| {
            let mut v = vec![0.0; rows[j]];
            v[x] = 1.0;
            v
        })
    }

    /// Constant single-symbol messages.
    pub fn constant(source: &DiscreteMarkovSource, k_size: usize) -> Result<Self, DiscreteError> {
        let sizes: Vec<usize> = (0..source.frames()).map(|j| source.alphabet_size(j)).collect();
        Self::from_fn(uniform(k_size), sizes, vec![1; source.frames()], |_, _, _, _| vec![1.0])
    }

    pub fn frames(&self) -> usize {
        self.msg_sizes.len()
    }

    pub fn k_probs(&self) -> &[f64] {
        &self.k_probs
    }

    pub fn k_size(&self) -> usize {
        self.k_probs.len()
    }

    pub fn msg_sizes(&self) -> &[usize] {
        &self.msg_sizes
    }

    pub fn x_sizes(&self) -> &[usize] {
        &self.x_sizes
    }

    /// `P(M_j = m | X_j = x, M_<j = prev, K = k)`.
    pub fn prob(&self, j: usize, k: usize, prev: &[usize], x: usize, m: usize) -> f64 {
        let ctx = mixed_radix(prev.iter().copied().zip(self.msg_sizes[..j].iter().copied())) as usize;
        let n_ctx: usize = self.msg_sizes[..j].iter().product();
        let base = ((k * n_ctx + ctx) * self.x_sizes[j] + x) * self.msg_sizes[j];
        self.maps[j][base + m]
    }

    /// Row `P(M_j = · | x, prev, k)`.
    pub fn row(&self, j: usize, k: usize, prev: &[usize], x: usize) -> &[f64] {
        let ctx = mixed_radix(prev.iter().copied().zip(self.msg_sizes[..j].iter().copied())) as usize;
        let n_ctx: usize = self.msg_sizes[..j].iter().product();
        let base = ((k * n_ctx + ctx) * self.x_sizes[j] + x) * self.msg_sizes[j];
        &self.maps[j][base..base + self.msg_sizes[j]]
    }
}

/// Uniform pmf over `n` symbols.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n.max(1)]
}

fn decode_radix(mut index: usize, radices: &[usize]) -> Vec<usize> {
    let mut out = vec![0; radices.len()];
    for (slot, r) in out.iter_mut().zip(radices).rev() {
        *slot = index % r;
        index /= r;
    }
    out
}

/// A source together with a fixed encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSystem {
    pub source: DiscreteMarkovSource,
    pub encoder: DiscreteEncoder,
}

impl DiscreteSystem {
    pub fn new(source: DiscreteMarkovSource, encoder: DiscreteEncoder) -> Result<Self, DiscreteError> {
        if source.frames() != encoder.frames() {
            return Err(DiscreteError::InvalidEncoder("frame count differs from source".into()));
        }
        for j in 0..source.frames() {
            if source.alphabet_size(j) != encoder.x_sizes()[j] {
                return Err(DiscreteError::InvalidEncoder(format!("frame {j} input alphabet size")));
            }
        }
        Ok(Self { source, encoder })
    }

    pub fn joint(&self) -> Result<JointLaw, DiscreteError> {
        joint_law(&self.source, &self.encoder, DEFAULT_CELL_CAP)
    }
}

/// Exact joint pmf over `(X_1..X_T, M_1..M_T, K)`, stored sparsely.
#[derive(Debug, Clone)]
pub struct JointLaw {
    source: DiscreteMarkovSource,
    k_size: usize,
    msg_sizes: Vec<usize>,
    frames: usize,
    xs: Vec<u16>,
    ms: Vec<u16>,
    ks: Vec<u16>,
    probs: Vec<f64>,
}

/// Enumerates the joint law of a source and a causal encoder.
pub fn joint_law(
    source: &DiscreteMarkovSource,
    enc: &DiscreteEncoder,
    cap: usize,
) -> Result<JointLaw, DiscreteError> {
    let t = source.frames();
    if enc.frames() != t {
        return Err(DiscreteError::InvalidEncoder("frame count differs from source".into()));
    }
    let mut cells: u128 = enc.k_size() as u128;
    for j in 0..t {
        if source.alphabet_size(j) != enc.x_sizes()[j] {
            return Err(DiscreteError::InvalidEncoder(format!("frame {j} input alphabet size")));
        }
        cells *= (source.alphabet_size(j) * enc.msg_sizes()[j]) as u128;
    }
    if cells > cap as u128 {
        return Err(DiscreteError::CapExceeded { cells, cap });
    }
    if source.values.iter().any(|v| v.len() > u16::MAX as usize) || enc.msg_sizes().iter().any(|m| *m > u16::MAX as usize) {
        return Err(DiscreteError::InvalidEncoder("alphabet too large".into()));
    }
    let mut law = JointLaw {
        source: source.clone(),
        k_size: enc.k_size(),
        msg_sizes: enc.msg_sizes().to_vec(),
        frames: t,
        xs: Vec::new(),
        ms: Vec::new(),
        ks: Vec::new(),
        probs: Vec::new(),
    };
    let mut xs = Vec::with_capacity(t);
    let mut ms = Vec::with_capacity(t);
    for k in 0..enc.k_size() {
        let pk = enc.k_probs()[k];
        if pk > 0.0 {
            extend_cells(source, enc, k, pk, &mut xs, &mut ms, &mut law);
        }
    }
    Ok(law)
}

fn extend_cells(
    source: &DiscreteMarkovSource,
    enc: &DiscreteEncoder,
    k: usize,
    p: f64,
    xs: &mut Vec<usize>,
    ms: &mut Vec<usize>,
    law: &mut JointLaw,
) {
    let j = xs.len();
    if j == source.frames() {
        law.xs.extend(xs.iter().map(|v| *v as u16));
        law.ms.extend(ms.iter().map(|v| *v as u16));
        law.ks.push(k as u16);
        law.probs.push(p);
        return;
    }
    for x in 0..source.alphabet_size(j) {
        let px = if j == 0 { source.initial[x] } else { source.transitions[j - 1][xs[j - 1]][x] };
        if px == 0.0 {
            continue;
        }
        xs.push(x);
        let row = enc.row(j, k, ms, x).to_vec();
        for (m, pm) in row.iter().enumerate() {
            if *pm == 0.0 {
                continue;
            }
            ms.push(m);
            extend_cells(source, enc, k, p * px * pm, xs, ms, law);
            ms.pop();
        }
        xs.pop();
    }
}

impl JointLaw {
    pub fn source(&self) -> &DiscreteMarkovSource {
        &self.source
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn k_size(&self) -> usize {
        self.k_size
    }

    pub fn msg_sizes(&self) -> &[usize] {
        &self.msg_sizes
    }

    /// Number of stored cells with positive probability.
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, c: usize) -> f64 {
        self.probs[c]
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Source symbol index of frame `j` in cell `c`.
    pub fn x(&self, c: usize, j: usize) -> usize {
        self.xs[c * self.frames + j] as usize
    }

    /// Source value of frame `j` in cell `c`.
    pub fn x_value(&self, c: usize, j: usize) -> f64 {
        self.source.values[j][self.x(c, j)]
    }

    pub fn m(&self, c: usize, j: usize) -> usize {
        self.ms[c * self.frames + j] as usize
    }

    pub fn k(&self, c: usize) -> usize {
        self.ks[c] as usize
    }

    /// Messages `M_1..M_{frames}` of cell `c`.
    pub fn messages(&self, c: usize, frames: usize) -> Vec<usize> {
        (0..frames).map(|j| self.m(c, j)).collect()
    }

    /// Mixed-radix key of the decoder context `(K, M_1..M_{j+1})` available
    /// at frame `j` (zero-based).
    pub fn context_key(&self, c: usize, j: usize) -> u64 {
        let digits = std::iter::once((self.k(c), self.k_size))
            .chain((0..=j).map(|i| (self.m(c, i), self.msg_sizes[i])));
        mixed_radix(digits)
    }

    /// Number of distinct context keys at frame `j`.
    pub fn context_count(&self, j: usize) -> u64 {
        self.k_size as u64 * self.msg_sizes[..=j].iter().map(|m| *m as u64).product::<u64>()
    }

    /// Splits a context key back into `(k, messages)`.
    pub fn decode_context(&self, key: u64, j: usize) -> (usize, Vec<usize>) {
        let mut radices = vec![self.k_size];
        radices.extend_from_slice(&self.msg_sizes[..=j]);
        let digits = decode_radix(key as usize, &radices);
        (digits[0], digits[1..].to_vec())
    }

    /// Marginal law of `X_j` computed from the cells.
    pub fn marginal_x(&self, j: usize) -> Result<ScalarPmf, DiscreteError> {
        marginal_of((0..self.len()).map(|c| (self.x_value(c, j), self.probs[c])))
    }

    /// Law of `X_j` restricted to cells satisfying `event`.
    pub fn conditional_x(&self, j: usize, event: impl Fn(usize) -> bool) -> Result<ScalarPmf, DiscreteError> {
        marginal_of((0..self.len()).filter(|c| event(*c)).map(|c| (self.x_value(c, j), self.probs[c])))
    }

    /// Probability of each source index path, aggregated over messages and
    /// shared randomness.
    pub fn source_paths(&self) -> HashMap<Vec<usize>, f64> {
        let mut out: HashMap<Vec<usize>, f64> = HashMap::new();
        for c in 0..self.len() {
            let path: Vec<usize> = (0..self.frames).map(|j| self.x(c, j)).collect();
            *out.entry(path).or_insert(0.0) += self.probs[c];
        }
        out
    }
}

/// Causal reconstruction given as stochastic kernels.
///
/// Frame `j` draws an output index from a kernel keyed by the decoder context
/// `(K, M_1..M_j)` and, when `reads_past[j]` is set, by the output indices of
/// frames `1..j-1`. Earlier outputs are themselves functions of the context
/// and of the auxiliary randomness that produced them, so a kernel keyed by
/// them is still a function of `(M_1..M_j, K')` for the enlarged shared
/// randomness `K'` built by [`DiscreteReconstruction::shared_randomness_realization`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteReconstruction {
    outputs: Vec<Vec<f64>>,
    reads_past: Vec<bool>,
    kernels: Vec<HashMap<(u64, u64), Vec<(usize, f64)>>>,
}

/// Kernel table of one frame: `(context key, past-output key) → [(output, prob)]`.
pub type KernelTable = HashMap<(u64, u64), Vec<(usize, f64)>>;

impl DiscreteReconstruction {
    /// Validates every kernel row (indices in range, probabilities summing to
    /// one).
    pub fn new(outputs: Vec<Vec<f64>>, reads_past: Vec<bool>, kernels: Vec<KernelTable>) -> Result<Self, DiscreteError> {
        if outputs.len() != reads_past.len() || outputs.len() != kernels.len() {
            return Err(DiscreteError::InvalidReconstruction("frame counts differ".into()));
        }
        for (j, table) in kernels.iter().enumerate() {
            for row in table.values() {
                if row.iter().any(|(o, p)| *o >= outputs[j].len() || !(p.is_finite() && *p >= 0.0)) {
                    return Err(DiscreteError::InvalidReconstruction(format!("frame {j} kernel entry")));
                }
                let s: f64 = row.iter().map(|(_, p)| p).sum();
                if (s - 1.0).abs() > PMF_TOL {
                    return Err(DiscreteError::InvalidReconstruction(format!("frame {j} kernel sums to {s}")));
                }
            }
        }
        Ok(Self { outputs, reads_past, kernels })
    }

    /// Deterministic reconstruction `X̂_j = f_j(K, M_1..M_j)` given by a map
    /// from context keys to values.
    pub fn deterministic(maps: Vec<HashMap<u64, f64>>) -> Result<Self, DiscreteError> {
        let mut outputs = Vec::with_capacity(maps.len());
        let mut kernels = Vec::with_capacity(maps.len());
        for map in &maps {
            let mut vals: Vec<f64> = map.values().copied().collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            let table = map
                .iter()
                .map(|(key, v)| {
                    let idx = vals.binary_search_by(|x| x.total_cmp(v)).expect("value present");
                    ((*key, 0u64), vec![(idx, 1.0)])
                })
                .collect();
            outputs.push(vals);
            kernels.push(table);
        }
        let t = maps.len();
        Self::new(outputs, vec![false; t], kernels)
    }

    pub fn frames(&self) -> usize {
        self.outputs.len()
    }

    pub fn outputs(&self, j: usize) -> &[f64] {
        &self.outputs[j]
    }

    pub fn reads_past(&self, j: usize) -> bool {
        self.reads_past[j]
    }

    pub fn kernel(&self, j: usize, context: u64, past: u64) -> Option<&[(usize, f64)]> {
        self.kernels[j].get(&(context, past)).map(Vec::as_slice)
    }

    /// All kernels of frame `j`.
    pub fn kernel_table(&self, j: usize) -> &KernelTable {
        &self.kernels[j]
    }

    /// Mixed-radix key of earlier output indices as used by frame `j`.
    pub fn past_key(&self, j: usize, path: &[usize]) -> u64 {
        if !self.reads_past[j] {
            return 0;
        }
        mixed_radix(path[..j].iter().copied().zip(self.outputs[..j].iter().map(Vec::len)))
    }

    /// Realizes the kernels as deterministic maps on an enlarged
    /// shared-randomness alphabet `K' = K × U_1 × … × U_T`.
    ///
    /// Each `U_j` is an auxiliary uniform variable on `[0, 1)` discretized at
    /// the union of the cumulative-probability breakpoints of every frame-`j`
    /// kernel; the output in a cell is the kernel's quantile at that cell.
    pub fn shared_randomness_realization(&self) -> SharedRandomnessRealization {
        let mut aux_probs = Vec::with_capacity(self.frames());
        let mut tables = Vec::with_capacity(self.frames());
        for table in &self.kernels {
            let mut cuts: Vec<f64> = vec![0.0, 1.0];
            for row in table.values() {
                let mut acc = 0.0;
                for (_, p) in row {
                    acc += p;
                    if acc > 0.0 && acc < 1.0 - 1e-15 {
                        cuts.push(acc);
                    }
                }
            }
            cuts.sort_by(f64::total_cmp);
            cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15);
            let widths: Vec<f64> = cuts.windows(2).map(|w| w[1] - w[0]).collect();
            let mids: Vec<f64> = cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            let mut det = HashMap::new();
            for (key, row) in table {
                let mut assign = Vec::with_capacity(mids.len());
                for &u in &mids {
                    let mut acc = 0.0;
                    let mut chosen = row.last().map_or(0, |(o, _)| *o);
                    for (o, p) in row {
                        acc += p;
                        if u < acc {
                            chosen = *o;
                            break;
                        }
                    }
                    assign.push(chosen);
                }
                det.insert(*key, assign);
            }
            aux_probs.push(widths);
            tables.push(det);
        }
        SharedRandomnessRealization { aux_probs, tables }
    }
}

/// Deterministic realization of a [`DiscreteReconstruction`] on an enlarged
/// shared-randomness alphabet.
#[derive(Debug, Clone)]
pub struct SharedRandomnessRealization {
    /// Cell probabilities of each auxiliary component `U_j`.
    pub aux_probs: Vec<Vec<f64>>,
    /// Frame `j`: `(context key, past-output key) → output index per U_j cell`.
    pub tables: Vec<HashMap<(u64, u64), Vec<usize>>>,
}

impl SharedRandomnessRealization {
    /// Exact joint law of the output index paths, enumerating every cell of
    /// the enlarged alphabet.
    pub fn output_paths(
        &self,
        joint: &JointLaw,
        recon: &DiscreteReconstruction,
    ) -> Result<HashMap<Vec<usize>, f64>, DiscreteError> {
        let t = recon.frames();
        let mut out: HashMap<Vec<usize>, f64> = HashMap::new();
        let sizes: Vec<usize> = self.aux_probs.iter().map(Vec::len).collect();
        let total: usize = sizes.iter().product();
        for c in 0..joint.len() {
            for flat in 0..total {
                let us = decode_radix(flat, &sizes);
                let mut w = joint.prob(c);
                let mut path = Vec::with_capacity(t);
                for j in 0..t {
                    w *= self.aux_probs[j][us[j]];
                    let key = (joint.context_key(c, j), recon.past_key(j, &path));
                    let row = self.tables[j].get(&key).ok_or(DiscreteError::MissingContext { frame: j })?;
                    path.push(row[us[j]]);
                }
                *out.entry(path).or_insert(0.0) += w;
            }
        }
        Ok(out)
    }
}

/// Visits every `(cell, output path over frames 0..upto, weight)` triple with
/// positive weight.
pub fn for_each_path(
    joint: &JointLaw,
    recon: &DiscreteReconstruction,
    upto: usize,
    mut visit: impl FnMut(usize, &[usize], f64),
) -> Result<(), DiscreteError> {
    let mut path = Vec::with_capacity(upto);
    for c in 0..joint.len() {
        descend(joint, recon, c, upto, joint.prob(c), &mut path, &mut visit)?;
    }
    Ok(())
}

fn descend(
    joint: &JointLaw,
    recon: &DiscreteReconstruction,
    c: usize,
    upto: usize,
    w: f64,
    path: &mut Vec<usize>,
    visit: &mut impl FnMut(usize, &[usize], f64),
) -> Result<(), DiscreteError> {
    let j = path.len();
    if j == upto {
        visit(c, path, w);
        return Ok(());
    }
    let key = (joint.context_key(c, j), recon.past_key(j, path));
    let row = recon.kernels[j].get(&key).ok_or(DiscreteError::MissingContext { frame: j })?;
    for &(o, p) in row {
        if p > 0.0 {
            path.push(o);
            descend(joint, recon, c, upto, w * p, path, visit)?;
            path.pop();
        }
    }
    Ok(())
}

/// Exact per-frame MSE and output-path law of a reconstruction.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mse: Vec<f64>,
    /// Joint law of the output index paths.
    pub output_paths: HashMap<Vec<usize>, f64>,
}

impl Evaluation {
    /// Joint law of the output values, keyed by index paths mapped through
    /// the output supports.
    pub fn value_paths(&self, recon: &DiscreteReconstruction) -> Vec<(Vec<f64>, f64)> {
        self.output_paths
            .iter()
            .map(|(path, p)| (path.iter().enumerate().map(|(j, o)| recon.outputs[j][*o]).collect(), *p))
            .collect()
    }

    /// Marginal law of frame `j`'s output.
    pub fn marginal(&self, recon: &DiscreteReconstruction, j: usize) -> Result<ScalarPmf, DiscreteError> {
        marginal_of(self.output_paths.iter().map(|(path, p)| (recon.outputs[j][path[j]], *p)))
    }
}

/// Evaluates a reconstruction against the joint law of a system.
pub fn evaluate(joint: &JointLaw, recon: &DiscreteReconstruction) -> Result<Evaluation, DiscreteError> {
    let t = joint.frames();
    if recon.frames() != t {
        return Err(DiscreteError::InvalidReconstruction("frame count differs from system".into()));
    }
    let mut mse = vec![0.0; t];
    let mut output_paths: HashMap<Vec<usize>, f64> = HashMap::new();
    for_each_path(joint, recon, t, |c, path, w| {
        for j in 0..t {
            let d = joint.x_value(c, j) - recon.outputs[j][path[j]];
            mse[j] += w * d * d;
        }
        *output_paths.entry(path.to_vec()).or_insert(0.0) += w;
    })?;
    Ok(Evaluation { mse, output_paths })
}

/// Conditional-mean reconstruction `X̃_j = E[X_j | M_1..M_j, K]` and its MSE.
#[derive(Debug, Clone)]
pub struct MmseReconstruction {
    pub reconstruction: DiscreteReconstruction,
    /// Per frame, context key → conditional mean.
    pub means: Vec<HashMap<u64, f64>>,
    pub distortion: Vec<f64>,
}

impl MmseReconstruction {
    /// `X̃_j` in cell `c`.
    pub fn value(&self, joint: &JointLaw, c: usize, j: usize) -> f64 {
        self.means[j][&joint.context_key(c, j)]
    }

    /// Law of `X̃_j`.
    pub fn marginal(&self, joint: &JointLaw, j: usize) -> Result<ScalarPmf, DiscreteError> {
        marginal_of((0..joint.len()).map(|c| (self.value(joint, c, j), joint.prob(c))))
    }
}

/// Computes the MMSE reconstruction of a joint law.
pub fn mmse_reconstruction(joint: &JointLaw) -> Result<MmseReconstruction, DiscreteError> {
    let t = joint.frames();
    let mut means = Vec::with_capacity(t);
    let mut distortion = Vec::with_capacity(t);
    for j in 0..t {
        let mut acc: HashMap<u64, (f64, f64)> = HashMap::new();
        for c in 0..joint.len() {
            let e = acc.entry(joint.context_key(c, j)).or_insert((0.0, 0.0));
            e.0 += joint.prob(c);
            e.1 += joint.prob(c) * joint.x_value(c, j);
        }
        let map: HashMap<u64, f64> = acc.into_iter().map(|(k, (p, s))| (k, s / p)).collect();
        let d: f64 = (0..joint.len())
            .map(|c| {
                let e = joint.x_value(c, j) - map[&joint.context_key(c, j)];
                joint.prob(c) * e * e
            })
            .sum();
        means.push(map);
        distortion.push(d);
    }
    let reconstruction = DiscreteReconstruction::deterministic(means.clone())?;
    Ok(MmseReconstruction { reconstruction, means, distortion })
}
