//! One-shot variable-length coding by channel simulation.
//!
//! The encoder and decoder share a stream of proposals `Y_i ~ P_Y` with
//! exponential arrival times `T_i`. The encoder sends the index
//! `K = argmin_i T_i / r_x(Y_i)`, where `r_x = dP_{Y|X=x}/dP_Y`, and the
//! decoder replays the stream up to `K`. The selected output then has law
//! `P_{Y|X=x}` exactly. Because `r_x ≤ r_max(x)`, every proposal after the
//! first arrival exceeding `min × r_max` scores worse than the current
//! minimum, so the race stops there.
//!
//! Streams are ChaCha20 keyed by `(seed, domain, frame, context)` with the
//! trial number as the stream id, so encoder, decoder and parallel workers
//! regenerate identical randomness without exchanging state.

use crate::discrete_core::DiscreteMarkovSource;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use thiserror::Error;

/// Tolerance on probability row sums.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Smallest trial count accepted by the length estimators.
pub const MIN_TRIALS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OneShotError {
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("output {output} has conditional mass but zero reference mass")]
    UnboundedRatio { output: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("decoder disagreed with encoder at frame {frame}, trial {trial}")]
    RoundTrip { frame: usize, trial: u64 },
}

fn check_pmf(p: &[f64], what: &str) -> Result<(), OneShotError> {
    if p.is_empty() {
        return Err(OneShotError::InvalidChannel(format!("{what} is empty")));
    }
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(OneShotError::InvalidChannel(format!("{what} has entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > ROW_SUM_TOL {
        return Err(OneShotError::InvalidChannel(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// `Σ p log₂(p/q)` over the support of `p`.
fn kl_bits(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).log2()).sum()
}

/// Finite-alphabet channel with its input law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteChannel {
    input: Vec<f64>,
    rows: Vec<Vec<f64>>,
    output: Vec<f64>,
    mutual_information: f64,
}

impl DiscreteChannel {
    pub fn new(input: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self, OneShotError> {
        check_pmf(&input, "input law")?;
        if rows.len() != input.len() {
            return Err(OneShotError::InvalidChannel(format!("{} inputs but {} rows", input.len(), rows.len())));
        }
        let width = rows[0].len();
        for (x, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(OneShotError::InvalidChannel(format!("row {x} has {} entries, expected {width}", row.len())));
            }
            check_pmf(row, &format!("row {x}"))?;
        }
        let output: Vec<f64> =
            (0..width).map(|y| input.iter().zip(&rows).map(|(p, row)| p * row[y]).sum()).collect();
        let mutual_information =
            input.iter().zip(&rows).map(|(p, row)| if *p > 0.0 { p * kl_bits(row, &output) } else { 0.0 }).sum::<f64>();
        Ok(Self { input, rows, output, mutual_information: mutual_information.max(0.0) })
    }

    /// Output independent of the input.
    pub fn useless(input: Vec<f64>, output: Vec<f64>) -> Result<Self, OneShotError> {
        let rows = vec![output; input.len()];
        Self::new(input, rows)
    }

    /// Binary symmetric channel with a uniform input.
    pub fn binary_symmetric(flip: f64) -> Result<Self, OneShotError> {
        if !(0.0..=1.0).contains(&flip) {
            return Err(OneShotError::InvalidChannel(format!("flip probability {flip} outside [0, 1]")));
        }
        Self::new(vec![0.5, 0.5], vec![vec![1.0 - flip, flip], vec![flip, 1.0 - flip]])
    }

    /// Random channel with up to `max_inputs` inputs and `max_outputs`
    /// outputs; row entries are drawn from a Dirichlet-like law with
    /// concentration set by `sharpness`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        max_inputs: usize,
        max_outputs: usize,
        sharpness: f64,
    ) -> Result<Self, OneShotError> {
        let nx = rng.random_range(2..=max_inputs.max(2));
        let ny = rng.random_range(2..=max_outputs.max(2));
        let mut draw = |n: usize, power: f64| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1.0f64).powf(power)).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        let input = draw(nx, 1.0);
        let rows = (0..nx).map(|_| draw(ny, sharpness)).collect();
        Self::new(input, rows)
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.rows[x]
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn input_size(&self) -> usize {
        self.input.len()
    }

    pub fn output_size(&self) -> usize {
        self.output.len()
    }

    /// `I(X; Y)` in bits.
    pub fn mutual_information(&self) -> f64 {
        self.mutual_information
    }
}

/// Samples an index from `p` by inversion, never returning a zero-mass
/// entry.
fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > 0.0 {
            acc += v;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Shared-randomness stream for one `(frame, context)` codebook in one trial.
pub fn shared_stream(seed: u64, domain: u64, frame: u64, context: u64, trial: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, domain, frame, context]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(trial);
    rng
}

/// Stream domain of the proposal codebooks.
pub const CODEBOOK_DOMAIN: u64 = 0x636f_6465_626f_6f6b;
/// Stream domain of the simulated source inputs.
pub const INPUT_DOMAIN: u64 = 0x696e_7075_7473_0000;
/// Stream domain of the independent trials used to fit a Huffman code.
pub const TRAINING_DOMAIN: u64 = 0x7472_6169_6e00_0000;

/// Result of one race.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PfrSelection {
    /// One-based index of the selected proposal.
    pub index: u64,
    pub symbol: usize,
    /// Number of arrivals drawn before the stopping rule fired.
    pub arrivals: u64,
}

/// Likelihood-ratio bound `max_y target(y)/reference(y)`.
fn ratio_bound(reference: &[f64], target: &[f64]) -> Result<f64, OneShotError> {
    if reference.len() != target.len() {
        return Err(OneShotError::InvalidArgument("reference and target lengths differ".into()));
    }
    let mut r_max = 0.0f64;
    for (y, (q, p)) in reference.iter().zip(target).enumerate() {
        if *p > 0.0 {
            if *q <= 0.0 {
                return Err(OneShotError::UnboundedRatio { output: y });
            }
            r_max = r_max.max(p / q);
        }
    }
    if r_max <= 0.0 {
        return Err(OneShotError::InvalidArgument("target law has no mass".into()));
    }
    Ok(r_max)
}

/// Runs the race selecting an output with law `target` from proposals drawn
/// from `reference`.
pub fn pfr_select<R: Rng + ?Sized>(reference: &[f64], target: &[f64], rng: &mut R) -> Result<PfrSelection, OneShotError> {
    let r_max = ratio_bound(reference, target)?;
    let mut arrival = 0.0f64;
    let mut best = f64::INFINITY;
    let mut chosen = PfrSelection { index: 0, symbol: 0, arrivals: 0 };
    let mut i = 0u64;
    loop {
        i += 1;
        arrival += rng.sample::<f64, _>(Exp1);
        if arrival > best * r_max {
            chosen.arrivals = i;
            return Ok(chosen);
        }
        let y = sample_index(reference, rng);
        let r = target[y] / reference[y];
        if r > 0.0 {
            let score = arrival / r;
            if score < best {
                best = score;
                chosen.index = i;
                chosen.symbol = y;
            }
        }
    }
}

/// Replays the shared stream to recover the output at `index`.
pub fn pfr_decode<R: Rng + ?Sized>(reference: &[f64], index: u64, rng: &mut R) -> Result<usize, OneShotError> {
    if index == 0 {
        return Err(OneShotError::InvalidArgument("indices start at one".into()));
    }
    let mut y = 0;
    for _ in 0..index {
        let _: f64 = rng.sample(Exp1);
        y = sample_index(reference, rng);
    }
    Ok(y)
}

/// Huffman code over indices `1..=n` plus an escape symbol followed by the
/// Elias-gamma code of the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HuffmanCode {
    /// Codeword lengths of indices `1..=lengths.len()`.
    lengths: Vec<u32>,
    escape_length: u32,
    /// Canonical codewords, index 0 holding the escape symbol.
    words: Vec<u64>,
}

impl HuffmanCode {
    /// Fits a code to observed index counts; `counts[k − 1]` counts index
    /// `k`. The escape symbol gets weight one.
    pub fn fit(counts: &[u64]) -> Self {
        let n = counts.len() + 1;
        let weights: Vec<u64> = std::iter::once(1).chain(counts.iter().copied()).collect();
        let mut lengths = vec![0u32; n];
        if n == 1 {
            lengths[0] = 1;
        } else {
            // Nodes 0..n are leaves; internal nodes are appended.
            let mut parent: Vec<usize> = vec![usize::MAX; n];
            let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
                weights.iter().enumerate().map(|(i, w)| Reverse((*w, i))).collect();
            while heap.len() > 1 {
                let Reverse((wa, a)) = heap.pop().expect("two nodes");
                let Reverse((wb, b)) = heap.pop().expect("two nodes");
                let id = parent.len();
                parent.push(usize::MAX);
                parent[a] = id;
                parent[b] = id;
                heap.push(Reverse((wa + wb, id)));
            }
            for (leaf, len) in lengths.iter_mut().enumerate() {
                let mut d = 0;
                let mut v = leaf;
                while parent[v] != usize::MAX {
                    v = parent[v];
                    d += 1;
                }
                *len = d;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&s| (lengths[s], s));
        let mut words = vec![0u64; n];
        let mut code = 0u64;
        let mut prev_len = lengths[order[0]];
        for (pos, &s) in order.iter().enumerate() {
            if pos > 0 {
                code = (code + 1) << (lengths[s] - prev_len);
            }
            prev_len = lengths[s];
            words[s] = code;
        }
        Self { escape_length: lengths[0], lengths: lengths[1..].to_vec(), words }
    }

    fn symbol_length(&self, k: u64) -> u32 {
        match usize::try_from(k).ok().filter(|k| *k >= 1 && *k <= self.lengths.len()) {
            Some(k) => self.lengths[k - 1],
            None => self.escape_length + elias_gamma_length(k),
        }
    }

    /// Kraft sum of the explicit symbols and the escape symbol.
    pub fn kraft_sum(&self) -> f64 {
        self.lengths.iter().chain(std::iter::once(&self.escape_length)).map(|l| 0.5f64.powi(*l as i32)).sum()
    }
}

/// `2⌊log₂ k⌋ + 1`.
pub fn elias_gamma_length(k: u64) -> u32 {
    2 * (63 - k.leading_zeros()) + 1
}

fn push_bits(out: &mut Vec<bool>, word: u64, len: u32) {
    for b in (0..len).rev() {
        out.push((word >> b) & 1 == 1);
    }
}

/// Elias-gamma codeword of `k ≥ 1`.
pub fn elias_gamma_encode(k: u64) -> Vec<bool> {
    assert!(k >= 1, "Elias-gamma codes positive integers");
    let n = 63 - k.leading_zeros();
    let mut out = vec![false; n as usize];
    push_bits(&mut out, k, n + 1);
    out
}

/// Decodes one Elias-gamma codeword, returning the value and bits consumed.
pub fn elias_gamma_decode(bits: &[bool]) -> Option<(u64, usize)> {
    let zeros = bits.iter().take_while(|b| !**b).count();
    if zeros > 63 || bits.len() < 2 * zeros + 1 {
        return None;
    }
    let value = bits[zeros..=2 * zeros].iter().fold(0u64, |acc, b| (acc << 1) | u64::from(*b));
    Some((value, 2 * zeros + 1))
}

/// Prefix code applied to selected indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PrefixCode {
    EliasGamma,
    Huffman(HuffmanCode),
}

impl PrefixCode {
    pub fn name(&self) -> &'static str {
        match self {
            PrefixCode::EliasGamma => "elias_gamma",
            PrefixCode::Huffman(_) => "huffman",
        }
    }

    pub fn length(&self, k: u64) -> u32 {
        match self {
            PrefixCode::EliasGamma => elias_gamma_length(k),
            PrefixCode::Huffman(h) => h.symbol_length(k),
        }
    }

    pub fn encode(&self, k: u64) -> Vec<bool> {
        match self {
            PrefixCode::EliasGamma => elias_gamma_encode(k),
            PrefixCode::Huffman(h) => {
                let mut out = Vec::new();
                match usize::try_from(k).ok().filter(|k| *k >= 1 && *k <= h.lengths.len()) {
                    Some(s) => push_bits(&mut out, h.words[s], h.lengths[s - 1]),
                    None => {
                        push_bits(&mut out, h.words[0], h.escape_length);
                        out.extend(elias_gamma_encode(k));
                    }
                }
                out
            }
        }
    }

    /// Decodes one codeword from the front of `bits`.
    pub fn decode(&self, bits: &[bool]) -> Option<(u64, usize)> {
        match self {
            PrefixCode::EliasGamma => elias_gamma_decode(bits),
            PrefixCode::Huffman(h) => {
                let mut word = 0u64;
                for (used, b) in bits.iter().enumerate() {
                    word = (word << 1) | u64::from(*b);
                    let len = used as u32 + 1;
                    if h.escape_length == len && h.words[0] == word {
                        let (k, n) = elias_gamma_decode(&bits[used + 1..])?;
                        return Some((k, used + 1 + n));
                    }
                    for (s, l) in h.lengths.iter().enumerate() {
                        if *l == len && h.words[s + 1] == word {
                            return Some((s as u64 + 1, used + 1));
                        }
                    }
                    if len > 64 {
                        return None;
                    }
                }
                None
            }
        }
    }

    /// Kraft sum over indices `1..=max_index`; the full code is complete.
    pub fn kraft_sum(&self, max_index: u64) -> f64 {
        match self {
            PrefixCode::EliasGamma => (1..=max_index).map(|k| 0.5f64.powi(elias_gamma_length(k) as i32)).sum(),
            PrefixCode::Huffman(h) => h.kraft_sum(),
        }
    }
}

/// Shared randomness and index code used by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PfrCodebook {
    pub seed: u64,
    pub code: PrefixCode,
}

impl PfrCodebook {
    pub fn new(seed: u64, code: PrefixCode) -> Self {
        Self { seed, code }
    }

    /// Proposal stream of `(frame, context)` in `trial`.
    pub fn stream(&self, frame: u64, context: u64, trial: u64) -> ChaCha20Rng {
        shared_stream(self.seed, CODEBOOK_DOMAIN, frame, context, trial)
    }
}

/// Empirical code-length summary for one channel or frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub mutual_information: f64,
    pub mean_length: f64,
    pub standard_error: f64,
    /// `I + log₂(I + 1) + 5`.
    pub bound: f64,
    pub n_trials: usize,
    pub seed: u64,
    pub code: String,
    pub max_index: u64,
}

impl LengthReport {
    /// Mean length within three standard errors of the bound.
    pub fn within_bound(&self) -> bool {
        self.mean_length <= self.bound + 3.0 * self.standard_error
    }
}

/// `I + log₂(I + 1) + 5`.
pub fn length_bound(mutual_information: f64) -> f64 {
    mutual_information + (mutual_information + 1.0).log2() + 5.0
}

/// Selected indices of `n_trials` independent single-channel races, inputs
/// drawn from the channel's input law.
fn channel_indices(channel: &DiscreteChannel, n_trials: usize, seed: u64, domain: u64) -> Result<Vec<(usize, PfrSelection)>, OneShotError> {
    (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut input_rng = shared_stream(seed, INPUT_DOMAIN ^ domain, 0, 0, trial);
            let x = sample_index(channel.input(), &mut input_rng);
            let mut rng = shared_stream(seed, domain, 0, 0, trial);
            Ok((x, pfr_select(channel.output(), channel.row(x), &mut rng)?))
        })
        .collect()
}

fn summarize(lengths: impl Iterator<Item = u32>, n: usize) -> (f64, f64) {
    let (mut s, mut s2) = (0u128, 0u128);
    for l in lengths {
        s += u128::from(l);
        s2 += u128::from(l) * u128::from(l);
    }
    let nf = n as f64;
    let mean = s as f64 / nf;
    let var = (s2 as f64 / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    (mean, (var / nf).sqrt())
}

fn index_counts(indices: impl Iterator<Item = u64>) -> Vec<u64> {
    let mut counts: Vec<u64> = Vec::new();
    for k in indices {
        let k = k as usize;
        if counts.len() < k {
            counts.resize(k, 0);
        }
        counts[k - 1] += 1;
    }
    counts
}

/// Mean codeword length of the selected index over `n_trials` races.
pub fn encode_length(channel: &DiscreteChannel, n_trials: usize, codebook: &PfrCodebook) -> Result<LengthReport, OneShotError> {
    check_trials(n_trials)?;
    let picks = channel_indices(channel, n_trials, codebook.seed, CODEBOOK_DOMAIN)?;
    Ok(length_report(channel, &picks, codebook))
}

fn check_trials(n_trials: usize) -> Result<(), OneShotError> {
    if n_trials < MIN_TRIALS {
        return Err(OneShotError::InvalidArgument(format!("at least {MIN_TRIALS} trials are required")));
    }
    Ok(())
}

fn length_report(channel: &DiscreteChannel, picks: &[(usize, PfrSelection)], codebook: &PfrCodebook) -> LengthReport {
    let n_trials = picks.len();
    let (mean_length, standard_error) = summarize(picks.iter().map(|(_, s)| codebook.code.length(s.index)), n_trials);
    let i = channel.mutual_information();
    LengthReport {
        mutual_information: i,
        mean_length,
        standard_error,
        bound: length_bound(i),
        n_trials,
        seed: codebook.seed,
        code: codebook.code.name().to_string(),
        max_index: picks.iter().map(|(_, s)| s.index).max().unwrap_or(0),
    }
}

/// Code-length report and `(input, output)` counts of one batch of races.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRun {
    pub report: LengthReport,
    /// `counts[x][y]` is the number of trials with input `x` and output `y`.
    pub counts: Vec<Vec<u64>>,
}

/// Runs `n_trials` races once and reports both the code length, chosen as in
/// [`encode_length_auto`], and the joint input/output counts.
pub fn simulate_channel(channel: &DiscreteChannel, n_trials: usize, seed: u64) -> Result<ChannelRun, OneShotError> {
    check_trials(n_trials)?;
    let picks = channel_indices(channel, n_trials, seed, CODEBOOK_DOMAIN)?;
    let mut report = length_report(channel, &picks, &PfrCodebook::new(seed, PrefixCode::EliasGamma));
    if !report.within_bound() {
        let training = channel_indices(channel, n_trials, seed, TRAINING_DOMAIN)?;
        let code = PrefixCode::Huffman(HuffmanCode::fit(&index_counts(training.iter().map(|(_, s)| s.index))));
        report = length_report(channel, &picks, &PfrCodebook::new(seed, code));
    }
    let mut counts = vec![vec![0u64; channel.output_size()]; channel.input_size()];
    for (x, s) in &picks {
        counts[*x][s.symbol] += 1;
    }
    Ok(ChannelRun { report, counts })
}

/// Elias-gamma first; if the mean exceeds the bound by more than three
/// standard errors, a Huffman code fitted on independent training races is
/// used instead.
pub fn encode_length_auto(channel: &DiscreteChannel, n_trials: usize, seed: u64) -> Result<LengthReport, OneShotError> {
    Ok(simulate_channel(channel, n_trials, seed)?.report)
}

/// Output counts of `n_trials` races for one fixed input law `target`.
pub fn selection_histogram(reference: &[f64], target: &[f64], n_trials: usize, seed: u64) -> Result<Vec<u64>, OneShotError> {
    let picks: Result<Vec<usize>, OneShotError> = (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| Ok(pfr_select(reference, target, &mut shared_stream(seed, CODEBOOK_DOMAIN, 0, 0, trial))?.symbol))
        .collect();
    let mut counts = vec![0u64; reference.len()];
    for y in picks? {
        counts[y] += 1;
    }
    Ok(counts)
}

/// Pearson goodness-of-fit test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

/// Cells whose expected count falls below this are pooled into one cell.
pub const MIN_EXPECTED_COUNT: f64 = 5.0;

/// Pearson test of `counts` against `probs`. Cells with expected count below
/// [`MIN_EXPECTED_COUNT`] are pooled; if the pooled cell is still below it,
/// it joins the regular cell with the smallest expectation. Observations in
/// zero-probability cells give a p-value of zero.
pub fn chi_square_test(counts: &[u64], probs: &[f64]) -> ChiSquareTest {
    let nf = counts.iter().sum::<u64>() as f64;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    let mut impossible = false;
    for (c, p) in counts.iter().zip(probs) {
        let e = nf * p;
        if *p <= 0.0 {
            impossible |= *c > 0;
        } else if e < MIN_EXPECTED_COUNT {
            pooled_obs += *c as f64;
            pooled_exp += e;
        } else {
            cells.push((*c as f64, e));
        }
    }
    if pooled_exp > 0.0 {
        if pooled_exp >= MIN_EXPECTED_COUNT || cells.is_empty() {
            cells.push((pooled_obs, pooled_exp));
        } else {
            let smallest = cells.iter_mut().min_by(|a, b| a.1.total_cmp(&b.1)).expect("nonempty");
            smallest.0 += pooled_obs;
            smallest.1 += pooled_exp;
        }
    }
    let statistic: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let degrees_of_freedom = cells.len().saturating_sub(1);
    let p_value = if impossible {
        0.0
    } else if degrees_of_freedom == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(degrees_of_freedom as f64).expect("positive degrees of freedom");
        1.0 - dist.cdf(statistic)
    };
    ChiSquareTest { statistic, degrees_of_freedom, p_value }
}

/// Per-frame channels `P(X_r,j | X_j, X_r,<j)` of a causal representation.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalChannels {
    out_sizes: Vec<usize>,
    /// `tables[j][past_key][x]` is the output row.
    tables: Vec<Vec<Vec<Vec<f64>>>>,
}

fn past_key(past: &[usize], sizes: &[usize]) -> u64 {
    past.iter().zip(sizes).fold(0u64, |acc, (r, n)| acc * *n as u64 + *r as u64)
}

fn unpack_key(mut key: u64, sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for (slot, n) in out.iter_mut().zip(sizes).rev() {
        *slot = (key % *n as u64) as usize;
        key /= *n as u64;
    }
    out
}

impl CausalChannels {
    /// `f(j, x, past)` returns the output row of frame `j`.
    pub fn from_fn(
        source: &DiscreteMarkovSource,
        out_sizes: Vec<usize>,
        mut f: impl FnMut(usize, usize, &[usize]) -> Vec<f64>,
    ) -> Result<Self, OneShotError> {
        if out_sizes.len() != source.frames() || out_sizes.contains(&0) {
            return Err(OneShotError::InvalidArgument("one positive output size per frame is required".into()));
        }
        let mut tables = Vec::with_capacity(out_sizes.len());
        for j in 0..out_sizes.len() {
            let contexts: u64 = out_sizes[..j].iter().map(|n| *n as u64).product();
            let mut frame = Vec::with_capacity(contexts as usize);
            for key in 0..contexts {
                let past = unpack_key(key, &out_sizes[..j]);
                let mut rows = Vec::with_capacity(source.alphabet_size(j));
                for x in 0..source.alphabet_size(j) {
                    let row = f(j, x, &past);
                    if row.len() != out_sizes[j] {
                        return Err(OneShotError::InvalidChannel(format!("frame {j} row has {} entries", row.len())));
                    }
                    check_pmf(&row, &format!("frame {j} row"))?;
                    rows.push(row);
                }
                frame.push(rows);
            }
            tables.push(frame);
        }
        Ok(Self { out_sizes, tables })
    }

    pub fn frames(&self) -> usize {
        self.out_sizes.len()
    }

    pub fn out_sizes(&self) -> &[usize] {
        &self.out_sizes
    }

    pub fn row(&self, j: usize, x: usize, past: &[usize]) -> &[f64] {
        &self.tables[j][past_key(past, &self.out_sizes[..j]) as usize][x]
    }
}

/// Exact per-frame laws of the chained representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainLaw {
    /// `frame_joint[j][past_key][x] = P(X_j = x, X_r,<j = past)`.
    pub frame_joint: Vec<Vec<Vec<f64>>>,
    /// `I(X_j; X_r,j | X_r,<j)` in bits.
    pub conditional_mi: Vec<f64>,
}

impl ChainLaw {
    /// `P(X_r,j = · | X_r,<j = past)`, or `None` for a zero-probability past.
    pub fn reference(&self, channels: &CausalChannels, j: usize, key: u64) -> Option<Vec<f64>> {
        let joint = &self.frame_joint[j][key as usize];
        let mass: f64 = joint.iter().sum();
        if mass <= 0.0 {
            return None;
        }
        let past = unpack_key(key, &channels.out_sizes[..j]);
        let mut q = vec![0.0; channels.out_sizes[j]];
        for (x, p) in joint.iter().enumerate() {
            for (y, r) in channels.row(j, x, &past).iter().enumerate() {
                q[y] += p * r / mass;
            }
        }
        Some(q)
    }
}

/// Propagates `P(X_j, X_r,<j)` through the source and channels.
pub fn chain_law(source: &DiscreteMarkovSource, channels: &CausalChannels) -> Result<ChainLaw, OneShotError> {
    if channels.frames() != source.frames() {
        return Err(OneShotError::InvalidArgument("channel and source frame counts differ".into()));
    }
    let t = source.frames();
    let mut frame_joint: Vec<Vec<Vec<f64>>> = Vec::with_capacity(t);
    frame_joint.push(vec![source.initial().to_vec()]);
    for j in 0..t - 1 {
        let sizes = &channels.out_sizes[..=j];
        let contexts: u64 = sizes.iter().map(|n| *n as u64).product();
        let mut next = vec![vec![0.0; source.alphabet_size(j + 1)]; contexts as usize];
        let ny = channels.out_sizes[j] as u64;
        for (key, joint) in frame_joint[j].iter().enumerate() {
            let past = unpack_key(key as u64, &channels.out_sizes[..j]);
            for (x, p) in joint.iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                for (y, r) in channels.row(j, x, &past).iter().enumerate() {
                    let slot = &mut next[(key as u64 * ny + y as u64) as usize];
                    for (x2, q) in source.transition_row(j, x).iter().enumerate() {
                        slot[x2] += p * r * q;
                    }
                }
            }
        }
        frame_joint.push(next);
    }
    let mut law = ChainLaw { frame_joint, conditional_mi: Vec::with_capacity(t) };
    for j in 0..t {
        let mut mi = 0.0;
        for key in 0..law.frame_joint[j].len() as u64 {
            let Some(q) = law.reference(channels, j, key) else { continue };
            let past = unpack_key(key, &channels.out_sizes[..j]);
            for (x, p) in law.frame_joint[j][key as usize].iter().enumerate() {
                if *p > 0.0 {
                    mi += p * kl_bits(channels.row(j, x, &past), &q);
                }
            }
        }
        law.conditional_mi.push(mi.max(0.0));
    }
    Ok(law)
}

/// Per-frame results of the chained one-shot code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub frames: Vec<LengthReport>,
    /// Representation sequences recovered by the decoder, one per trial.
    pub decoded: Vec<Vec<usize>>,
    /// `P(X_j = ·, X_r,≤j = ·)` estimated from the decoded sequences,
    /// keyed by `(frame, x, representation key)`.
    #[serde(skip)]
    pub empirical: HashMap<(usize, usize, u64), u64>,
}

/// Encodes `n_trials` source paths frame by frame. Frame `j` races with
/// proposals from `P(X_r,j | X_r,<j)` in the codebook of context `X_r,<j`;
/// the decoder replays the same stream and the round trip is checked
/// exactly.
pub fn causal_chain_encode(
    source: &DiscreteMarkovSource,
    channels: &CausalChannels,
    n_trials: usize,
    codebook: &PfrCodebook,
) -> Result<ChainReport, OneShotError> {
    if n_trials < 2 {
        return Err(OneShotError::InvalidArgument("at least two trials are required".into()));
    }
    let law = chain_law(source, channels)?;
    let t = source.frames();
    type Trial = (Vec<usize>, Vec<usize>, Vec<u64>);
    let trials: Result<Vec<Trial>, OneShotError> = (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut input_rng = shared_stream(codebook.seed, INPUT_DOMAIN, 0, 0, trial);
            let mut xs = Vec::with_capacity(t);
            let mut reps = Vec::with_capacity(t);
            let mut indices = Vec::with_capacity(t);
            for j in 0..t {
                let x = if j == 0 {
                    sample_index(source.initial(), &mut input_rng)
                } else {
                    sample_index(source.transition_row(j - 1, xs[j - 1]), &mut input_rng)
                };
                xs.push(x);
                let key = past_key(&reps, &channels.out_sizes[..j]);
                let q = law.reference(channels, j, key).ok_or(OneShotError::InvalidArgument(format!(
                    "frame {j} reached a zero-probability context"
                )))?;
                let pick = pfr_select(&q, channels.row(j, x, &reps), &mut codebook.stream(j as u64, key, trial))?;
                let decoded = pfr_decode(&q, pick.index, &mut codebook.stream(j as u64, key, trial))?;
                if decoded != pick.symbol {
                    return Err(OneShotError::RoundTrip { frame: j, trial });
                }
                reps.push(decoded);
                indices.push(pick.index);
            }
            Ok((xs, reps, indices))
        })
        .collect();
    let trials = trials?;
    let mut frames = Vec::with_capacity(t);
    for j in 0..t {
        let (mean_length, standard_error) =
            summarize(trials.iter().map(|(_, _, idx)| codebook.code.length(idx[j])), n_trials);
        let i = law.conditional_mi[j];
        frames.push(LengthReport {
            mutual_information: i,
            mean_length,
            standard_error,
            bound: length_bound(i),
            n_trials,
            seed: codebook.seed,
            code: codebook.code.name().to_string(),
            max_index: trials.iter().map(|(_, _, idx)| idx[j]).max().unwrap_or(0),
        });
    }
    let mut empirical = HashMap::new();
    for (xs, reps, _) in &trials {
        for j in 0..t {
            *empirical.entry((j, xs[j], past_key(&reps[..=j], &channels.out_sizes[..=j]))).or_insert(0) += 1;
        }
    }
    Ok(ChainReport { frames, decoded: trials.into_iter().map(|(_, r, _)| r).collect(), empirical })
}

/// Plug-in `I(X_j; X_r,j | X_r,<j)` from the empirical counts of a chain run.
pub fn empirical_conditional_mi(report: &ChainReport, channels: &CausalChannels, j: usize) -> f64 {
    let ny = channels.out_sizes[j] as u64;
    let mut joint: HashMap<(u64, usize, u64), f64> = HashMap::new();
    let mut total = 0.0;
    for ((frame, x, key), c) in &report.empirical {
        if *frame == j {
            joint.insert((key / ny, *x, key % ny), *c as f64);
            total += *c as f64;
        }
    }
    let mut p_past: HashMap<u64, f64> = HashMap::new();
    let mut p_past_x: HashMap<(u64, usize), f64> = HashMap::new();
    let mut p_past_y: HashMap<(u64, u64), f64> = HashMap::new();
    for ((past, x, y), c) in &joint {
        *p_past.entry(*past).or_insert(0.0) += c;
        *p_past_x.entry((*past, *x)).or_insert(0.0) += c;
        *p_past_y.entry((*past, *y)).or_insert(0.0) += c;
    }
    joint
        .iter()
        .map(|((past, x, y), c)| c / total * (c * p_past[past] / (p_past_x[&(*past, *x)] * p_past_y[&(*past, *y)])).log2())
        .sum::<f64>()
        .max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_channel_returns_its_input() {
        let ch = DiscreteChannel::new(vec![0.3, 0.7], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        for trial in 0..200 {
            for x in 0..2 {
                let pick = pfr_select(ch.output(), ch.row(x), &mut shared_stream(1, 2, 3, 4, trial)).unwrap();
                assert_eq!(pick.symbol, x);
            }
        }
    }

    #[test]
    fn useless_channel_selects_the_first_proposal() {
        let ch = DiscreteChannel::useless(vec![0.5, 0.5], vec![0.2, 0.8]).unwrap();
        assert!(ch.mutual_information().abs() < 1e-15);
        for trial in 0..100 {
            let pick = pfr_select(ch.output(), ch.row(0), &mut shared_stream(9, 0, 0, 0, trial)).unwrap();
            assert_eq!(pick.index, 1);
        }
    }

    #[test]
    fn bsc_mutual_information() {
        let ch = DiscreteChannel::binary_symmetric(0.2).unwrap();
        let h = -(0.2f64 * 0.2f64.log2() + 0.8 * 0.8f64.log2());
        assert!((ch.mutual_information() - (1.0 - h)).abs() < 1e-12);
    }

    #[test]
    fn gamma_round_trip() {
        for k in [1u64, 2, 3, 4, 7, 8, 1000, u64::MAX] {
            let bits = elias_gamma_encode(k);
            assert_eq!(bits.len() as u32, elias_gamma_length(k));
            assert_eq!(elias_gamma_decode(&bits), Some((k, bits.len())));
        }
    }

    #[test]
    fn huffman_round_trip_and_kraft() {
        let h = HuffmanCode::fit(&[50, 20, 10, 5, 0, 1]);
        assert!((h.kraft_sum() - 1.0).abs() < 1e-12);
        let code = PrefixCode::Huffman(h);
        for k in 1..20u64 {
            let bits = code.encode(k);
            assert_eq!(bits.len() as u32, code.length(k));
            assert_eq!(code.decode(&bits), Some((k, bits.len())));
        }
    }

    #[test]
    fn unbounded_ratio_is_rejected() {
        let err = pfr_select(&[1.0, 0.0], &[0.5, 0.5], &mut shared_stream(0, 0, 0, 0, 0)).unwrap_err();
        assert_eq!(err, OneShotError::UnboundedRatio { output: 1 });
    }

    #[test]
    fn rows_must_sum_to_one() {
        assert!(DiscreteChannel::new(vec![1.0], vec![vec![0.5, 0.4]]).is_err());
    }
}
