//! Command-line front end.
//!
//! Every subcommand reads an optional flat `key = value` config file, lets
//! flags override individual keys, resolves defaults, and writes CSV or JSON
//! whose header carries the crate version, the SHA-256 of the resolved
//! config and the seed. Exit status is 0 on success, 1 when a verification
//! fails (a JSON failure report goes to stderr) and 2 on configuration
//! errors.

use crate::discrete_core::{evaluate, DiscreteError, DiscreteMarkovSource};
use crate::extremal::{
    mmse_recursion, solver_distortions, table1_law, theorem5_deltas, ExtremalRegime, RatePattern, Scheme,
};
use crate::gauss_solver::{curve_rows, dp_sweep, solve_point, solve_sequential, SolverConfig, SolverStatus};
use crate::model::{GaussMarkovSource, LinearReconstructionLaw, PerceptionTuple, PlfKind, RateTuple};
use crate::montecarlo::{analytic_values, simulate, SE_MULTIPLIER};
use crate::oneshot::{causal_chain_encode, encode_length_auto, CausalChannels, DiscreteChannel, PfrCodebook, PrefixCode};
use crate::realism::{counterexample_system, fmd_construct_of, jd_construct_of, joint_law_deviation, random_system, SystemAnalysis};
use crate::universal::verify_batch;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

/// Crate version written into every output header.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "causal-rdp", version, about = "Rate-distortion-perception tradeoffs for causal frame coding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Gaussian tradeoff curves and extremal-rate tables.
    Rdp {
        #[command(subcommand)]
        command: RdpCommand,
    },
    /// Checks of the discrete and Gaussian constructions.
    Verify {
        #[command(subcommand)]
        command: VerifyCommand,
    },
    /// One-shot channel-simulation codes.
    Oneshot {
        #[command(subcommand)]
        command: OneshotCommand,
    },
    /// Monte-Carlo cross-checks.
    Mc {
        #[command(subcommand)]
        command: McCommand,
    },
    /// Runs a reduced version of every check.
    Selftest(Options),
}

#[derive(Subcommand, Debug)]
pub enum RdpCommand {
    /// Distortion-perception curve at fixed rates.
    Curve(Options),
    /// Closed-form extremal-rate distortions next to the solver's.
    Extremal(Options),
}

#[derive(Subcommand, Debug)]
pub enum VerifyCommand {
    /// Marginal realism costs at most twice the MMSE on random systems.
    Factor2(Options),
    /// Joint realism can cost distortion where the MMSE is zero.
    JdCounterexample(Options),
    /// One MMSE representation reaches every frontier point.
    Universal(Options),
}

#[derive(Subcommand, Debug)]
pub enum OneshotCommand {
    /// Empirical code lengths of the channel-simulation code.
    Simulate(Options),
}

#[derive(Subcommand, Debug)]
pub enum McCommand {
    /// Empirical distortion and perception against the analytic values.
    Check(Options),
}

/// Flags shared by all subcommands. Each subcommand accepts only the keys it
/// uses; the rest are rejected as configuration errors.
#[derive(Args, Debug, Default, Clone)]
pub struct Options {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path; standard output when absent or `-`.
    #[arg(long, allow_hyphen_values = true)]
    pub out: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub sigma: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<String>,
    #[arg(long)]
    pub frames: Option<String>,
    #[arg(long)]
    pub rates: Option<String>,
    #[arg(long)]
    pub plf: Option<String>,
    #[arg(long)]
    pub p_grid: Option<String>,
    #[arg(long)]
    pub p: Option<String>,
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub iterations: Option<String>,
    #[arg(long)]
    pub tolerance: Option<String>,
    #[arg(long)]
    pub feasibility_tolerance: Option<String>,
    #[arg(long)]
    pub restrict_sign: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub systems: Option<String>,
    #[arg(long)]
    pub max_alphabet: Option<String>,
    #[arg(long)]
    pub max_messages: Option<String>,
    #[arg(long)]
    pub k_size: Option<String>,
    #[arg(long)]
    pub flip: Option<String>,
    #[arg(long)]
    pub channel: Option<String>,
    #[arg(long)]
    pub trials: Option<String>,
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub law: Option<String>,
}

impl Options {
    fn pairs(&self) -> Vec<(&'static str, Option<&String>)> {
        vec![
            ("out", self.out.as_ref()),
            ("sigma", self.sigma.as_ref()),
            ("rho", self.rho.as_ref()),
            ("frames", self.frames.as_ref()),
            ("rates", self.rates.as_ref()),
            ("plf", self.plf.as_ref()),
            ("p_grid", self.p_grid.as_ref()),
            ("p", self.p.as_ref()),
            ("grid", self.grid.as_ref()),
            ("seeds", self.seeds.as_ref()),
            ("iterations", self.iterations.as_ref()),
            ("tolerance", self.tolerance.as_ref()),
            ("feasibility_tolerance", self.feasibility_tolerance.as_ref()),
            ("restrict_sign", self.restrict_sign.as_ref()),
            ("seed", self.seed.as_ref()),
            ("eps", self.eps.as_ref()),
            ("systems", self.systems.as_ref()),
            ("max_alphabet", self.max_alphabet.as_ref()),
            ("max_messages", self.max_messages.as_ref()),
            ("k_size", self.k_size.as_ref()),
            ("flip", self.flip.as_ref()),
            ("channel", self.channel.as_ref()),
            ("trials", self.trials.as_ref()),
            ("n", self.n.as_ref()),
            ("law", self.law.as_ref()),
        ]
    }
}

const SOURCE_KEYS: &[&str] = &["sigma", "rho", "frames"];
const SOLVER_KEYS: &[&str] = &["grid", "seeds", "iterations", "tolerance", "feasibility_tolerance", "restrict_sign"];

/// Errors of a command run and how they map to exit codes.
#[derive(Debug)]
pub enum RunError {
    /// Exit 2.
    Config(String),
    /// Exit 1, with the listed failures.
    Verification(Vec<String>),
    /// Exit 1: a computation failed.
    Compute(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Verification(_) | RunError::Compute(_) => 1,
        }
    }
}

fn compute<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Compute(e.to_string())
}

/// Parses a flat config document: one `key = value` per line, `#` starts a
/// comment, duplicate keys are errors.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(format!("line {}: expected key = value", lineno + 1))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(format!("line {}: empty key", lineno + 1));
        }
        if out.insert(k.clone(), v).is_some() {
            return Err(format!("line {}: duplicate key {k}", lineno + 1));
        }
    }
    Ok(out)
}

/// Raw settings plus the values actually resolved, defaults included.
#[derive(Debug, Default)]
pub struct Settings {
    raw: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    match s.trim() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        t => t.parse::<f64>().map_err(|_| format!("{t:?} is not a number")).and_then(|v| {
            if v.is_nan() {
                Err("NaN is not accepted".into())
            } else {
                Ok(v)
            }
        }),
    }
}

impl Settings {
    /// Merges a config file with flags (flags win) and rejects keys outside
    /// `allowed`.
    pub fn load(opts: &Options, allowed: &[&str]) -> Result<Self, RunError> {
        let mut raw = match &opts.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
                parse_config(&text).map_err(RunError::Config)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in opts.pairs() {
            if let Some(v) = v {
                raw.insert(k.to_string(), v.clone());
            }
        }
        for k in raw.keys() {
            if k != "out" && !allowed.contains(&k.as_str()) {
                return Err(RunError::Config(format!("unknown key {k:?} for this command")));
            }
        }
        Ok(Self { raw, resolved: BTreeMap::new() })
    }

    fn take(&mut self, key: &str, default: Option<&str>) -> Result<String, RunError> {
        let v = match (self.raw.get(key), default) {
            (Some(v), _) => v.clone(),
            (None, Some(d)) => d.to_string(),
            (None, None) => return Err(RunError::Config(format!("missing required key {key:?}"))),
        };
        self.resolved.insert(key.to_string(), v.clone());
        Ok(v)
    }

    pub fn string(&mut self, key: &str, default: &str) -> Result<String, RunError> {
        self.take(key, Some(default))
    }

    pub fn f64(&mut self, key: &str, default: &str) -> Result<f64, RunError> {
        let v = self.take(key, Some(default))?;
        parse_f64(&v).map_err(|e| RunError::Config(format!("{key}: {e}")))
    }

    pub fn f64_list(&mut self, key: &str, default: Option<&str>) -> Result<Vec<f64>, RunError> {
        let v = self.take(key, default)?;
        if v.trim().is_empty() {
            return Ok(vec![]);
        }
        v.split(',').map(|s| parse_f64(s).map_err(|e| RunError::Config(format!("{key}: {e}")))).collect()
    }

    pub fn usize(&mut self, key: &str, default: &str) -> Result<usize, RunError> {
        let v = self.take(key, Some(default))?;
        v.trim().parse::<usize>().map_err(|_| RunError::Config(format!("{key}: {v:?} is not a non-negative integer")))
    }

    pub fn u64(&mut self, key: &str, default: &str) -> Result<u64, RunError> {
        let v = self.take(key, Some(default))?;
        v.trim().parse::<u64>().map_err(|_| RunError::Config(format!("{key}: {v:?} is not a non-negative integer")))
    }

    pub fn bool(&mut self, key: &str, default: &str) -> Result<bool, RunError> {
        let v = self.take(key, Some(default))?;
        match v.trim() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            t => Err(RunError::Config(format!("{key}: {t:?} is not a boolean"))),
        }
    }

    /// Output path, not part of the hashed config.
    pub fn out(&self) -> Option<String> {
        self.raw.get("out").cloned().filter(|p| p != "-")
    }

    /// Canonical `key=value` lines of the resolved settings.
    pub fn canonical(&self) -> String {
        self.resolved.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }

    /// SHA-256 of [`Settings::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn source(&mut self, default_frames: &str) -> Result<GaussMarkovSource, RunError> {
        let frames = self.usize("frames", default_frames)?;
        if frames == 0 {
            return Err(RunError::Config("frames must be positive".into()));
        }
        let sigma = broadcast(self.f64_list("sigma", Some("1"))?, frames, "sigma")?;
        let rho = broadcast(self.f64_list("rho", Some("0.9"))?, frames - 1, "rho")?;
        GaussMarkovSource::new(sigma, rho).map_err(|e| RunError::Config(e.to_string()))
    }

    fn solver(&mut self) -> Result<SolverConfig, RunError> {
        let cfg = SolverConfig {
            grid: self.usize("grid", "64")?,
            seeds: self.usize("seeds", "16")?,
            iterations: self.usize("iterations", "200")?,
            tolerance: self.f64("tolerance", "1e-10")?,
            feasibility_tolerance: self.f64("feasibility_tolerance", "1e-9")?,
            restrict_sign: self.bool("restrict_sign", "true")?,
        };
        cfg.validate().map_err(|e| RunError::Config(e.to_string()))?;
        Ok(cfg)
    }

    fn plf(&mut self, default: &str) -> Result<PlfKind, RunError> {
        self.string("plf", default)?.parse::<PlfKind>().map_err(|e| RunError::Config(e.to_string()))
    }

    fn rates(&mut self, frames: usize, default: &str) -> Result<RateTuple, RunError> {
        let r = broadcast(self.f64_list("rates", Some(default))?, frames, "rates")?;
        RateTuple::new(r).map_err(|e| RunError::Config(e.to_string()))
    }
}

/// A single value is repeated `n` times; otherwise the length must be `n`.
fn broadcast(v: Vec<f64>, n: usize, key: &str) -> Result<Vec<f64>, RunError> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        len if len == n => Ok(v),
        0 if n == 0 => Ok(v),
        len => Err(RunError::Config(format!("{key}: expected 1 or {n} values, got {len}"))),
    }
}

fn keys(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

/// Float formatting for CSV: 17 significant digits, `inf` for infinities.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:.16e}")
    }
}

/// JSON number, or the string `"inf"` for non-finite values.
pub fn json_f64(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::String(fmt_f64(x))
    }
}

fn json_vec(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| json_f64(*x)).collect())
}

/// Finished output of a command.
pub struct Output {
    pub body: String,
    pub failures: Vec<String>,
}

fn csv_output(command: &str, settings: &Settings, seed: Option<u64>, header: &str, rows: &[Vec<String>]) -> String {
    let mut s = format!(
        "# causal-rdp version={VERSION} command={command} config_sha256={} seed={}\n{header}\n",
        settings.hash(),
        seed.map_or("none".into(), |v| v.to_string())
    );
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn json_output(command: &str, settings: &Settings, seed: Option<u64>, result: Value) -> String {
    let doc = json!({
        "artifact": "causal-rdp",
        "version": VERSION,
        "command": command,
        "config_sha256": settings.hash(),
        "seed": seed.map_or(Value::Null, |v| json!(v)),
        "config": settings.resolved.clone(),
        "result": result,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("JSON values serialize");
    s.push('\n');
    s
}

fn rdp_curve(opts: &Options) -> Result<(Settings, Output), RunError> {
    let mut st = Settings::load(opts, &keys(&[SOURCE_KEYS, SOLVER_KEYS, &["rates", "plf", "p_grid"]]))?;
    let source = st.source("2")?;
    let rates = st.rates(source.frames(), "1")?;
    let plf = st.plf("fmd")?;
    let grid = st.f64_list("p_grid", Some(""))?;
    if grid.is_empty() {
        return Err(RunError::Config("p_grid must list at least one threshold".into()));
    }
    if let Some(p) = grid.iter().find(|p| **p < 0.0) {
        return Err(RunError::Config(format!("p_grid: threshold {p} is negative")));
    }
    let cfg = st.solver()?;
    let points = dp_sweep(&source, &rates, plf, &grid, &cfg).map_err(compute)?;
    let rows: Vec<Vec<String>> = curve_rows(&points)
        .iter()
        .map(|r| {
            vec![
                r.frame.to_string(),
                fmt_f64(r.r_bits),
                fmt_f64(r.p_threshold),
                fmt_f64(r.d),
                fmt_f64(r.nu),
                fmt_f64(r.omega1),
                fmt_f64(r.omega2),
                fmt_f64(r.sigma_hat_sq),
                r.plf.to_string(),
                r.status.to_string(),
            ]
        })
        .collect();
    let failures = points
        .iter()
        .filter(|p| p.status == SolverStatus::Cleaned)
        .map(|p| format!("monotonicity repair at thresholds {:?}", p.thresholds.values()))
        .collect();
    let body = csv_output(
        "rdp-curve",
        &st,
        None,
        "frame,R_bits,P_threshold,D,nu,omega1,omega2,sigma_hat_sq,plf,solver_status",
        &rows,
    );
    Ok((st, Output { body, failures }))
}

fn rdp_extremal(opts: &Options) -> Result<(Settings, Output), RunError> {
    let mut st = Settings::load(opts, &keys(&[SOLVER_KEYS, &["sigma", "rho", "eps", "plf", "frames"]]))?;
    let sigma = st.f64("sigma", "1")?;
    let rho = st.f64("rho", "0.9")?;
    let eps = st.f64("eps", "1e-3")?;
    let which = st.string("plf", "all")?.to_ascii_lowercase();
    let frames = st.usize("frames", "4")?;
    let cfg = st.solver()?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(RunError::Config("eps must be positive and finite".into()));
    }
    if !(0.0..=1.0).contains(&rho) || !(sigma > 0.0) || frames == 0 {
        return Err(RunError::Config("need rho in [0, 1], sigma > 0 and frames ≥ 1".into()));
    }
    let schemes: Vec<Scheme> = match which.as_str() {
        "all" => Scheme::ALL.to_vec(),
        "mmse" => vec![Scheme::Mmse],
        "fmd" => vec![Scheme::ZeroPerception(PlfKind::Fmd)],
        "jd" => vec![Scheme::ZeroPerception(PlfKind::Jd)],
        other => return Err(RunError::Config(format!("plf: unknown value {other:?}"))),
    };
    let mut rows = Vec::new();
    for scheme in &schemes {
        for pattern in RatePattern::ALL {
            let regime = ExtremalRegime { pattern, eps, scheme: *scheme };
            let cell = table1_law(regime, sigma, rho).map_err(compute)?;
            let solved = solver_distortions(regime, sigma, rho, &cfg).map_err(compute)?;
            for (j, (closed, num)) in [cell.d1, cell.d2].iter().zip(solved).enumerate() {
                rows.push(vec![
                    pattern.to_string(),
                    scheme.to_string(),
                    (j + 1).to_string(),
                    String::new(),
                    fmt_f64(*closed),
                    fmt_f64(num),
                    fmt_f64(eps),
                ]);
            }
        }
        if let Scheme::ZeroPerception(plf) = scheme {
            let source = GaussMarkovSource::symmetric(frames, sigma, rho).map_err(compute)?;
            let rates = RateTuple::uniform(frames, eps).map_err(compute)?;
            let zero = PerceptionTuple::uniform(frames, 0.0).map_err(compute)?;
            let point = solve_sequential(&source, &rates, &zero, *plf).map_err(compute)?;
            for j in 1..=frames {
                let d = theorem5_deltas(rho, j, eps, sigma).map_err(compute)?;
                let (delta, closed) = match plf {
                    PlfKind::Fmd => (d.delta_fmd, d.d_fmd),
                    PlfKind::Jd => (d.delta_jd, d.d_jd),
                };
                rows.push(vec![
                    "low_rate".into(),
                    plf.to_string(),
                    j.to_string(),
                    fmt_f64(delta),
                    fmt_f64(closed),
                    fmt_f64(point.distortion[j - 1]),
                    fmt_f64(eps),
                ]);
            }
        }
    }
    let body = csv_output("rdp-extremal", &st, None, "regime,plf,frame,delta,D_closed_form,D_solver,eps", &rows);
    Ok((st, Output { body, failures: vec![] }))
}

/// Summary of the marginal-realism check over random systems.
pub fn factor_two_summary(
    systems: usize,
    seed: u64,
    frames: usize,
    max_alphabet: usize,
    max_messages: usize,
    k_size: usize,
) -> Result<(Value, Vec<String>), DiscreteError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let (mut max_ratio, mut max_identity_gap) = (0.0f64, 0.0f64);
    for s in 0..systems {
        let t = if frames == 0 { rand::Rng::random_range(&mut rng, 1..=3) } else { frames };
        let sys = random_system(&mut rng, t, max_alphabet, max_messages, k_size)?;
        let a = SystemAnalysis::new(&sys)?;
        let c = fmd_construct_of(&a)?;
        let eval = evaluate(&a.joint, &c.reconstruction)?;
        for j in 0..t {
            let mmse = a.mmse.distortion[j];
            let gap = (eval.mse[j] - c.threshold[j]).abs();
            max_identity_gap = max_identity_gap.max(gap);
            if mmse > 0.0 {
                max_ratio = max_ratio.max(eval.mse[j] / mmse);
            }
            if gap > 1e-10 {
                failures.push(format!("system {s} frame {}: MSE differs from MMSE + W2² by {gap:e}", j + 1));
            }
            if eval.mse[j] > 2.0 * mmse + 1e-12 {
                failures.push(format!("system {s} frame {}: MSE {} exceeds twice the MMSE {mmse}", j + 1, eval.mse[j]));
            }
        }
    }
    Ok((json!({"systems": systems, "max_ratio": max_ratio, "max_identity_gap": max_identity_gap}), failures))
}

fn verify_factor2(opts: &Options) -> Result<(Settings, Output), RunError> {
    let mut st = Settings::load(opts, &["systems", "seed", "frames", "max_alphabet", "max_messages", "k_size"])?;
    let systems = st.usize("systems", "100")?;
    let seed = st.u64("seed", "7")?;
    let frames = st.usize("frames", "0")?;
    let max_alphabet = st.usize("max_alphabet", "4")?;
    let max_messages = st.usize("max_messages", "3")?;
    let k_size = st.usize("k_size", "2")?;
    if frames > 3 || max_alphabet < 2 || max_messages == 0 || k_size == 0 {
        return Err(RunError::Config("need frames ≤ 3 (0 = random), max_alphabet ≥ 2, max_messages ≥ 1, k_size ≥ 1".into()));
    }
    let (result, failures) =
        factor_two_summary(systems, seed, frames, max_alphabet, max_messages, k_size).map_err(compute)?;
    let body = json_output("verify-factor2", &st, Some(seed), result);
    Ok((st, Output { body, failures }))
}

/// The counterexample's frame-2 numbers and the failures found.
pub fn jd_counterexample_summary(flip: f64) -> Result<(Value, Vec<String>), DiscreteError> {
    let sys = counterexample_system(flip)?;
    let a = SystemAnalysis::new(&sys)?;
    let jd = jd_construct_of(&a)?;
    let deviation = joint_law_deviation(&a.joint, &jd.reconstruction)?;
    let eval = evaluate(&a.joint, &jd.reconstruction)?;
    let mut failures = Vec::new();
    if !(jd.threshold[1] > 0.0) {
        failures.push(format!("frame-2 joint threshold {} is not positive", jd.threshold[1]));
    }
    if a.mmse.distortion[1] > 1e-12 {
        failures.push(format!("frame-2 MMSE distortion {} is not zero", a.mmse.distortion[1]));
    }
    if deviation > 1e-10 {
        failures.push(format!("joint law deviation {deviation:e} exceeds 1e-10"));
    }
    Ok((
        json!({
            "flip": flip,
            "mmse_distortion": json_vec(&a.mmse.distortion),
            "jd_threshold": json_vec(&jd.threshold),
            "jd_mse": json_vec(&eval.mse),
            "joint_law_deviation": deviation,
        }),
        failures,
    ))
}

fn verify_jd_counterexample(opts: &Options) -> Result<(Settings, Output), RunError> {
    let mut st = Settings::load(opts, &["flip"])?;
    let flip = st.f64("flip", "0.1")?;
    if !(0.0..=1.0).contains(&flip) {
        return Err(RunError::Config("flip must lie in [0, 1]".into()));
    }
    let (result, failures) = jd_counterexample_summary(flip).map_err(compute)?;
    let body = json_output("verify-jd-counterexample", &st, None, result);
    Ok((st, Output { body, failures }))
}

/// Tolerances of the universality check.
pub const UNIVERSAL_COV_TOL: f64 = 1e-8;
pub const UNIVERSAL_NOISE_TOL: f64 = 1e-9;

/// Sweeps both PLFs (or one) at `rates` and verifies every transform.
pub fn universal_summary(
    source: &GaussMarkovSource,
    rates: &RateTuple,
    plfs: &[PlfKind],
    grid: &[f64],
    cfg: &SolverConfig,
) -> Result<(Value, Vec<String>), RunError> {
    let mmse = mmse_recursion(source, rates).map_err(compute)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for plf in plfs {
        let points = dp_sweep(source, rates, *plf, grid, cfg).map_err(compute)?;
        for (i, r) in verify_batch(source, &mmse, &points).into_iter().enumerate() {
            match r {
                Ok(rec) => {
                    if rec.max_cov_deviation > UNIVERSAL_COV_TOL {
                        failures.push(format!("{plf} point {i}: covariance deviation {:e}", rec.max_cov_deviation));
                    }
                    records.push(json!({
                        "rates": json_vec(&rec.rates),
                        "D": json_vec(&rec.distortion),
                        "P": json_vec(&rec.perception),
                        "plf": rec.plf.to_string(),
                        "coefficients": rec.coefficients.iter().map(|c| json_vec(c)).collect::<Vec<_>>(),
                        "noise_vars": json_vec(&rec.noise_vars),
                        "max_cov_deviation": rec.max_cov_deviation,
                    }));
                }
                Err(e) => failures.push(format!("{plf} point {i}: {e}")),
            }
        }
    }
    Ok((Value::Array(records), failures))
}

fn verify_universal(opts: &Options) -> Result<(Settings, Output), RunError> {
    let mut st = Settings::load(opts, &keys(&[SOURCE_KEYS, SOLVER_KEYS, &["rates", "plf", "p_grid"]]))?;
    let source = st.source("2")?;
    let rates = st.rates(source.frames(), "1")?;
    let which = st.string("plf", "both")?.to_ascii_lowercase();
    let plfs = match which.as_str() {
        "both" => vec![PlfKind::Fmd, PlfKind::Jd],
        other => vec![other.parse::<PlfKind>().map_err(|e| RunError::Config(e.to_string()))?],
    };
    let grid = st.f64_list("p_grid", Some("0,0.01,0.05,0.1,0.3,inf"))?;
    if grid.is_empty() {
        return Err(RunError::Config("p_grid must list at least one threshold".into()));
    }
    let cfg = st.solver()?;
    let (result, failures) = universal_summary(&source, &rates, &plfs, &grid, &cfg)?;
    let body = json_output("verify-universal", &st, None, result);
    Ok((st, Output { body, failures }))
}

fn oneshot_simulate(opts: &Options) -> Result<(Settings, Output), RunError> {
    let mut st = Settings::load(opts, &["channel", "flip", "frames", "trials", "seed"])?;
    let channel = st.string("channel", "bsc")?.to_ascii_lowercase();
    let trials = st.usize("trials", "100000")?;
    let seed = st.u64("seed", "1")?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut push = |frame: usize, rep: &crate::oneshot::LengthReport, failures: &mut Vec<String>| {
        if !rep.within_bound() {
            failures.push(format!(
                "frame {frame}: mean length {} exceeds bound {} by more than 3 SE",
                rep.mean_length, rep.bound
            ));
        }
        rows.push(vec![
            frame.to_string(),
            fmt_f64(rep.mutual_information),
            fmt_f64(rep.mean_length),
            fmt_f64(rep.bound),
            rep.n_trials.to_string(),
            rep.seed.to_string(),
        ]);
    };
    let single = |ch: DiscreteChannel| encode_length_auto(&ch, trials, seed).map_err(compute);
    match channel.as_str() {
        "bsc" | "useless" | "random" => {
            let flip = st.f64("flip", "0.2")?;
            let ch = match channel.as_str() {
                "bsc" => DiscreteChannel::binary_symmetric(flip).map_err(|e| RunError::Config(e.to_string()))?,
                "useless" => DiscreteChannel::useless(vec![0.5, 0.5], vec![0.3, 0.7]).map_err(compute)?,
                _ => DiscreteChannel::random(&mut ChaCha20Rng::seed_from_u64(seed), 4, 4, 2.0).map_err(compute)?,
            };
            if trials < crate::oneshot::MIN_TRIALS {
                return Err(RunError::Config(format!("trials must be at least {}", crate::oneshot::MIN_TRIALS)));
            }
            let rep = single(ch)?;
            push(1, &rep, &mut failures);
        }
        "chain" => {
            let flip = st.f64("flip", "0.2")?;
            let frames = st.usize("frames", "2")?;
            if frames == 0 || !(0.0..=1.0).contains(&flip) || trials < 2 {
                return Err(RunError::Config("chain needs frames ≥ 1, flip in [0, 1] and trials ≥ 2".into()));
            }
            let source = DiscreteMarkovSource::binary_chain(frames, 0.0, 1.0, 0.5, 0.1).map_err(compute)?;
            let channels = CausalChannels::from_fn(&source, vec![2; frames], |_, x, _| {
                if x == 0 {
                    vec![1.0 - flip, flip]
                } else {
                    vec![flip, 1.0 - flip]
                }
            })
            .map_err(compute)?;
            let report = causal_chain_encode(&source, &channels, trials, &PfrCodebook::new(seed, PrefixCode::EliasGamma))
                .map_err(compute)?;
            for (j, rep) in report.frames.iter().enumerate() {
                push(j + 1, rep, &mut failures);
            }
        }
        other => return Err(RunError::Config(format!("channel: unknown value {other:?}"))),
    }
    let body = csv_output("oneshot-simulate", &st, Some(seed), "frame,I_bits,mean_len_bits,bound_bits,n_trials,seed", &rows);
    Ok((st, Output { body, failures }))
}

fn mc_law(
    st: &mut Settings,
    source: &GaussMarkovSource,
    rates: &RateTuple,
) -> Result<LinearReconstructionLaw, RunError> {
    let law = st.string("law", "mmse")?.to_ascii_lowercase();
    match law.as_str() {
        "identity" => Ok(LinearReconstructionLaw::identity(source)),
        "mmse" => Ok(mmse_recursion(source, rates).map_err(compute)?.law),
        "solver" => {
            let plf = st.plf("fmd")?;
            let p = st.f64("p", "0")?;
            let cfg = st.solver()?;
            let thresholds =
                PerceptionTuple::uniform(source.frames(), p).map_err(|e| RunError::Config(e.to_string()))?;
            Ok(solve_point(source, rates, &thresholds, plf, &cfg).map_err(compute)?.law)
        }
        other => Err(RunError::Config(format!("law: unknown value {other:?}"))),
    }
}

fn mc_check(opts: &Options) -> Result<(Settings, Output), RunError> {
    let mut st = Settings::load(opts, &keys(&[SOURCE_KEYS, SOLVER_KEYS, &["rates", "law", "plf", "p", "n", "seed"]]))?;
    let source = st.source("2")?;
    let rates = st.rates(source.frames(), "1")?;
    let law = mc_law(&mut st, &source, &rates)?;
    let n = st.usize("n", "100000")?;
    let seed = st.u64("seed", "1")?;
    if n < crate::montecarlo::MIN_SAMPLES {
        return Err(RunError::Config(format!("n must be at least {}", crate::montecarlo::MIN_SAMPLES)));
    }
    let report = simulate(&source, &law, n, seed).map_err(compute)?;
    let exact = analytic_values(&source, &law).map_err(compute)?;
    let misses = report.disagreements(&exact, SE_MULTIPLIER);
    let failures = misses
        .iter()
        .map(|d| format!("{} frame {}: {} vs {} (SE {:e})", d.quantity, d.frame + 1, d.empirical, d.analytic, d.standard_error))
        .collect();
    let result = json!({
        "report": serde_json::to_value(&report).map_err(compute)?,
        "analytic": serde_json::to_value(&exact).map_err(compute)?,
        "disagreements": serde_json::to_value(&misses).map_err(compute)?,
    });
    let body = json_output("mc-check", &st, Some(seed), result);
    Ok((st, Output { body, failures }))
}

fn selftest(opts: &Options) -> Result<(Settings, Output), RunError> {
    let mut st = Settings::load(opts, &["seed"])?;
    let seed = st.u64("seed", "1")?;
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut record = |name: &str, result: Result<Vec<String>, RunError>| {
        let fails = match result {
            Ok(f) => f,
            Err(e) => vec![format!("{e:?}")],
        };
        if fails.is_empty() {
            lines.push(format!("ok {name}"));
        } else {
            lines.push(format!("FAIL {name}: {}", fails.join("; ")));
            failures.extend(fails.into_iter().map(|f| format!("{name}: {f}")));
        }
    };
    record("factor2", factor_two_summary(40, seed, 0, 4, 3, 2).map(|r| r.1).map_err(compute));
    record("jd_counterexample", jd_counterexample_summary(0.1).map(|r| r.1).map_err(compute));
    record(
        "universal",
        (|| {
            let source = GaussMarkovSource::symmetric(2, 1.0, 0.8).map_err(compute)?;
            let rates = RateTuple::new(vec![1.0, 0.6]).map_err(compute)?;
            let grid = [0.0, 0.02, 0.1, f64::INFINITY];
            Ok(universal_summary(&source, &rates, &[PlfKind::Fmd, PlfKind::Jd], &grid, &SolverConfig::default())?.1)
        })(),
    );
    record(
        "oneshot_bsc",
        (|| {
            let rep = encode_length_auto(&DiscreteChannel::binary_symmetric(0.2).map_err(compute)?, 20_000, seed)
                .map_err(compute)?;
            Ok(if rep.within_bound() { vec![] } else { vec![format!("mean {} above bound {}", rep.mean_length, rep.bound)] })
        })(),
    );
    record(
        "montecarlo_mmse",
        (|| {
            let source = GaussMarkovSource::symmetric(2, 1.0, 0.9).map_err(compute)?;
            let law = mmse_recursion(&source, &RateTuple::uniform(2, 1.0).map_err(compute)?).map_err(compute)?.law;
            let report = simulate(&source, &law, 50_000, seed).map_err(compute)?;
            let exact = analytic_values(&source, &law).map_err(compute)?;
            Ok(report.disagreements(&exact, SE_MULTIPLIER).iter().map(|d| format!("{d:?}")).collect())
        })(),
    );
    record(
        "permanence_of_error",
        (|| {
            let mut out = Vec::new();
            for j in 1..=4 {
                let d = theorem5_deltas(1.0, j, 1e-3, 1.0).map_err(compute)?;
                if (d.delta_jd - 1.0).abs() > 1e-12 {
                    out.push(format!("frame {j}: joint coefficient {}", d.delta_jd));
                }
            }
            Ok(out)
        })(),
    );
    let mut body = format!(
        "# causal-rdp version={VERSION} command=selftest config_sha256={} seed={seed}\n",
        st.hash()
    );
    for l in &lines {
        body.push_str(l);
        body.push('\n');
    }
    Ok((st, Output { body, failures }))
}

fn dispatch(command: &Command) -> (&'static str, Result<(Settings, Output), RunError>) {
    match command {
        Command::Rdp { command: RdpCommand::Curve(o) } => ("rdp-curve", rdp_curve(o)),
        Command::Rdp { command: RdpCommand::Extremal(o) } => ("rdp-extremal", rdp_extremal(o)),
        Command::Verify { command: VerifyCommand::Factor2(o) } => ("verify-factor2", verify_factor2(o)),
        Command::Verify { command: VerifyCommand::JdCounterexample(o) } => {
            ("verify-jd-counterexample", verify_jd_counterexample(o))
        }
        Command::Verify { command: VerifyCommand::Universal(o) } => ("verify-universal", verify_universal(o)),
        Command::Oneshot { command: OneshotCommand::Simulate(o) } => ("oneshot-simulate", oneshot_simulate(o)),
        Command::Mc { command: McCommand::Check(o) } => ("mc-check", mc_check(o)),
        Command::Selftest(o) => ("selftest", selftest(o)),
    }
}

fn failure_report(command: &str, kind: &str, messages: &[String]) -> String {
    json!({"status": "fail", "command": command, "kind": kind, "failures": messages}).to_string()
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let (name, result) = dispatch(&cli.command);
    match result {
        Ok((settings, output)) => {
            match settings.out() {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, &output.body) {
                        eprintln!("{}", failure_report(name, "io", &[format!("cannot write {path}: {e}")]));
                        return 1;
                    }
                }
                None => print!("{}", output.body),
            }
            if output.failures.is_empty() {
                0
            } else {
                eprintln!("{}", failure_report(name, "verification", &output.failures));
                1
            }
        }
        Err(e) => {
            let (kind, msgs) = match &e {
                RunError::Config(m) => ("config", vec![m.clone()]),
                RunError::Verification(m) => ("verification", m.clone()),
                RunError::Compute(m) => ("compute", vec![m.clone()]),
            };
            eprintln!("{}", failure_report(name, kind, &msgs));
            e.exit_code()
        }
    }
}

/// Parses `argv` and runs it; clap usage errors exit with code 2.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let m = parse_config("# comment\nrho = 0.5 # trailing\n\nrates=1,inf\n").unwrap();
        assert_eq!(m["rho"], "0.5");
        assert_eq!(m["rates"], "1,inf");
        assert!(parse_config("a = 1\na = 2").is_err());
        assert!(parse_config("novalue").is_err());
    }

    #[test]
    fn float_format() {
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn empty_grid_is_a_config_error() {
        assert_eq!(run_from(["causal-rdp", "rdp", "curve", "--p-grid", ""]), 2);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        assert_eq!(run_from(["causal-rdp", "verify", "jd-counterexample", "--rho", "0.5"]), 2);
    }

    #[test]
    fn hash_is_stable() {
        let opts = Options { rho: Some("0.5".into()), ..Default::default() };
        let mut a = Settings::load(&opts, &["rho"]).unwrap();
        let mut b = Settings::load(&opts, &["rho"]).unwrap();
        a.f64("rho", "0").unwrap();
        b.f64("rho", "0").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
