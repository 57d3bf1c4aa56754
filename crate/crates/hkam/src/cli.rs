//! Experiment configuration, pipeline orchestration and report emission.
//!
//! Configurations are strict JSON: unknown fields are errors and every
//! missing required field is reported at once.  Reports are serialized with
//! sorted keys and shortest round-trip float formatting, so two runs of the
//! same configuration produce byte-identical files.  Schema problems exit
//! with status 2, pipeline failures with status 1 and name the stage.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::homological::{
    cauchy_residual, solve_cauchy, solve_domega, solve_shifted, solve_transport, transport_residual, CylinderField,
    Frequency,
};
use crate::kam::{fmt17, AffineCanonical, KamOptions};
use crate::normalform::{average_out, localize_and_scale, reduce, ActionJet, Averaged, Reduced, ResonanceFrame, ScaledModel};
use crate::separatrix::{analyze_potential, separatrix_function, SeparatrixMap};
use crate::series::{FourierTable, MomentumJet};
use crate::splitting::{compute_manifolds, split, SplitConfig, SplittingReport};

/// A value given inline or as a path relative to the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Path(String),
    Inline(T),
}

/// Acceptance tolerances of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Hamilton–Jacobi and transport residuals.
    pub residual: f64,
    /// `|ξ₀ − ξ_β|`.
    pub exactness: f64,
    /// Allowed negative slack in the per-mode decay bound.
    pub decay_slack: f64,
}

/// Numerical knobs with defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub kam: KamOptions,
    /// Cylinder half-width as a fraction of the chart window.
    pub window: f64,
    pub s_nodes: usize,
    pub strip_halfwidth: f64,
    pub flowbox_rho: f64,
    /// Run the optional averaging step before the reduction.
    pub average: bool,
}

impl Default for Numerics {
    fn default() -> Self {
        let s = SplitConfig::default();
        Self {
            kam: s.kam,
            window: s.window,
            s_nodes: s.s_nodes,
            strip_halfwidth: s.strip_halfwidth,
            flowbox_rho: s.flowbox_rho,
            average: false,
        }
    }
}

/// One experiment: `H0(p) + ε(U + μ·P)` near the resonance `⟨k0, ω⟩ = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of rotators (1 or 2).
    pub n: usize,
    pub k0: Vec<i64>,
    /// Resonant action.
    pub p0: Vec<f64>,
    /// Full frequency `DH0(p0)`, with `⟨k0, ω0⟩ = 0`.
    pub omega0: Vec<f64>,
    pub tau: f64,
    /// Largest `|k|₁` in the Diophantine check.
    pub k_check: usize,
    /// `D²H0(p0)`.
    pub hessian: Vec<Vec<f64>>,
    #[serde(default)]
    pub cubic_bound: f64,
    /// Momentum-free part of `H1` in the resonance basis (plain convention,
    /// `n + 1` dimensions, or one dimension for a pure potential in `x`).
    pub potential: Source<FourierTable>,
    /// Perturbation jet, scaled by `mu`.
    pub perturbation: Source<MomentumJet>,
    pub eps_list: Vec<f64>,
    pub mu: f64,
    /// `[Chebyshev nodes in x, Fourier cutoff per angle…]`.
    pub cutoffs: Vec<usize>,
    pub tolerances: Tolerances,
    /// Seeds per angle in the critical-point search.
    pub seeds: usize,
    #[serde(default)]
    pub numerics: Numerics,
}

const REQUIRED: [&str; 15] = [
    "n",
    "k0",
    "p0",
    "omega0",
    "tau",
    "k_check",
    "hessian",
    "potential",
    "perturbation",
    "eps_list",
    "mu",
    "cutoffs",
    "tolerances",
    "seeds",
    "numerics",
];

/// A validated configuration with its referenced data loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub h0: ActionJet,
    /// `U + μ·P` in the resonance basis.
    pub h1: MomentumJet,
    pub frame: ResonanceFrame,
}

impl Experiment {
    pub fn split_config(&self) -> SplitConfig {
        let c = &self.config;
        SplitConfig {
            nx: c.cutoffs[0],
            kcut: c.cutoffs[1..].iter().copied().max().unwrap_or(1),
            window: c.numerics.window,
            s_nodes: c.numerics.s_nodes,
            strip_halfwidth: c.numerics.strip_halfwidth,
            flowbox_rho: c.numerics.flowbox_rho,
            kam: c.numerics.kam,
            seeds: c.seeds,
        }
    }
}

/// CLI failure: the stage that failed and the exit status.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub stage: &'static str,
    pub code: i32,
    pub messages: Vec<String>,
}

impl CliError {
    fn schema(messages: Vec<String>) -> Self {
        Self { stage: "config", code: 2, messages }
    }

    fn stage(stage: &'static str, e: Error) -> Self {
        let code = if matches!(e, Error::Schema(_)) { 2 } else { 1 };
        Self { stage, code, messages: vec![e.to_string()] }
    }

    fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self { stage: "io", code: 1, messages: vec![format!("{}: {e}", path.display())] }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, m) in self.messages.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {m}", self.stage)?;
        }
        Ok(())
    }
}

fn load_source<T: for<'de> Deserialize<'de>>(src: &Source<T>, base: &Path, field: &str) -> Result<T, String>
where
    T: Clone,
{
    match src {
        Source::Inline(v) => Ok(v.clone()),
        Source::Path(p) => {
            let path = base.join(p);
            let text = fs::read_to_string(&path).map_err(|e| format!("{field}: {}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{field}: {}: {e}", path.display()))
        }
    }
}

/// Validates a configuration text: required and unknown fields, types,
/// the documented invariants, referenced files and the resonance frame.
/// Returns every problem found, each naming its field.
pub fn validate(text: &str, base: &Path) -> Result<Experiment, Vec<String>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| vec![format!("not valid JSON: {e}")])?;
    let Some(obj) = value.as_object() else {
        return Err(vec!["top level must be an object".into()]);
    };
    let mut errs: Vec<String> = REQUIRED
        .iter()
        .filter(|k| **k != "numerics" && !obj.contains_key(**k))
        .map(|k| format!("missing field `{k}`"))
        .collect();
    errs.extend(
        obj.keys()
            .filter(|k| !REQUIRED.contains(&k.as_str()) && k.as_str() != "cubic_bound")
            .map(|k| format!("unknown field `{k}`")),
    );
    if !errs.is_empty() {
        return Err(errs);
    }
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| vec![e.to_string()])?;
    let c = &config;
    let m = c.n + 1;
    let mut errs = Vec::new();
    if !(1..=2).contains(&c.n) {
        errs.push(format!("n: {} rotators, supported are 1 or 2", c.n));
    }
    for (name, len) in [("k0", c.k0.len()), ("p0", c.p0.len()), ("omega0", c.omega0.len()), ("cutoffs", c.cutoffs.len())] {
        if len != m {
            errs.push(format!("{name}: expected {m} entries, got {len}"));
        }
    }
    if c.hessian.len() != m || c.hessian.iter().any(|r| r.len() != m) {
        errs.push(format!("hessian: expected a {m}×{m} matrix"));
    }
    if c.eps_list.is_empty() {
        errs.push("eps_list: must not be empty".into());
    }
    if c.eps_list.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        errs.push("eps_list: entries must be positive".into());
    }
    if c.eps_list.windows(2).any(|w| w[0] >= w[1]) {
        errs.push("eps_list: must be sorted ascending".into());
    }
    if !c.mu.is_finite() {
        errs.push("mu: must be finite".into());
    }
    for (name, v) in [
        ("tolerances.residual", c.tolerances.residual),
        ("tolerances.exactness", c.tolerances.exactness),
        ("tolerances.decay_slack", c.tolerances.decay_slack),
    ] {
        if !(v > 0.0) {
            errs.push(format!("{name}: must be positive, got {v}"));
        }
    }
    if c.cutoffs.contains(&0) {
        errs.push("cutoffs: entries must be positive".into());
    }
    if c.seeds == 0 {
        errs.push("seeds: must be positive".into());
    }
    if c.tau < c.n as f64 - 1.0 {
        errs.push(format!("tau: {} < n − 1", c.tau));
    }
    if !(c.numerics.window > 0.0 && c.numerics.window <= 1.0) {
        errs.push("numerics.window: must lie in (0, 1]".into());
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    let potential = load_source(&c.potential, base, "potential");
    let perturbation = load_source(&c.perturbation, base, "perturbation");
    let (potential, perturbation) = match (potential, perturbation) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => return Err(a.err().into_iter().chain(b.err()).collect()),
    };
    let potential = if potential.dims() == 1 && m > 1 {
        let mut cut = vec![potential.cutoffs()[0]];
        cut.extend(std::iter::repeat_n(0, c.n));
        potential.embed(m, &cut, &[0])
    } else {
        potential
    };
    if potential.dims() != m {
        errs.push(format!("potential: {} dimensions, expected 1 or {m}", potential.dims()));
    }
    if perturbation.momenta != m {
        errs.push(format!("perturbation: {} momenta, expected {m}", perturbation.momenta));
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    let mut h1 = MomentumJet::zero(m);
    h1.add_term(vec![0; m], &potential).map_err(|e| vec![format!("potential: {e}")])?;
    for (e, t) in &perturbation.terms {
        h1.add_term(e.clone(), &t.scale(c.mu)).map_err(|e| vec![format!("perturbation: {e}")])?;
    }
    h1.remainder_bound = c.mu.abs() * perturbation.remainder_bound;
    let frame = ResonanceFrame::new(&c.k0, c.p0.clone(), &c.omega0, c.tau, c.k_check).map_err(|e| vec![format!("omega0: {e}")])?;
    let h0 = ActionJet { hessian: c.hessian.clone(), cubic_bound: c.cubic_bound };
    Ok(Experiment { config, h0, h1, frame })
}

/// Reads and validates a configuration file.
pub fn load(path: &Path) -> Result<Experiment, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    validate(&text, &base).map_err(CliError::schema)
}

/// The reduced model at one `ε`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub eps: f64,
    pub scaled: ScaledModel,
    pub averaged: Option<Averaged>,
    pub red: Reduced,
    pub freq: Frequency,
}

/// Localization, scaling, optional averaging and reduction.
pub fn prepare(exp: &Experiment, eps: f64) -> Result<Prepared, CliError> {
    let c = &exp.config;
    let scaled = localize_and_scale(&exp.h0, &exp.h1, &exp.frame, eps, 1.0).map_err(|e| CliError::stage("normalform", e))?;
    let freq = Frequency::new(scaled.omega1.clone(), c.tau, c.k_check).map_err(|e| CliError::stage("normalform", e))?;
    let averaged = if c.numerics.average {
        Some(average_out(&scaled.jet, &freq).map_err(|e| CliError::stage("normalform", e))?)
    } else {
        None
    };
    let h_nu = averaged.as_ref().map_or(&scaled.jet, |a| &a.h_nu);
    let red = reduce(h_nu).map_err(|e| CliError::stage("normalform", e))?;
    Ok(Prepared { eps, scaled, averaged, red, freq })
}

/// Serializes with sorted keys and round-trip float formatting.
pub fn to_json<T: Serialize>(v: &T) -> String {
    // `serde_json::Value` keeps object keys in a BTreeMap, hence sorted.
    let value = serde_json::to_value(v).expect("reports serialize to JSON");
    let mut s = serde_json::to_string_pretty(&value).expect("JSON values print");
    s.push('\n');
    s
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Output of `normalform`, one entry per `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalFormEntry {
    pub eps: f64,
    pub omega1: Vec<f64>,
    pub r0: f64,
    pub lambda: f64,
    pub theta: Vec<f64>,
    pub h_nu: MomentumJet,
    pub h_theta: MomentumJet,
}

/// Output of `kam`: the three whiskers' generating data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldFile {
    pub eps: f64,
    pub unstable: AffineCanonical,
    pub stable_plus: AffineCanonical,
    pub stable_minus: AffineCanonical,
    pub residuals: Vec<f64>,
    pub xi_mismatch: f64,
    pub c0_mismatch: f64,
    pub stop: Vec<String>,
}

/// One configured invariant check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

/// Output of `split`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub eps: f64,
    pub report: SplittingReport,
    pub checks: Vec<Check>,
}

/// Evaluates the configured checks on a splitting report.
pub fn checks(exp: &Experiment, rep: &SplittingReport) -> Vec<Check> {
    let tol = exp.config.tolerances;
    let n = exp.config.n;
    let mut out = Vec::new();
    let mut push = |name: &str, value: f64, limit: f64, pass: bool| out.push(Check { name: name.into(), value, limit, pass });
    let hj = rep.kam_residuals.iter().copied().fold(0.0f64, f64::max);
    push("hj_residual", hj, tol.residual, hj < tol.residual);
    push("xi_mismatch", rep.xi_mismatch, tol.exactness, rep.xi_mismatch < tol.exactness);
    for b in &rep.branches {
        let tag = if b.beta > 0 { "+" } else { "-" };
        let limit = tol.residual.max(b.transport_floor);
        push(&format!("transport[{tag}]"), b.transport_residual, limit, b.transport_residual < limit);
        let worst = b.decay.coeffs.iter().filter(|c| !c.ok).map(|c| c.slack).fold(0.0f64, f64::min);
        push(&format!("decay_slack[{tag}]"), worst, -tol.decay_slack, worst >= -tol.decay_slack);
        let count = b.critical_points.len() as f64;
        push(&format!("critical_points[{tag}]"), count, (n + 1) as f64, count >= (n + 1) as f64 || b.norm == 0.0);
    }
    out
}

/// One row of the ε sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub k: Vec<i64>,
    pub abs_coeff: f64,
    pub bound_rhs: f64,
    pub slack: f64,
    pub xi_mismatch: f64,
    pub c0_mismatch: f64,
    pub n_critical: usize,
}

/// Sweep over `eps_list`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// `(ε, |𝔖′_{e₁}|)` on the upper branch.
    pub first_mode: Vec<(f64, f64)>,
    /// Least-squares exponent `c` in `|𝔖′_{e₁}| ∝ e^{−c/√ε}`.
    pub fitted_exponent: f64,
    /// `ρ′|ω₀|/(λ√R₀)` with `ω₀` the first quotient frequency.
    pub predicted_exponent: f64,
    pub reports: Vec<SplittingReport>,
}

impl Sweep {
    pub fn to_csv(&self, n: usize) -> String {
        let mut s = String::from("eps,");
        for a in 1..=n {
            s.push_str(&format!("mode_k{a},"));
        }
        s.push_str("abs_coeff,bound_rhs,slack,xi_mismatch,c0_mismatch,n_critical\n");
        for r in &self.rows {
            s.push_str(&fmt17(r.eps));
            for k in &r.k {
                s.push_str(&format!(",{k}"));
            }
            s.push_str(&format!(
                ",{},{},{},{},{},{}\n",
                fmt17(r.abs_coeff),
                fmt17(r.bound_rhs),
                fmt17(r.slack),
                fmt17(r.xi_mismatch),
                fmt17(r.c0_mismatch),
                r.n_critical
            ));
        }
        s
    }
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Runs the splitting stage for every `ε` and fits the exponential rate of
/// the first coefficient on the upper branch.
pub fn sweep(exp: &Experiment) -> Result<Sweep, CliError> {
    let cfg = exp.split_config();
    let n = exp.config.n;
    let mut e1 = vec![0i64; n];
    e1[0] = 1;
    let mut rows = Vec::new();
    let mut first_mode = Vec::new();
    let mut reports = Vec::new();
    let mut predicted = f64::NAN;
    for &eps in &exp.config.eps_list {
        let p = prepare(exp, eps)?;
        let (_, rep) = split(&p.red, &p.freq, &cfg).map_err(|e| CliError::stage("splitting", e))?;
        predicted = rep.rho_prime * exp.frame.omega0.omega[0].abs() / (p.red.sep.lambda * p.scaled.r0.sqrt());
        let upper = rep.branches.iter().find(|b| b.beta > 0).expect("upper branch");
        for c in &upper.decay.coeffs {
            if c.abs == 0.0 || c.k.iter().find(|v| **v != 0).is_some_and(|v| *v < 0) {
                continue;
            }
            rows.push(SweepRow {
                eps,
                k: c.k.clone(),
                abs_coeff: c.abs,
                bound_rhs: c.bound_log.exp(),
                slack: c.slack,
                xi_mismatch: rep.xi_mismatch,
                c0_mismatch: rep.c0_mismatch,
                n_critical: rep.n_critical,
            });
        }
        let a = upper.decay.coeffs.iter().find(|c| c.k == e1).map_or(0.0, |c| c.abs);
        first_mode.push((eps, a));
        reports.push(rep);
    }
    let usable: Vec<(f64, f64)> = first_mode.iter().filter(|(_, a)| *a > 0.0).map(|(e, a)| (e.powf(-0.5), a.ln())).collect();
    let fitted = if usable.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = usable.into_iter().unzip();
        -ls_slope(&x, &y)
    } else {
        f64::NAN
    };
    log::info!("sweep: fitted exponent {fitted:.6}, predicted {predicted:.6}");
    Ok(Sweep { rows, first_mode, fitted_exponent: fitted, predicted_exponent: predicted, reports })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Info,
    Debug,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HomologicalOp {
    Domega,
    Transport,
    Shifted,
    Cauchy,
}

/// Spectral numerics for whiskered tori and the splitting of separatrices.
#[derive(Debug, Parser)]
#[command(name = "hkam", version)]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "info")]
    pub log_level: LogLevel,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate the energy-time map of a potential: x, s, chi, psi.
    Timemap {
        /// One-dimensional FourierTable of the potential.
        #[arg(long)]
        potential: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Run one homological solver on a JSON input.
    Homological {
        #[arg(long, value_enum)]
        op: HomologicalOp,
        #[arg(long = "in")]
        input: PathBuf,
        /// Frequency: `{"omega": [...], "tau": τ, "kmax": K}`.
        #[arg(long)]
        freq: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Segment height of the Cauchy solver.
        #[arg(long, default_value_t = 0.25)]
        rho: f64,
        /// Potential defining the separatrix (transport only).
        #[arg(long)]
        potential: Option<PathBuf>,
        #[arg(long, default_value_t = 48)]
        nx: usize,
        #[arg(long, default_value_t = 8)]
        kcut: usize,
        /// Print the verification residual.
        #[arg(long)]
        residual: bool,
    },
    /// Localize, scale and reduce for every ε of the configuration.
    Normalform,
    /// Whiskers of the first ε: manifold JSON plus the iteration log.
    Kam {
        /// CSV with columns j, mu, nu, lambda, M, R, residual.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Splitting report for the first ε.
    Split,
    /// Splitting coefficients across `eps_list`.
    SweepEps,
    /// Validate the configuration and list every problem.
    Validate,
}

/// Frequency file of the `homological` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FreqFile {
    omega: Vec<f64>,
    tau: f64,
    kmax: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::schema(vec![format!("{}: {e}", path.display())]))
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::schema(vec![format!("missing --{flag}")]))
}

fn separatrix_from(path: &Path) -> Result<SeparatrixMap, CliError> {
    let u: FourierTable = read_json(path)?;
    let prof = analyze_potential(&u).map_err(|e| CliError::stage("separatrix", e))?;
    separatrix_function(&prof).map_err(|e| CliError::stage("separatrix", e))
}

fn timemap(potential: &Path, samples: usize, out: &Path) -> Result<(), CliError> {
    let sep = separatrix_from(potential)?;
    let mut csv = String::from("x,s,chi,psi\n");
    for j in 0..samples {
        let x = 2.0 * std::f64::consts::PI * (j + 1) as f64 / (samples + 1) as f64;
        let s = sep.time_map(x).map_err(|e| CliError::stage("separatrix", e))?;
        csv.push_str(&format!("{},{},{},{}\n", fmt17(x), fmt17(s), fmt17(sep.chi(s)), fmt17(sep.psi_at(x))));
    }
    write(out, &csv)
}

/// `max_k |(−λ·shift + i⟨k,ω⟩) u_k − v_k| / max|v|` over the table modes.
fn table_residual(u: &FourierTable, v: &FourierTable, freq: &Frequency, shift: f64) -> f64 {
    let mut worst = 0.0f64;
    for (k, vk) in v.modes() {
        let a = num_complex::Complex64::new(-shift, freq.dot(&k));
        let lhs = if shift == 0.0 && k.iter().all(|x| *x == 0) { vk } else { a * u.get(&k) };
        worst = worst.max((lhs - vk).norm());
    }
    worst / v.max_abs().max(1e-300)
}

#[allow(clippy::too_many_arguments)]
fn homological(
    op: HomologicalOp,
    input: &Path,
    freq: &Path,
    lambda: f64,
    rho: f64,
    potential: Option<&Path>,
    nx: usize,
    kcut: usize,
    residual: bool,
    out: &Path,
) -> Result<(), CliError> {
    let ff: FreqFile = read_json(freq)?;
    let freq = Frequency::new(ff.omega, ff.tau, ff.kmax).map_err(|e| CliError::stage("homological", e))?;
    let st = |e| CliError::stage("homological", e);
    let (text, res) = match op {
        HomologicalOp::Domega => {
            let v: FourierTable = read_json(input)?;
            let u = solve_domega(&v, &freq).map_err(st)?;
            let r = table_residual(&u, &v, &freq, 0.0);
            (to_json(&u), r)
        }
        HomologicalOp::Shifted => {
            let v: FourierTable = read_json(input)?;
            let u = solve_shifted(&v, lambda, &freq).map_err(st)?;
            let r = table_residual(&u, &v, &freq, lambda);
            (to_json(&u), r)
        }
        HomologicalOp::Transport => {
            let v: FourierTable = read_json(input)?;
            let sep = separatrix_from(potential.ok_or_else(|| CliError::schema(vec!["transport needs --potential".into()]))?)?;
            let chart = crate::kam::ChartSpec::around(&sep, sep.t, nx, freq.n(), kcut).chart();
            let sol = solve_transport(&v, lambda, &freq, &sep, &chart).map_err(st)?;
            let r = transport_residual(&chart, &sep, lambda, &freq, &sol, &v);
            #[derive(Serialize)]
            struct Out<'a> {
                u: &'a crate::chart::Field,
                c: f64,
            }
            (to_json(&Out { u: &sol.u, c: sol.c }), r)
        }
        HomologicalOp::Cauchy => {
            let v: CylinderField = read_json(input)?;
            let u = solve_cauchy(&v, lambda, &freq.omega, rho).map_err(st)?;
            let r = cauchy_residual(&u, &v, lambda, &freq.omega);
            (to_json(&u), r)
        }
    };
    write(out, &text)?;
    if residual {
        println!("residual {}", fmt17(res));
    }
    Ok(())
}

fn normalform(exp: &Experiment, out: &Path) -> Result<(), CliError> {
    let mut entries = Vec::new();
    for &eps in &exp.config.eps_list {
        let p = prepare(exp, eps)?;
        entries.push(NormalFormEntry {
            eps,
            omega1: p.scaled.omega1.clone(),
            r0: p.scaled.r0,
            lambda: p.red.sep.lambda,
            theta: p.red.theta.clone(),
            h_nu: p.averaged.as_ref().map_or(p.scaled.jet.clone(), |a| a.h_nu.clone()),
            h_theta: p.red.h_theta.clone(),
        });
    }
    write(out, &to_json(&entries))
}

fn kam(exp: &Experiment, out: &Path, diagnostics: Option<&Path>) -> Result<(), CliError> {
    let eps = exp.config.eps_list[0];
    let p = prepare(exp, eps)?;
    let man = compute_manifolds(&p.red, &p.freq, &exp.split_config()).map_err(|e| CliError::stage("kam", e))?;
    let file = ManifoldFile {
        eps,
        unstable: man.unstable.total.clone(),
        stable_plus: man.plus.total.clone(),
        stable_minus: man.minus.total.clone(),
        residuals: vec![man.unstable.residual, man.plus.residual, man.minus.residual],
        xi_mismatch: man.xi_mismatch,
        c0_mismatch: man.c0_mismatch,
        stop: vec![man.unstable.diag.stop.clone(), man.plus.diag.stop.clone(), man.minus.diag.stop.clone()],
    };
    write(out, &to_json(&file))?;
    if let Some(d) = diagnostics {
        write(d, &man.unstable.diag.to_csv())?;
    }
    let tol = exp.config.tolerances.residual;
    if let Some(r) = file.residuals.iter().find(|r| **r >= tol) {
        return Err(CliError { stage: "kam", code: 1, messages: vec![format!("hj_residual {} ≥ {tol}", fmt17(*r))] });
    }
    Ok(())
}

fn failed(stage: &'static str, checks: &[Check]) -> Result<(), CliError> {
    let bad: Vec<String> =
        checks.iter().filter(|c| !c.pass).map(|c| format!("{} = {} violates {}", c.name, fmt17(c.value), fmt17(c.limit))).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError { stage, code: 1, messages: bad })
    }
}

fn split_cmd(exp: &Experiment, out: &Path) -> Result<(), CliError> {
    let eps = exp.config.eps_list[0];
    let p = prepare(exp, eps)?;
    let (_, report) = split(&p.red, &p.freq, &exp.split_config()).map_err(|e| CliError::stage("splitting", e))?;
    let checks = checks(exp, &report);
    write(out, &to_json(&SplitFile { eps, report, checks: checks.clone() }))?;
    failed("checks", &checks)
}

fn sweep_cmd(exp: &Experiment, out: &Path) -> Result<(), CliError> {
    let sw = sweep(exp)?;
    write(out, &sw.to_csv(exp.config.n))?;
    let all: Vec<Check> = sw.reports.iter().flat_map(|r| checks(exp, r)).collect();
    failed("checks", &all)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let out = || need(&cli.out, "out");
    let experiment = || load(need(&cli.config, "config")?);
    match &cli.command {
        Command::Timemap { potential, samples } => timemap(potential, *samples, out()?),
        Command::Homological { op, input, freq, lambda, rho, potential, nx, kcut, residual } => {
            homological(*op, input, freq, *lambda, *rho, potential.as_deref(), *nx, *kcut, *residual, out()?)
        }
        Command::Normalform => normalform(&experiment()?, out()?),
        Command::Kam { diagnostics } => kam(&experiment()?, out()?, diagnostics.as_deref()),
        Command::Split => split_cmd(&experiment()?, out()?),
        Command::SweepEps => sweep_cmd(&experiment()?, out()?),
        Command::Validate => {
            experiment()?;
            println!("ok");
            Ok(())
        }
    }
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: &Cli) -> i32 {
    let level = match cli.log_level {
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.code
        }
    }
}
