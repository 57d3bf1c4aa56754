//! Splitting potential of the perturbed separatrix branches.
//!
//! The unstable whisker is the graph of `dS₀` over the chart around the
//! torus at `x = 0`.  The stable whisker arriving along branch `β` is the
//! graph of `dS_β` over the chart of the translated Hamiltonian
//! `H(y, I, x + 2πβ, φ)` run with `−λ`; since the translation does not touch
//! the momenta, in the original chart it is the graph of `dS_β(x − 2πβ, φ)`.
//! Their difference `𝔖_β = S₀ − S_β(· − 2πβ)` is sampled over the bounded
//! cylinder `|s| ≤ T′` in energy time.  The lower branch uses the real part
//! of the time map, i.e. it is stored over `Im s = π` relabeled onto the
//! same real rectangle.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chart::Coeffs;
use crate::error::{Error, Result};
use crate::homological::{solve_cauchy, CylinderField, Frequency};
use crate::kam::{kam_iterate, ChartJet, ChartSpec, KamOptions, KamRun};
use crate::normalform::{theta_branch, Reduced};
use crate::separatrix::SeparatrixMap;
use crate::series::FourierTable;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Numerical parameters of the splitting stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Chebyshev nodes of the KAM charts.
    pub nx: usize,
    /// Fourier cutoff in φ.
    pub kcut: usize,
    /// Half-width `T′` of the cylinder as a fraction of the chart window.
    pub window: f64,
    /// Chebyshev nodes in `s` on the cylinder.
    pub s_nodes: usize,
    /// Half-width (in `Im(x/2)`) of the strip used for `ρ`, `σ₂`.
    pub strip_halfwidth: f64,
    /// Height of the vertical segment in the flow-box Cauchy solves.
    pub flowbox_rho: f64,
    pub kam: KamOptions,
    /// Seeds per angle for the critical-point search.
    pub seeds: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            nx: 64,
            kcut: 8,
            window: 1.0,
            s_nodes: 48,
            strip_halfwidth: 3.0,
            flowbox_rho: 0.25,
            kam: KamOptions::default(),
            seeds: 8,
        }
    }
}

/// The three whiskers.
#[derive(Debug, Clone)]
pub struct Manifolds {
    pub spec: ChartSpec,
    pub h0: ChartJet,
    pub unstable: KamRun,
    /// Stable whiskers for `β = +1` and `β = −1`.
    pub plus: KamRun,
    pub minus: KamRun,
    pub xi_mismatch: f64,
    pub c0_mismatch: f64,
}

impl Manifolds {
    pub fn stable(&self, beta: i8) -> &KamRun {
        if beta > 0 {
            &self.plus
        } else {
            &self.minus
        }
    }
}

/// Runs the KAM iteration on `H₀` and on both translated branches
/// concurrently.  Raises an exactness violation if the cohomology classes
/// differ by more than `1e−6`.
pub fn compute_manifolds(red: &Reduced, freq: &Frequency, cfg: &SplitConfig) -> Result<Manifolds> {
    let sep = &red.sep;
    let n = freq.n();
    let spec = ChartSpec::around(sep, sep.t, cfg.nx, n, cfg.kcut);
    let lam = sep.lambda;
    let h0 = ChartJet::from_jet(&red.h_theta, spec, lam, &freq.omega)?;
    let hp = ChartJet::from_jet(&theta_branch(&red.h_theta, 1), spec, -lam, &freq.omega)?;
    let hm = ChartJet::from_jet(&theta_branch(&red.h_theta, -1), spec, -lam, &freq.omega)?;
    let (r0, (rp, rm)) = rayon::join(
        || kam_iterate(&h0, sep, freq, &cfg.kam),
        || rayon::join(|| kam_iterate(&hp, sep, freq, &cfg.kam), || kam_iterate(&hm, sep, freq, &cfg.kam)),
    );
    let (unstable, plus, minus) = (r0?, rp?, rm?);
    let mut xi_mismatch = 0.0f64;
    let mut c0_mismatch = 0.0f64;
    for r in [&plus, &minus] {
        for (a, b) in unstable.total.xi.iter().zip(&r.total.xi) {
            xi_mismatch = xi_mismatch.max((a - b).abs());
        }
        c0_mismatch = c0_mismatch.max((unstable.total.c0 - r.total.c0).abs());
    }
    log::info!("manifolds: ξ mismatch {xi_mismatch:.3e}, c₀ mismatch {c0_mismatch:.3e}");
    if xi_mismatch > 1e-6 {
        return Err(Error::Exactness(format!("ξ differs by {xi_mismatch:.3e} across branches")));
    }
    Ok(Manifolds { spec, h0, unstable, plus, minus, xi_mismatch, c0_mismatch })
}

/// Uniform φ grid size able to hold modes up to `kcut`.
fn phi_grid(kcut: usize) -> usize {
    crate::series::fft_size(2 * kcut + 2)
}

/// Lobatto nodes in `s` used by [`CylinderField::from_mode_fns`].
fn s_nodes(t: f64, nodes: usize) -> Vec<f64> {
    (0..=nodes).map(|j| -t * (PI * j as f64 / nodes as f64).cos()).collect()
}

/// Samples `f(s, φ)` into a cylinder field with modes `|k|∞ ≤ kcut`.
pub fn cylinder_from_fn(t: f64, nodes: usize, n: usize, kcut: usize, f: impl Fn(f64, &[f64]) -> f64 + Sync) -> CylinderField {
    let m = phi_grid(kcut);
    let grid = vec![m; n];
    let cut = vec![kcut; n];
    let ss = s_nodes(t, nodes);
    let tables: Vec<FourierTable> = ss.par_iter().map(|&s| FourierTable::from_fn(&cut, &grid, |p| f(s, p))).collect();
    let modes: Vec<Vec<i64>> = tables[0].modes().map(|(k, _)| k).collect();
    CylinderField::from_mode_fns(t, nodes, &modes, |mi, s| {
        let j = ss.iter().position(|v| *v == s).expect("sampled node");
        tables[j].get(&modes[mi])
    })
}

/// `∂_s u` at a real point.
fn cyl_ds(u: &CylinderField, s: f64, phi: &[f64]) -> f64 {
    u.modes
        .iter()
        .map(|m| {
            let ph: f64 = m.k.iter().zip(phi).map(|(a, b)| *a as f64 * b).sum();
            (m.deriv(Complex64::new(s, 0.0), u.t) * Complex64::from_polar(1.0, ph)).re
        })
        .sum()
}

/// `∂_{φ_a} u` at a real point.
fn cyl_dphi(u: &CylinderField, a: usize, s: f64, phi: &[f64]) -> f64 {
    u.modes
        .iter()
        .map(|m| {
            let ph: f64 = m.k.iter().zip(phi).map(|(a, b)| *a as f64 * b).sum();
            (m.eval(Complex64::new(s, 0.0), u.t) * Complex64::from_polar(1.0, ph) * I * m.k[a] as f64).re
        })
        .sum()
}

/// Sup of the non-constant part of `u` on a check grid.
pub fn cyl_sup(u: &CylinderField) -> f64 {
    let n = u.modes.first().map_or(0, |m| m.k.len());
    let mut worst = 0.0f64;
    for (s, phi) in check_grid(u.t, n, 17, 16) {
        let v: f64 = u
            .modes
            .iter()
            .filter(|m| m.k.iter().any(|x| *x != 0))
            .map(|m| {
                let ph: f64 = m.k.iter().zip(&phi).map(|(a, b)| *a as f64 * b).sum();
                (m.eval(Complex64::new(s, 0.0), u.t) * Complex64::from_polar(1.0, ph)).re
            })
            .sum();
        worst = worst.max(v.abs());
    }
    worst
}

/// Real check points: `ns` values of `s` (uniform, endpoints included) ×
/// `np` angles per dimension.
fn check_grid(t: f64, n: usize, ns: usize, np: usize) -> Vec<(f64, Vec<f64>)> {
    let mut out = Vec::new();
    let total = np.pow(n as u32);
    for i in 0..ns {
        let s = -t + 2.0 * t * i as f64 / (ns - 1) as f64;
        for g in 0..total {
            let mut r = g;
            let mut phi = vec![0.0; n];
            for a in (0..n).rev() {
                phi[a] = 2.0 * PI * (r % np) as f64 / np as f64 + 0.1;
                r /= np;
            }
            out.push((s, phi));
        }
    }
    out
}

fn branch_window(man: &Manifolds, sep: &SeparatrixMap, cfg: &SplitConfig) -> Result<f64> {
    if !(cfg.window > 0.0 && cfg.window <= 1.0) {
        return Err(Error::Window(format!("window fraction {} must lie in (0, 1]", cfg.window)));
    }
    let t = cfg.window * sep.t;
    let (lo, hi) = sep.chart_bounds(t);
    if lo < man.spec.lo - 1e-12 || hi > man.spec.hi + 1e-12 {
        return Err(Error::Window(format!("|s| ≤ {t} leaves the chart")));
    }
    Ok(t)
}

/// `𝔖_β(s, φ) = Ŝ₀(x_β(s), φ) − Ŝ_β(x_β(s) − 2πβ, φ)` over `|s| ≤ T′`,
/// where `x_β` is the upper (`β = +1`) or lower (`β = −1`) branch.
pub fn splitting_potential(man: &Manifolds, sep: &SeparatrixMap, beta: i8, cfg: &SplitConfig) -> Result<CylinderField> {
    if beta != 1 && beta != -1 {
        return Err(Error::Domain(format!("β = {beta} must be ±1")));
    }
    let t = branch_window(man, sep, cfg)?;
    let chart = man.spec.chart();
    let c0 = chart.coeffs(&man.unstable.total.s_hat);
    let cb = chart.coeffs(&man.stable(beta).total.s_hat);
    let shift = 2.0 * PI * beta as f64;
    let upper = beta > 0;
    let n = man.spec.n;
    Ok(cylinder_from_fn(t, cfg.s_nodes, n, cfg.kcut, |s, phi| {
        let x = sep.branch_x(s, upper);
        c0.eval(x, phi) - cb.eval(x - shift, phi)
    }))
}

/// Absolute round-off level of `𝔖_β`, a difference of two generating
/// functions of size `sup|Ŝ|`.
pub fn roundoff_floor(man: &Manifolds, beta: i8) -> f64 {
    let scale = man.unstable.total.s_hat.max_abs().max(man.stable(beta).total.s_hat.max_abs());
    ROUNDOFF_FLOOR * f64::EPSILON * scale
}

/// Transport coefficients along the averaged graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transport {
    /// `λ_μ` followed by the components of `ω_μ` (s-time convention).
    pub g: Vec<CylinderField>,
    /// Constant parts absorbed into `(λ̃, ω̃)`.
    pub lambda_tilde: f64,
    pub omega_tilde: Vec<f64>,
    /// `max |(λ+λ_μ)∂_s𝔖 + ⟨ω+ω_μ, ∂_φ𝔖⟩| / ‖𝔖‖` on the check grid.
    pub residual: f64,
    /// Round-off floor of the residual, in the same units.
    pub floor: f64,
    /// `sup |(λ_μ, ω_μ)|`.
    pub size: f64,
}

/// Mean over `s ∈ [−T, T]` of the zero φ-mode.
fn constant_part(u: &CylinderField) -> f64 {
    let Some(m) = u.modes.iter().find(|m| m.k.iter().all(|v| *v == 0)) else { return 0.0 };
    let nq = 64;
    (0..nq)
        .map(|j| {
            let s = -u.t + u.t * (2 * j + 1) as f64 / nq as f64;
            m.eval(Complex64::new(s, 0.0), u.t).re
        })
        .sum::<f64>()
        / nq as f64
}

fn subtract_constant(u: &CylinderField, c: f64) -> CylinderField {
    let mut out = u.clone();
    if let Some(m) = out.modes.iter_mut().find(|m| m.k.iter().all(|v| *v == 0)) {
        m.poly[0] -= c;
    }
    out
}

/// `V = X + Q p̄` with `p̄ = ½(dS₀ + dS_β)`: then `⟨V, d𝔖⟩ = 0` exactly for a
/// quadratic Hamiltonian whose two graphs share the energy.  In energy time
/// `λ + λ_μ = V_y/ψ`, `ω + ω_μ = V_I`.  The constant parts of `(λ_μ, ω_μ)`
/// are absorbed into `(λ̃, ω̃)`.
pub fn transport_coefficients(man: &Manifolds, sep: &SeparatrixMap, beta: i8, frak: &CylinderField, cfg: &SplitConfig) -> Result<Transport> {
    let t = frak.t;
    let h0 = &man.h0;
    let chart = &h0.chart;
    let n = chart.n;
    let k = n + 1;
    let upper = beta > 0;
    let shift = 2.0 * PI * beta as f64;
    let grad = |s_hat: &crate::chart::Field| -> Vec<Coeffs> { chart.grad(s_hat).iter().map(|g| chart.coeffs(g)).collect() };
    let d0 = grad(&man.unstable.total.s_hat);
    let db = grad(&man.stable(beta).total.s_hat);
    let xc: Vec<Coeffs> = h0.x.iter().map(|f| chart.coeffs(f)).collect();
    let qc: Vec<Vec<Coeffs>> = h0.q.iter().map(|r| r.iter().map(|f| chart.coeffs(f)).collect()).collect();
    let xi0 = man.unstable.total.xi.clone();
    let xib = man.stable(beta).total.xi.clone();
    let lam = h0.lambda;
    let omega = h0.omega.clone();
    let field = |s: f64, phi: &[f64]| -> Vec<f64> {
        let x = sep.branch_x(s, upper);
        let refs0: Vec<&Coeffs> = d0.iter().chain(xc.iter()).chain(qc.iter().flatten()).collect();
        let v0 = chart.eval_many(&refs0, x, phi);
        let refsb: Vec<&Coeffs> = db.iter().collect();
        let vb = chart.eval_many(&refsb, x - shift, phi);
        let mut pbar: Vec<f64> = (0..k).map(|i| 0.5 * (v0[i] + vb[i])).collect();
        for a in 0..n {
            pbar[a + 1] += 0.5 * (xi0[a] + xib[a]);
        }
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let mut v = v0[k + i];
            for j in 0..k {
                v += v0[2 * k + i * k + j] * pbar[j];
            }
            out.push(v);
        }
        let psi = sep.psi_at(x);
        let mut g = vec![out[0] / psi - lam];
        for a in 0..n {
            g.push(out[a + 1] - omega[a]);
        }
        g
    };
    let g: Vec<CylinderField> = (0..k).map(|c| cylinder_from_fn(t, cfg.s_nodes, n, cfg.kcut, |s, p| field(s, p)[c])).collect();
    let consts: Vec<f64> = g.iter().map(constant_part).collect();
    let lambda_tilde = lam + consts[0];
    let omega_tilde: Vec<f64> = (0..n).map(|a| omega[a] + consts[a + 1]).collect();
    let g: Vec<CylinderField> = g.iter().zip(&consts).map(|(u, c)| subtract_constant(u, *c)).collect();
    // Residual of the transport equation on the check grid.
    let norm = cyl_sup(frak).max(f64::MIN_POSITIVE);
    // Differentiating round-off amplifies it by `N²/T` in s and `kcut` in φ.
    let speed = lambda_tilde.abs() * (cfg.s_nodes * cfg.s_nodes) as f64 / t
        + omega_tilde.iter().map(|w| w.abs()).sum::<f64>() * cfg.kcut as f64;
    let mut worst = 0.0f64;
    let mut size = 0.0f64;
    for (s, phi) in check_grid(t, n, 13, 12) {
        let gv: Vec<f64> = g.iter().map(|u| u.eval(s, &phi)).collect();
        let mut r = (lambda_tilde + gv[0]) * cyl_ds(frak, s, &phi);
        for a in 0..n {
            r += (omega_tilde[a] + gv[a + 1]) * cyl_dphi(frak, a, s, &phi);
        }
        worst = worst.max(r.abs());
        size = size.max(gv.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let size = size.max(consts.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let floor = roundoff_floor(man, beta) * speed;
    log::debug!("transport (β = {beta}): residual {worst:.3e}, ‖𝔖‖ {norm:.3e}, floor {floor:.3e}, |g| {size:.3e}");
    if worst > (1e-7 * norm).max(floor) {
        return Err(Error::TransportCheck(format!("residual {:.3e}·‖𝔖‖ above the round-off floor {floor:.3e}", worst / norm)));
    }
    let (residual, floor) = if norm > f64::MIN_POSITIVE { (worst / norm, floor / norm) } else { (worst, floor) };
    Ok(Transport { g, lambda_tilde, omega_tilde, residual, floor, size })
}

/// Flow-box base map `a = id + b` on the cylinder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowBox {
    /// Components `(b_s, b_φ₁, …)`.
    pub b: Vec<CylinderField>,
    /// `max |Da⁻¹(x₀ + g)∘a − x₀|` on the check grid.
    pub residual: f64,
    pub iterations: usize,
    pub b_sup: f64,
}

/// Solves `λ∂_s b + ω·∂_φ b = g∘(id + b)` by fixed-point iteration with
/// [`solve_cauchy`] per component, so that `a = id + b` conjugates the
/// field `x₀ + g` to the constant field `x₀ = (λ, ω)`.
///
/// `g` must have zero constant part (mean over the cylinder of its zero
/// φ-mode): a constant shift is not removable.
pub fn flowbox_conjugate(g: &[CylinderField], lambda: f64, omega: &[f64], rho: f64, nodes: usize, kcut: usize) -> Result<FlowBox> {
    let n = omega.len();
    if g.len() != n + 1 {
        return Err(Error::DimensionMismatch(format!("{} components for {n} angles", g.len())));
    }
    let t = g[0].t;
    let gsup = g.iter().map(cyl_sup_all).fold(0.0f64, f64::max);
    for (c, u) in g.iter().enumerate() {
        let cp = constant_part(u);
        if cp.abs() > 1e-12 * gsup.max(1e-300) && cp.abs() > 1e-300 {
            return Err(Error::ConstantObstruction(format!("component {c} has constant part {cp:.3e}")));
        }
    }
    let zero = CylinderField { t, modes: vec![] };
    let mut b: Vec<CylinderField> = vec![zero; n + 1];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    if gsup == 0.0 {
        return Ok(FlowBox { b, residual: 0.0, iterations: 0, b_sup: 0.0 });
    }
    for it in 0..30 {
        iterations = it + 1;
        let next: Vec<CylinderField> = (0..=n)
            .map(|c| {
                let rhs = cylinder_from_fn(t, nodes, n, kcut, |s, phi| {
                    let bs = b[0].eval(s, phi);
                    let bp: Vec<f64> = (0..n).map(|a| phi[a] + b[a + 1].eval(s, phi)).collect();
                    g[c].eval(s + bs, &bp)
                });
                solve_cauchy(&rhs, lambda, omega, rho)
            })
            .collect::<Result<Vec<_>>>()?;
        let change = (0..=n)
            .map(|c| {
                check_grid(t, n, 9, 8).iter().fold(0.0f64, |m, (s, p)| m.max((next[c].eval(*s, p) - b[c].eval(*s, p)).abs()))
            })
            .fold(0.0f64, f64::max);
        b = next;
        residual = flowbox_residual(g, &b, lambda, omega);
        log::debug!("flow-box iteration {it}: change {change:.3e}, residual {residual:.3e}");
        if residual < 1e-13 * (1.0 + gsup) || change < 1e-16 {
            break;
        }
    }
    if !residual.is_finite() || residual > 1e-9 {
        return Err(Error::FlowBox(format!("residual {residual:.3e} after {iterations} iterations")));
    }
    let b_sup = b.iter().map(cyl_sup_all).fold(0.0f64, f64::max);
    Ok(FlowBox { b, residual, iterations, b_sup })
}

fn cyl_sup_all(u: &CylinderField) -> f64 {
    let n = u.modes.first().map_or(0, |m| m.k.len());
    check_grid(u.t, n, 17, 16).iter().fold(0.0f64, |m, (s, p)| m.max(u.eval(*s, p).abs()))
}

/// `max |Da⁻¹ (g∘a − Db·x₀)|` on the check grid, which equals
/// `Da⁻¹(x₀ + g)∘a − x₀`.
pub fn flowbox_residual(g: &[CylinderField], b: &[CylinderField], lambda: f64, omega: &[f64]) -> f64 {
    let n = omega.len();
    let k = n + 1;
    let t = g[0].t;
    let mut x0 = vec![lambda];
    x0.extend_from_slice(omega);
    check_grid(t, n, 13, 12)
        .par_iter()
        .map(|(s, phi)| {
            let bs = b[0].eval(*s, phi);
            let bp: Vec<f64> = (0..n).map(|a| phi[a] + b[a + 1].eval(*s, phi)).collect();
            let da = DMatrix::from_fn(k, k, |r, c| {
                let d = if c == 0 { cyl_ds(&b[r], *s, phi) } else { cyl_dphi(&b[r], c - 1, *s, phi) };
                d + if r == c { 1.0 } else { 0.0 }
            });
            let rhs = DVector::from_fn(k, |r, _| {
                let dbx: f64 = (0..k).map(|c| (da[(r, c)] - if r == c { 1.0 } else { 0.0 }) * x0[c]).sum();
                g[r].eval(s + bs, &bp) - dbx
            });
            match da.lu().solve(&rhs) {
                Some(v) => v.amax(),
                None => f64::INFINITY,
            }
        })
        .reduce(|| 0.0f64, f64::max)
}

/// One extracted coefficient of `𝔖′ = 𝔖∘a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCoeff {
    pub k: Vec<i64>,
    pub re: f64,
    pub im: f64,
    pub abs: f64,
    /// `C − |⟨k, ω/λ⟩|ρ′ − |k|σ′` with the calibrated constant `C`.
    pub bound_log: f64,
    /// `bound_log − log|𝔖′_k|`.
    pub slack: f64,
    pub ok: bool,
}

/// Result of [`fourier_decay`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decay {
    pub coeffs: Vec<ModeCoeff>,
    /// Largest deviation from constancy along characteristics, relative to
    /// `‖𝔖‖`.
    pub constancy: f64,
    /// Absolute round-off floor below which `𝔖` is not resolved.
    pub floor: f64,
    pub calibration: f64,
    /// The summed bound `Σ_k e^{C − |⟨k,ω/λ⟩|ρ′ − |k|σ′}` over `k ≠ 0`.
    pub summed_bound: f64,
    pub bound_ok: bool,
}

/// Coefficients below this fraction of the largest one are at the
/// round-off level of the sampled potential.
const DECAY_NOISE: f64 = 1e-9;

/// Round-off floor of `𝔖` in units of `ε_mach·sup|Ŝ|`.
const ROUNDOFF_FLOOR: f64 = 1e3;

/// Extracts `𝔖′_k` from `𝔖′ = 𝔖∘a` by projection along the
/// characteristics `φ − (ω/λ)s = const`, checks their constancy and the
/// per-mode exponential bound with one additive constant calibrated on the
/// largest mode.
///
/// `floor` is the absolute round-off level of `𝔖` (it is a difference of
/// two much larger generating functions): constancy defects and modes
/// below it are not resolved and are judged against it instead.
#[allow(clippy::too_many_arguments)]
pub fn fourier_decay(
    frak: &CylinderField,
    fb: &FlowBox,
    lambda: f64,
    omega: &[f64],
    rho_prime: f64,
    sigma_prime: f64,
    floor: f64,
    nodes: usize,
    kcut: usize,
) -> Result<Decay> {
    let n = omega.len();
    let t = frak.t;
    let norm = cyl_sup(frak);
    let pulled = if fb.b.iter().all(|u| u.modes.is_empty()) {
        frak.clone()
    } else {
        cylinder_from_fn(t, nodes, n, kcut, |s, phi| {
            let bs = fb.b[0].eval(s, phi);
            let bp: Vec<f64> = (0..n).map(|a| phi[a] + fb.b[a + 1].eval(s, phi)).collect();
            frak.eval(s + bs, &bp)
        })
    };
    let mut raw: Vec<(Vec<i64>, Complex64)> = Vec::new();
    let mut constancy = 0.0f64;
    let ns = 33;
    for m in &pulled.modes {
        if m.k.iter().all(|v| *v == 0) {
            continue;
        }
        let rate: f64 = m.k.iter().zip(omega).map(|(a, b)| *a as f64 * b).sum::<f64>() / lambda;
        let vals: Vec<Complex64> = (0..ns)
            .map(|j| {
                let s = -t + 2.0 * t * j as f64 / (ns - 1) as f64;
                m.eval(Complex64::new(s, 0.0), t) * (I * rate * s).exp()
            })
            .collect();
        let mean = vals.iter().sum::<Complex64>() / ns as f64;
        let dev = vals.iter().fold(0.0f64, |a, v| a.max((v - mean).norm()));
        constancy = constancy.max(dev);
        raw.push((m.k.clone(), mean));
    }
    if norm > 0.0 && constancy > (1e-8 * norm).max(floor) {
        return Err(Error::NotFlowBox(format!(
            "variance along characteristics {:.3e}·‖𝔖‖ above the round-off floor {floor:.3e}",
            constancy / norm
        )));
    }
    let constancy = if norm > 0.0 { constancy / norm } else { constancy };
    let expo = |k: &[i64]| -> f64 {
        let kw: f64 = k.iter().zip(omega).map(|(a, b)| *a as f64 * b).sum::<f64>() / lambda;
        let l1: i64 = k.iter().map(|v| v.abs()).sum();
        kw.abs() * rho_prime + l1 as f64 * sigma_prime
    };
    let biggest = raw.iter().fold(0.0f64, |m, (_, c)| m.max(c.norm()));
    // Ties (to round-off) are broken towards the slowest-decaying mode.
    let calibration = raw
        .iter()
        .filter(|(_, c)| biggest > 0.0 && c.norm() >= (1.0 - 1e-9) * biggest)
        .min_by(|a, b| expo(&a.0).total_cmp(&expo(&b.0)))
        .map_or(0.0, |(k, c)| c.norm().ln() + expo(k));
    let mut summed = 0.0;
    let coeffs: Vec<ModeCoeff> = raw
        .iter()
        .map(|(k, c)| {
            let bound_log = calibration - expo(k);
            summed += bound_log.exp();
            let abs = c.norm();
            // Coefficients in the round-off plateau are bounded by the noise.
            let noise = (DECAY_NOISE * biggest).max(floor);
            let slack = if biggest > 0.0 { bound_log - abs.max(noise).ln() } else { 0.0 };
            let ok = biggest == 0.0 || abs <= noise || slack >= -1e-9;
            ModeCoeff { k: k.clone(), re: c.re, im: c.im, abs, bound_log, slack, ok }
        })
        .collect();
    let bound_ok = coeffs.iter().all(|c| c.ok);
    Ok(Decay { coeffs, constancy, floor, calibration, summed_bound: summed, bound_ok })
}

/// A critical point of `φ ↦ 𝔖(s, φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub s: f64,
    pub phi: Vec<f64>,
    pub hessian_det: f64,
    /// Number of negative Hessian eigenvalues.
    pub index: usize,
}

/// Newton on `∂_φ𝔖(s, ·) = 0` from `seeds^n` starting points, deduplicated
/// modulo 2π.
pub fn critical_points(frak: &CylinderField, s: f64, seeds: usize) -> Result<Vec<CriticalPoint>> {
    let n = frak.modes.first().map_or(0, |m| m.k.len());
    if n == 0 {
        return Err(Error::DimensionMismatch("𝔖 has no angles".into()));
    }
    // Mode values at this s.
    let modes: Vec<(Vec<f64>, Complex64)> = frak
        .modes
        .iter()
        .map(|m| (m.k.iter().map(|v| *v as f64).collect(), m.eval(Complex64::new(s, 0.0), frak.t)))
        .filter(|(_, c)| c.norm() > 0.0)
        .collect();
    let scale = modes.iter().fold(0.0f64, |a, (k, c)| a.max(c.norm() * k.iter().map(|v| v * v).sum::<f64>()));
    if scale == 0.0 {
        return Err(Error::NoCriticalPoints(format!("𝔖(s = {s}, ·) is constant")));
    }
    let grad_hess = |phi: &[f64]| -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for (k, c) in &modes {
            let ph: f64 = k.iter().zip(phi).map(|(a, b)| a * b).sum();
            let e = c * Complex64::from_polar(1.0, ph);
            for a in 0..n {
                g[a] += (e * I * k[a]).re;
                for b in 0..n {
                    h[(a, b)] -= (e * k[a] * k[b]).re;
                }
            }
        }
        (g, h)
    };
    let mut found: Vec<CriticalPoint> = Vec::new();
    let total = seeds.pow(n as u32);
    let mut converged_any = false;
    for sidx in 0..total {
        let mut r = sidx;
        let mut phi = vec![0.0; n];
        for a in (0..n).rev() {
            phi[a] = 2.0 * PI * ((r % seeds) as f64 + 0.25) / seeds as f64;
            r /= seeds;
        }
        let mut ok = false;
        for _ in 0..60 {
            let (g, h) = grad_hess(&phi);
            if g.amax() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
                ok = true;
                break;
            }
            let Some(step) = h.clone().lu().solve(&g) else { break };
            // Damp steps larger than a quarter turn.
            let len = step.amax();
            let damp = if len > 0.5 { 0.5 / len } else { 1.0 };
            for a in 0..n {
                phi[a] -= damp * step[a];
            }
        }
        if !ok {
            continue;
        }
        converged_any = true;
        for p in phi.iter_mut() {
            *p = p.rem_euclid(2.0 * PI);
            if 2.0 * PI - *p < 1e-12 {
                *p = 0.0;
            }
        }
        let dup = found.iter().any(|c| {
            c.phi.iter().zip(&phi).all(|(a, b)| {
                let d = (a - b).rem_euclid(2.0 * PI);
                d.min(2.0 * PI - d) < 1e-7
            })
        });
        if !dup {
            let (_, h) = grad_hess(&phi);
            let ev = h.clone().symmetric_eigenvalues();
            let index = ev.iter().filter(|v| **v < 0.0).count();
            found.push(CriticalPoint { s, phi, hessian_det: h.determinant(), index });
        }
    }
    if !converged_any {
        return Err(Error::NoCriticalPoints(format!("Newton failed from all {total} seeds at s = {s}")));
    }
    found.sort_by(|a, b| a.phi.partial_cmp(&b.phi).expect("finite angles"));
    Ok(found)
}

/// First-order prediction `M(φ) = −∫ f(x(λt), φ + ωt) dt` along the upper
/// unperturbed separatrix (`x(s)` the inverse energy-time map), per φ-mode,
/// with `f` the momentum-free term of an x-representation jet table.  It
/// predicts `𝔖₊(0, φ)` up to an additive constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Melnikov {
    pub table: FourierTable,
    /// Agreement with the half-resolution quadrature, relative.
    pub self_check: f64,
    pub tail: f64,
}

/// Evaluates the φ-mode `k` profile `f_k(x)` of an x-representation table,
/// including the shear factor `e^{i⟨k,θ⟩x}`.
fn mode_profile(f: &FourierTable, k: &[i64], shear: &[f64], x: f64) -> Complex64 {
    let mut v = Complex64::new(0.0, 0.0);
    for (kk, c) in f.modes() {
        if c.norm() == 0.0 || kk[1..] != *k {
            continue;
        }
        v += c * Complex64::from_polar(1.0, kk[0] as f64 * x / 2.0);
    }
    let th: f64 = k.iter().zip(shear).map(|(a, b)| *a as f64 * b).sum();
    v * Complex64::from_polar(1.0, th * x)
}

fn melnikov_quadrature(f: &FourierTable, shear: &[f64], sep: &SeparatrixMap, omega: &[f64], k: &[i64], npts: usize, tmax: f64) -> Complex64 {
    let h = 2.0 * tmax / npts as f64;
    let a: f64 = k.iter().zip(omega).map(|(u, v)| *u as f64 * v).sum();
    let mut s = Complex64::new(0.0, 0.0);
    for j in 0..=npts {
        let t = -tmax + h * j as f64;
        let w = if j == 0 || j == npts { 0.5 } else { 1.0 };
        let x = sep.inverse_time_map(sep.lambda * t);
        s += mode_profile(f, k, shear, x) * Complex64::from_polar(1.0, a * t) * w;
    }
    -s * h
}

/// Melnikov potential of the momentum-free term `f` of a reduced jet.
pub fn melnikov_oracle(f: &FourierTable, shear: &[f64], sep: &SeparatrixMap, omega: &[f64]) -> Result<Melnikov> {
    let n = omega.len();
    if f.dims() != n + 1 {
        return Err(Error::DimensionMismatch(format!("table has {} dims, expected {}", f.dims(), n + 1)));
    }
    let cut = f.cutoffs()[1..].to_vec();
    let mut table = FourierTable::zeros(n, &cut);
    let tmax = 40.0 / sep.lambda;
    let npts = 4096;
    let mut self_check = 0.0f64;
    let mut tail = 0.0f64;
    let modes: Vec<Vec<i64>> = table.modes().map(|(k, _)| k).filter(|k| k.iter().any(|v| *v != 0)).collect();
    let results: Vec<(Vec<i64>, Complex64, Complex64, f64)> = modes
        .par_iter()
        .filter(|k| {
            // Only half of the modes; the rest follow by conjugation.
            k.iter().find(|v| **v != 0).is_some_and(|v| *v > 0)
        })
        .map(|k| {
            let fine = melnikov_quadrature(f, shear, sep, omega, k, npts, tmax);
            let coarse = melnikov_quadrature(f, shear, sep, omega, k, npts / 2, tmax);
            let edge = sep.lambda * tmax;
            let tl = (mode_profile(f, k, shear, sep.inverse_time_map(edge)).norm()
                + mode_profile(f, k, shear, sep.inverse_time_map(-edge)).norm())
                / sep.lambda;
            (k.clone(), fine, coarse, tl)
        })
        .collect();
    let scale = results.iter().fold(0.0f64, |m, r| m.max(r.1.norm()));
    for (k, fine, coarse, tl) in results {
        if scale > 0.0 {
            self_check = self_check.max((fine - coarse).norm() / scale);
            tail = tail.max(tl / scale);
        }
        table.set(&k, fine);
    }
    if scale > 0.0 && tail > 1e-12 {
        return Err(Error::Tail(format!("tail estimate {tail:.3e} of the result")));
    }
    Ok(Melnikov { table, self_check, tail })
}

/// `max_φ |𝔖(0, φ) − M(φ)| / max_φ |M|`, both without their φ-means.
pub fn melnikov_deviation(frak: &CylinderField, mel: &FourierTable) -> f64 {
    let n = mel.dims();
    let grid = 64usize;
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    let total = grid.pow(n as u32);
    let mean_s: f64 = (0..total).map(|g| frak.eval(0.0, &grid_point(g, n, grid))).sum::<f64>() / total as f64;
    let mean_m = mel.average();
    for g in 0..total {
        let phi = grid_point(g, n, grid);
        let a = frak.eval(0.0, &phi) - mean_s;
        let b = mel.eval(&phi) - mean_m;
        worst = worst.max((a - b).abs());
        scale = scale.max(b.abs());
    }
    worst / scale.max(f64::MIN_POSITIVE)
}

fn grid_point(mut g: usize, n: usize, grid: usize) -> Vec<f64> {
    let mut phi = vec![0.0; n];
    for a in (0..n).rev() {
        phi[a] = 2.0 * PI * (g % grid) as f64 / grid as f64;
        g /= grid;
    }
    phi
}

/// Everything measured on one branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub beta: i8,
    pub xi: Vec<f64>,
    pub c0: f64,
    pub s_frak: CylinderField,
    pub norm: f64,
    pub transport_residual: f64,
    /// Round-off floor of `transport_residual`.
    pub transport_floor: f64,
    pub transport_size: f64,
    pub lambda_tilde: f64,
    pub omega_tilde: Vec<f64>,
    pub flowbox_residual: f64,
    pub flowbox_b: f64,
    pub decay: Decay,
    pub critical_points: Vec<CriticalPoint>,
    /// `|∮ d𝔖|` over each φ-cycle.
    pub loop_integral: f64,
}

/// Report of a splitting run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplittingReport {
    pub xi0: Vec<f64>,
    pub c0_0: f64,
    pub xi_mismatch: f64,
    pub c0_mismatch: f64,
    pub rho_prime: f64,
    pub sigma_prime: f64,
    /// Total analyticity spend of the three KAM runs.
    pub spend: f64,
    pub kam_residuals: Vec<f64>,
    pub branches: Vec<BranchReport>,
    pub bound_ok: bool,
    pub n_critical: usize,
}

/// Full splitting stage on reduced data.
pub fn split(red: &Reduced, freq: &Frequency, cfg: &SplitConfig) -> Result<(Manifolds, SplittingReport)> {
    let sep = &red.sep;
    let man = compute_manifolds(red, freq, cfg)?;
    let strip = sep.estimate_strip(cfg.strip_halfwidth, sep.t)?;
    let spend = man.unstable.diag.spend.max(man.plus.diag.spend).max(man.minus.diag.spend);
    let rho_prime = strip.rho - spend;
    let sigma_prime = (strip.sigma2 - spend).max(0.0);
    let mut branches = Vec::new();
    for beta in [1i8, -1] {
        let frak = splitting_potential(&man, sep, beta, cfg)?;
        let norm = cyl_sup(&frak);
        let tr = transport_coefficients(&man, sep, beta, &frak, cfg)?;
        let fb = flowbox_conjugate(&tr.g, tr.lambda_tilde, &tr.omega_tilde, cfg.flowbox_rho, cfg.s_nodes, cfg.kcut)?;
        let floor = roundoff_floor(&man, beta);
        let decay = fourier_decay(&frak, &fb, tr.lambda_tilde, &tr.omega_tilde, rho_prime, sigma_prime, floor, cfg.s_nodes, cfg.kcut)?;
        let cps = if norm > 0.0 { critical_points(&frak, 0.0, cfg.seeds)? } else { vec![] };
        let xi_b = man.stable(beta).total.xi.clone();
        let loop_integral = man.unstable.total.xi.iter().zip(&xi_b).map(|(a, b)| 2.0 * PI * (a - b).abs()).fold(0.0, f64::max);
        log::info!(
            "branch β = {beta}: ‖𝔖‖ = {norm:.3e}, transport {:.3e}, flow-box {:.3e}, {} critical points",
            tr.residual,
            fb.residual,
            cps.len()
        );
        branches.push(BranchReport {
            beta,
            xi: xi_b,
            c0: man.stable(beta).total.c0,
            s_frak: frak,
            norm,
            transport_residual: tr.residual,
            transport_floor: tr.floor,
            transport_size: tr.size,
            lambda_tilde: tr.lambda_tilde,
            omega_tilde: tr.omega_tilde.clone(),
            flowbox_residual: fb.residual,
            flowbox_b: fb.b_sup,
            decay,
            critical_points: cps,
            loop_integral,
        });
    }
    let bound_ok = branches.iter().all(|b| b.decay.bound_ok);
    let n_critical = branches.iter().map(|b| b.critical_points.len()).sum();
    let report = SplittingReport {
        xi0: man.unstable.total.xi.clone(),
        c0_0: man.unstable.total.c0,
        xi_mismatch: man.xi_mismatch,
        c0_mismatch: man.c0_mismatch,
        rho_prime,
        sigma_prime,
        spend,
        kam_residuals: vec![man.unstable.residual, man.plus.residual, man.minus.residual],
        branches,
        bound_ok,
        n_critical,
    };
    Ok((man, report))
}

/// Builds a cylinder field with one mode pair `a·cos(⟨k, φ⟩ − r s)` (a
/// planted signal for extraction tests).
pub fn planted(t: f64, nodes: usize, n: usize, kcut: usize, k: &[i64], amp: f64, rate: f64) -> CylinderField {
    cylinder_from_fn(t, nodes, n, kcut, |s, phi| {
        let ph: f64 = k.iter().zip(phi).map(|(a, b)| *a as f64 * b).sum();
        amp * (ph - rate * s).cos()
    })
}

