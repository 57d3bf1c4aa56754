//! Right inverses of the small-divisor operators.
//!
//! * `D_ω` on the torus and its shifted version `-λ + D_ω`;
//! * the transport operator `D_{λ,ω} = λ∂_s + ω·∂_φ` on the bi-cylinder,
//!   both by characteristic quadrature (FourierTable input) and by
//!   Chebyshev collocation on a chart (the form used by the KAM engine);
//! * the Cauchy problem on a bounded cylinder with complex initial data.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chart::{Chart, Field};
use crate::error::{Error, Result};
use crate::separatrix::SeparatrixMap;
use crate::series::FourierTable;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Golub–Welsch).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = k as f64 / ((4 * k * k - 1) as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Symmetrize to remove eigen-solver round-off.
    let mut x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut w: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..n / 2 {
        let xm = 0.5 * (x[n - 1 - i] - x[i]);
        let wm = 0.5 * (w[i] + w[n - 1 - i]);
        x[i] = -xm;
        x[n - 1 - i] = xm;
        w[i] = wm;
        w[n - 1 - i] = wm;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Rotator frequency with a verified Diophantine floor up to a cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frequency {
    pub omega: Vec<f64>,
    pub tau: f64,
    pub gamma_floor: f64,
    /// Largest `|k|₁` covered by the construction-time check.
    pub kmax: usize,
}

fn lattice_box(n: usize, r: i64) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::new();
        for v in &out {
            for k in -r..=r {
                let mut w = v.clone();
                w.push(k);
                next.push(w);
            }
        }
        out = next;
    }
    out
}

impl Frequency {
    /// Computes `γ = min |⟨k,ω⟩|·|k|^τ` over `0 < |k|₁ ≤ 2·kmax` and halves it.
    pub fn new(omega: Vec<f64>, tau: f64, kmax: usize) -> Result<Self> {
        let n = omega.len();
        if tau < n as f64 - 1.0 {
            return Err(Error::Domain(format!("tau = {tau} < n - 1")));
        }
        let mut gamma = f64::INFINITY;
        for k in lattice_box(n, 2 * kmax as i64) {
            let l1: i64 = k.iter().map(|v| v.abs()).sum();
            if l1 == 0 || l1 > 2 * kmax as i64 {
                continue;
            }
            let a: f64 = k.iter().zip(&omega).map(|(a, b)| *a as f64 * b).sum();
            gamma = gamma.min(a.abs() * (l1 as f64).powf(tau));
        }
        if n == 0 {
            gamma = 1.0;
        }
        if gamma.is_nan() || gamma <= 0.0 {
            return Err(Error::SmallDivisor(format!("ω = {omega:?} is resonant below |k| = {}", 2 * kmax)));
        }
        Ok(Self { omega, tau, gamma_floor: 0.5 * gamma, kmax })
    }

    /// Uses a prescribed floor after verifying it up to `kmax`.
    pub fn with_floor(omega: Vec<f64>, tau: f64, gamma_floor: f64, kmax: usize) -> Result<Self> {
        let f = Self { omega, tau, gamma_floor, kmax };
        for k in lattice_box(f.n(), kmax as i64) {
            if k.iter().any(|v| *v != 0) {
                f.divisor(&k)?;
            }
        }
        Ok(f)
    }

    pub fn n(&self) -> usize {
        self.omega.len()
    }

    /// `⟨k, ω⟩`.
    pub fn dot(&self, k: &[i64]) -> f64 {
        k.iter().zip(&self.omega).map(|(a, b)| *a as f64 * b).sum()
    }

    /// `⟨k, ω⟩` after checking it against the floor.
    pub fn divisor(&self, k: &[i64]) -> Result<f64> {
        let a = self.dot(k);
        let l1: i64 = k.iter().map(|v| v.abs()).sum();
        if l1 > 0 && a.abs() < self.gamma_floor * (l1 as f64).powf(-self.tau) {
            return Err(Error::SmallDivisor(format!("|⟨{k:?}, ω⟩| = {:.3e}", a.abs())));
        }
        Ok(a)
    }
}

fn check_phi_dims(t: &FourierTable, freq: &Frequency) -> Result<()> {
    if t.dims() != freq.n() {
        return Err(Error::DimensionMismatch(format!("table has {} angles, ω has {}", t.dims(), freq.n())));
    }
    Ok(())
}

/// `D_ω u = v` with zero-average normalization.
pub fn solve_domega(v: &FourierTable, freq: &Frequency) -> Result<FourierTable> {
    check_phi_dims(v, freq)?;
    let v0 = v.average();
    if v0.abs() >= 1e-12 {
        return Err(Error::MeanObstruction(format!("average = {v0:.3e}")));
    }
    let mut u = FourierTable::zeros(v.dims(), v.cutoffs());
    for (k, c) in v.modes() {
        if c.norm() == 0.0 || k.iter().all(|v| *v == 0) {
            continue;
        }
        let a = freq.divisor(&k)?;
        u.set(&k, c / (I * a));
    }
    Ok(u)
}

/// `(-λ + D_ω) u = v0`.
pub fn solve_shifted(v0: &FourierTable, lambda: f64, freq: &Frequency) -> Result<FourierTable> {
    check_phi_dims(v0, freq)?;
    if lambda <= 0.0 {
        return Err(Error::Domain(format!("shifted solver needs λ > 0, got {lambda}")));
    }
    let mut u = FourierTable::zeros(v0.dims(), v0.cutoffs());
    for (k, c) in v0.modes() {
        if c.norm() == 0.0 {
            continue;
        }
        u.set(&k, c / (Complex64::new(-lambda, freq.dot(&k))));
    }
    Ok(u)
}

/// Flat FFT index on the chart's φ grid for mode `k`.
pub fn chart_index(chart: &Chart, k: &[i64]) -> usize {
    let m = chart.m as i64;
    k.iter().fold(0usize, |acc, kv| acc * chart.m + kv.rem_euclid(m) as usize)
}

/// Every φ-mode inside the chart cutoff box.
pub fn chart_modes(chart: &Chart) -> Vec<Vec<i64>> {
    lattice_box(chart.n, chart.kcut as i64)
}

/// Characteristic quadrature for `λ∂_s u + ω·∂_φ u = r − c` mode by mode:
/// `u_k(s) = λ⁻¹∫_{-∞}^s (r_k(x(t)) − r_k(0)) e^{−iα(s−t)/λ} dt + r_k(0)/(iα)`.
/// `rhs(x)` returns the φ-modes of `r` at base point `x` (in the order of
/// `alphas`).  Returns the modes of `u` at every `x` in `xs`.
fn transport_quadrature(
    rhs: &(dyn Fn(f64) -> Vec<Complex64> + Sync),
    alphas: &[f64],
    lambda: f64,
    sep: &SeparatrixMap,
    xs: &[f64],
) -> Result<Vec<Vec<Complex64>>> {
    let nm = alphas.len();
    let amax = alphas.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let h = (6.0 * lambda / amax.max(1e-300)).min(0.5);
    let t0 = -38.0;
    let r0 = rhs(0.0);
    let rules = [gauss_legendre(24), gauss_legendre(16)];
    // Integrates r̃_k(x(t)) e^{iαt/λ} over [a, b] on one branch with both rules.
    let panel = |a: f64, b: f64, upper: bool| -> [Vec<Complex64>; 2] {
        let mut out = [vec![ZERO; nm], vec![ZERO; nm]];
        let (c, hw) = (0.5 * (a + b), 0.5 * (b - a));
        for (r, (nodes, weights)) in rules.iter().enumerate() {
            for (z, w) in nodes.iter().zip(weights) {
                let t = c + hw * z;
                let x = sep.branch_x(t, upper);
                let rv = rhs(x);
                for k in 0..nm {
                    let ph = Complex64::from_polar(1.0, alphas[k] * t / lambda);
                    out[r][k] += (rv[k] - r0[k]) * ph * (w * hw);
                }
            }
        }
        out
    };
    let smax = xs
        .iter()
        .filter(|x| x.abs() > 1e-14)
        .map(|x| sep.branch_time(*x))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(t0, f64::max);
    let npan = ((smax - t0) / h).ceil().max(1.0) as usize;
    // Prefix sums of whole panels per branch.
    let prefix = |upper: bool| -> Vec<[Vec<Complex64>; 2]> {
        let sums: Vec<[Vec<Complex64>; 2]> =
            (0..npan).into_par_iter().map(|j| panel(t0 + j as f64 * h, t0 + (j + 1) as f64 * h, upper)).collect();
        let mut acc = vec![[vec![ZERO; nm], vec![ZERO; nm]]];
        for s in sums {
            let last = acc.last().unwrap();
            let next = [
                last[0].iter().zip(&s[0]).map(|(a, b)| a + b).collect(),
                last[1].iter().zip(&s[1]).map(|(a, b)| a + b).collect(),
            ];
            acc.push(next);
        }
        acc
    };
    let pre_u = prefix(true);
    let pre_l = prefix(false);
    let scale = xs.iter().flat_map(|x| rhs(*x)).fold(1e-300f64, |a, b| a.max(b.norm()));
    xs.par_iter()
        .map(|&x| {
            let mut u = vec![ZERO; nm];
            for k in 0..nm {
                if alphas[k] != 0.0 {
                    u[k] = r0[k] / (I * alphas[k]);
                }
            }
            if x.abs() <= 1e-14 {
                return Ok(u);
            }
            let upper = x > 0.0;
            let s = sep.branch_time(x)?;
            let j = (((s - t0) / h).floor().max(0.0) as usize).min(npan);
            let pre = if upper { &pre_u[j] } else { &pre_l[j] };
            let tail = panel(t0 + j as f64 * h, s, upper);
            for k in 0..nm {
                let i20 = pre[0][k] + tail[0][k];
                let i14 = pre[1][k] + tail[1][k];
                if (i20 - i14).norm() > 1e-8 * scale * (s - t0) {
                    return Err(Error::Quadrature(format!("mode {k}: rule mismatch {:.2e}", (i20 - i14).norm())));
                }
                let ph = Complex64::from_polar(1.0, -alphas[k] * s / lambda);
                u[k] += i20 * ph / lambda;
            }
            Ok(u)
        })
        .collect()
}

/// Solution of a transport equation on a chart together with its constant.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    pub u: Field,
    pub c: f64,
}

/// Solution of the "minus" transport equation: `u = u0/χ + u1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinusSolution {
    pub u0: FourierTable,
    pub u1: Field,
    pub c: f64,
}

fn check_chart(chart: &Chart, v_cut: &[usize], freq: &Frequency) -> Result<()> {
    if chart.n != freq.n() {
        return Err(Error::DimensionMismatch(format!("chart has {} angles, ω has {}", chart.n, freq.n())));
    }
    if v_cut.iter().any(|k| *k > chart.kcut) {
        return Err(Error::DimensionMismatch(format!("cutoffs {v_cut:?} exceed chart cutoff {}", chart.kcut)));
    }
    Ok(())
}

fn modes_to_field(chart: &Chart, modes: &[Vec<i64>], vals: &[Vec<Complex64>]) -> Field {
    let np = chart.nphi();
    let rows: Vec<Vec<Complex64>> = vals
        .iter()
        .map(|v| {
            let mut row = vec![ZERO; np];
            for (k, c) in modes.iter().zip(v) {
                row[chart_index(chart, k)] = *c;
            }
            row
        })
        .collect();
    chart.from_modes(&rows)
}

fn table_modes_at(v: &FourierTable, modes: &[Vec<i64>], x: f64) -> Vec<Complex64> {
    let r = v.restrict_x(x);
    modes.iter().map(|k| r.get(k)).collect()
}

/// `D_{λ,ω} u = v − c` on the bi-cylinder for an x-representation table `v`,
/// by quadrature along characteristics; `u` is returned at the chart nodes.
/// Normalization: the torus part `u(0, ·)` has zero average, `c = ⟨v(0, ·)⟩`.
pub fn solve_transport(
    v: &FourierTable,
    lambda: f64,
    freq: &Frequency,
    sep: &SeparatrixMap,
    chart: &Chart,
) -> Result<TransportSolution> {
    if v.dims() != freq.n() + 1 {
        return Err(Error::DimensionMismatch("transport input must be a (x, φ) table".into()));
    }
    if lambda <= 0.0 {
        return Err(Error::Domain(format!("λ = {lambda} must be positive")));
    }
    check_chart(chart, &v.cutoffs()[1..], freq)?;
    let modes = chart_modes(chart);
    let alphas = modes.iter().map(|k| if k.iter().all(|v| *v == 0) { Ok(0.0) } else { freq.divisor(k) }).collect::<Result<Vec<_>>>()?;
    let rhs = |x: f64| table_modes_at(v, &modes, x);
    let vals = transport_quadrature(&rhs, &alphas, lambda, sep, &chart.cheb.nodes)?;
    let c = v.average_at_infinity();
    Ok(TransportSolution { u: modes_to_field(chart, &modes, &vals), c })
}

/// `D_{λ,ω}(u0/χ + u1) = v0/χ + v1 − c`.
///
/// `u0` solves `(−λ + D_ω)u0 = v0` and `u1` the transport equation with
/// right-hand side `v1 − λη u0`, `η = (ψ' − 1)/ψ` (regular at `x = 0`).
/// The constant is `c = ⟨v1(0, ·)⟩ − ψ''(0)⟨v0⟩`.
pub fn solve_transport_minus(
    v0: &FourierTable,
    v1: &FourierTable,
    lambda: f64,
    freq: &Frequency,
    sep: &SeparatrixMap,
    chart: &Chart,
) -> Result<MinusSolution> {
    let u0 = solve_shifted(v0, lambda, freq)?;
    if v1.dims() != freq.n() + 1 {
        return Err(Error::DimensionMismatch("v1 must be a (x, φ) table".into()));
    }
    check_chart(chart, &v1.cutoffs()[1..], freq)?;
    check_chart(chart, v0.cutoffs(), freq)?;
    let modes = chart_modes(chart);
    let alphas = modes.iter().map(|k| if k.iter().all(|v| *v == 0) { Ok(0.0) } else { freq.divisor(k) }).collect::<Result<Vec<_>>>()?;
    let u0m: Vec<Complex64> = modes.iter().map(|k| u0.get(k)).collect();
    let pp0 = sep.psi_pp0();
    let eta = |x: f64| sep.eta(x);
    let rhs = |x: f64| {
        let r = table_modes_at(v1, &modes, x);
        let e = eta(x);
        r.iter().zip(&u0m).map(|(a, b)| a + b * (lambda * e)).collect::<Vec<_>>()
    };
    let vals = transport_quadrature(&rhs, &alphas, lambda, sep, &chart.cheb.nodes)?;
    let c = v1.average_at_infinity() - pp0 * v0.average();
    Ok(MinusSolution { u0, u1: modes_to_field(chart, &modes, &vals), c })
}

/// Component of a vector right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub enum VecComponent {
    /// `v0/χ + v1` (first component).
    Minus(FourierTable, FourierTable),
    /// Plain table (angular components).
    Plain(FourierTable),
}

/// Componentwise solution of the `(n+1)`-vector transport equation.
#[derive(Debug, Clone, PartialEq)]
pub struct VecSolution {
    pub first: MinusSolution,
    pub rest: Vec<TransportSolution>,
    pub c: Vec<f64>,
}

/// First component in the minus class, the others plain; with `mean_free`
/// the angular constants must vanish.
pub fn solve_transport_vec(
    v: &[VecComponent],
    lambda: f64,
    freq: &Frequency,
    sep: &SeparatrixMap,
    chart: &Chart,
    mean_free: bool,
) -> Result<VecSolution> {
    if v.len() != freq.n() + 1 {
        return Err(Error::DimensionMismatch(format!("expected {} components, got {}", freq.n() + 1, v.len())));
    }
    let first = match &v[0] {
        VecComponent::Minus(a, b) => solve_transport_minus(a, b, lambda, freq, sep, chart)?,
        VecComponent::Plain(b) => {
            let zero = FourierTable::zeros(freq.n(), &vec![0; freq.n()]);
            solve_transport_minus(&zero, b, lambda, freq, sep, chart)?
        }
    };
    let mut rest = Vec::new();
    let mut c = vec![first.c];
    for comp in &v[1..] {
        let t = match comp {
            VecComponent::Plain(t) => t,
            VecComponent::Minus(..) => {
                return Err(Error::Precondition("angular components must be plain tables".into()));
            }
        };
        let sol = solve_transport(t, lambda, freq, sep, chart)?;
        if mean_free && sol.c.abs() > 1e-10 {
            return Err(Error::ResidualMean(format!("{:.3e}", sol.c)));
        }
        c.push(sol.c);
        rest.push(sol);
    }
    Ok(VecSolution { first, rest, c })
}

/// Per-mode data shared by the collocation solvers.
struct Colloc {
    psi: Vec<f64>,
    dpsi: Vec<f64>,
    /// `λ diag(ψ) D`, row-major.
    lpd: Vec<f64>,
    at0: Vec<f64>,
    dat0: Vec<f64>,
}

impl Colloc {
    fn new(chart: &Chart, sep_psi: &dyn Fn(f64) -> (f64, f64), lambda: f64) -> Self {
        let nx = chart.cheb.len();
        let (psi, dpsi): (Vec<f64>, Vec<f64>) = chart.cheb.nodes.iter().map(|x| sep_psi(*x)).unzip();
        let mut lpd = vec![0.0; nx * nx];
        for i in 0..nx {
            for j in 0..nx {
                lpd[i * nx + j] = lambda * psi[i] * chart.cheb.dmat[i * nx + j];
            }
        }
        let at0 = chart.cheb.interp_row_re(0.0);
        let dat0 = {
            // Derivative of the interpolant at 0: row · D.
            let mut r = vec![0.0; nx];
            for (i, w) in at0.iter().enumerate() {
                for j in 0..nx {
                    r[j] += w * chart.cheb.dmat[i * nx + j];
                }
            }
            r
        };
        Self { psi, dpsi, lpd, at0, dat0 }
    }
}

/// Which transport operator a collocation solve targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    /// `λψ∂_x + ω·∂_φ`.
    Plain,
    /// `λψ∂_x + ω·∂_φ − λψ'` with constant `c·ψ`.
    Minus,
}

/// Collocation solve on a chart:
/// * `Plain`: `λψ u_x + ω·u_φ = v − c`, `u(0, ·)` zero-mean, `c = ⟨v(0, ·)⟩`;
/// * `Minus`: `λψ u_x + ω·u_φ − λψ' u = v − cψ`, normalized so that the
///   part at infinity of `u/ψ` has zero mean.
///
/// `lambda` is signed (negative for stable runs); `psi` returns `(ψ, ψ')`
/// at a chart point and `pp0 = ψ''(0)`.
#[allow(clippy::too_many_arguments)]
pub fn chart_transport(
    chart: &Chart,
    psi: &dyn Fn(f64) -> (f64, f64),
    pp0: f64,
    lambda: f64,
    freq: &Frequency,
    v: &Field,
    kind: TransportKind,
) -> Result<TransportSolution> {
    let nx = chart.cheb.len();
    let np = chart.nphi();
    let col = Colloc::new(chart, psi, lambda);
    let vm = chart.modes(v);
    let jobs: Vec<usize> = (0..np).filter(|&j| chart.kept(j)).collect();
    let results: Vec<(usize, Vec<Complex64>, f64)> = jobs
        .par_iter()
        .map(|&j| {
            let k = chart.mode(j);
            let zero_mode = k.iter().all(|v| *v == 0);
            let alpha = if zero_mode { 0.0 } else { freq.divisor(&k)? };
            let rhs: Vec<Complex64> = (0..nx).map(|i| vm[i][j]).collect();
            if rhs.iter().all(|c| c.norm() == 0.0) {
                return Ok((j, vec![ZERO; nx], 0.0));
            }
            let size = if zero_mode { nx + 1 } else { nx };
            let mut a = DMatrix::<Complex64>::zeros(size, size);
            let mut b = DVector::<Complex64>::zeros(size);
            for i in 0..nx {
                for m in 0..nx {
                    a[(i, m)] = Complex64::new(col.lpd[i * nx + m], 0.0);
                }
                let mut diag = Complex64::new(0.0, alpha);
                if kind == TransportKind::Minus {
                    diag -= lambda * col.dpsi[i];
                }
                a[(i, i)] += diag;
                b[i] = rhs[i];
            }
            if zero_mode {
                let v0 = (0..nx).map(|m| col.at0[m] * rhs[m]).sum::<Complex64>();
                match kind {
                    TransportKind::Plain => {
                        for i in 0..nx {
                            a[(i, nx)] = Complex64::new(1.0, 0.0);
                        }
                        for m in 0..nx {
                            a[(nx, m)] = Complex64::new(col.at0[m], 0.0);
                        }
                    }
                    TransportKind::Minus => {
                        for i in 0..nx {
                            a[(i, nx)] = Complex64::new(col.psi[i], 0.0);
                        }
                        for m in 0..nx {
                            a[(nx, m)] = Complex64::new(col.dat0[m], 0.0);
                        }
                        b[nx] = -v0 * pp0 / (2.0 * lambda);
                    }
                }
            }
            let sol = a.lu().solve(&b).ok_or_else(|| Error::Precondition(format!("singular collocation for mode {k:?}")))?;
            let c = if zero_mode { sol[nx].re } else { 0.0 };
            Ok((j, sol.iter().take(nx).copied().collect(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = vec![vec![ZERO; np]; nx];
    let mut c = 0.0;
    for (j, u, cj) in results {
        for i in 0..nx {
            rows[i][j] = u[i];
        }
        c += cj;
    }
    Ok(TransportSolution { u: chart.from_modes(&rows), c })
}

/// Spectral residual of a chart transport solution:
/// `max |λψ u_x + ω·u_φ [− λψ' u] − (v − c[ψ])| / max |v|`.
pub fn chart_residual(
    chart: &Chart,
    psi: &dyn Fn(f64) -> (f64, f64),
    lambda: f64,
    freq: &Frequency,
    sol: &TransportSolution,
    v: &Field,
    kind: TransportKind,
) -> f64 {
    let np = chart.nphi();
    let ux = chart.dx(&sol.u);
    let mut lu = Field::zeros(chart.npts());
    for a in 0..chart.n {
        lu = lu.add(&chart.dphi(&sol.u, a).scale(freq.omega[a]));
    }
    let mut worst = 0.0f64;
    for (i, &x) in chart.cheb.nodes.iter().enumerate() {
        let (p, dp) = psi(x);
        for j in 0..np {
            let g = i * np + j;
            let mut r = lambda * p * ux.vals[g] + lu.vals[g] - v.vals[g];
            match kind {
                TransportKind::Plain => r += sol.c,
                TransportKind::Minus => r += sol.c * p - lambda * dp * sol.u.vals[g],
            }
            worst = worst.max(r.abs());
        }
    }
    worst / v.max_abs().max(1e-300)
}

/// Residual of a quadrature transport solution against the table `v`,
/// using Chebyshev differentiation on the chart (independent of the
/// quadrature).
pub fn transport_residual(
    chart: &Chart,
    sep: &SeparatrixMap,
    lambda: f64,
    freq: &Frequency,
    sol: &TransportSolution,
    v: &FourierTable,
) -> f64 {
    let vf = chart.sample_table(v, 0.0, &[], &[]);
    let psi = |x: f64| (sep.psi_at(x), sep.dpsi_at(x));
    chart_residual(chart, &psi, lambda, freq, sol, &vf, TransportKind::Plain)
}

/// Residual of a minus-class solution `u0/χ + u1` against `v0/χ + v1 − c`,
/// evaluated at chart nodes with `|x| ≥ xmin` (away from the torus where
/// `1/χ` is singular).
#[allow(clippy::too_many_arguments)]
pub fn minus_residual(
    chart: &Chart,
    sep: &SeparatrixMap,
    lambda: f64,
    freq: &Frequency,
    sol: &MinusSolution,
    v0: &FourierTable,
    v1: &FourierTable,
    xmin: f64,
) -> f64 {
    let np = chart.nphi();
    let u1x = chart.dx(&sol.u1);
    let mut lu1 = Field::zeros(chart.npts());
    for a in 0..chart.n {
        lu1 = lu1.add(&chart.dphi(&sol.u1, a).scale(freq.omega[a]));
    }
    let v1f = chart.sample_table(v1, 0.0, &[], &[]);
    let du0 = (0..chart.n).fold(FourierTable::zeros(v0.dims(), v0.cutoffs()), |acc, a| {
        acc.add(&sol.u0.differentiate(a).scale(freq.omega[a])).expect("same dims")
    });
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for (i, &x) in chart.cheb.nodes.iter().enumerate() {
        if x.abs() < xmin {
            continue;
        }
        let (p, dp) = (sep.psi_at(x), sep.dpsi_at(x));
        for j in 0..np {
            let phi = chart.phi(j);
            let g = i * np + j;
            let u0 = sol.u0.eval(&phi);
            // λψ∂_x(u0/ψ) = −λψ'u0/ψ.
            let lhs = lambda * p * u1x.vals[g] + lu1.vals[g] + (du0.eval(&phi) - lambda * dp * u0) / p;
            let rhs = v0.eval(&phi) / p + v1f.vals[g] - sol.c;
            scale = scale.max(rhs.abs());
            worst = worst.max((lhs - rhs).abs());
        }
    }
    worst / scale.max(1e-300)
}

// ---------------------------------------------------------------------------
// Cauchy problem on a bounded cylinder.

/// One φ-mode on the bounded cylinder: `u_k(s) = p(s) + h e^{−i f s}` with
/// `p` a Chebyshev series on `[−T, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CylMode {
    pub k: Vec<i64>,
    pub poly: Vec<Complex64>,
    pub osc: Complex64,
    pub freq: f64,
}

/// Per-mode analytic coefficient functions on `[−T, T] × 𝕋ⁿ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CylinderField {
    pub t: f64,
    pub modes: Vec<CylMode>,
}

fn cheb_values(t: Complex64, n: usize) -> Vec<Complex64> {
    let mut tv = vec![ZERO; n.max(2)];
    tv[0] = Complex64::new(1.0, 0.0);
    tv[1] = t;
    for k in 2..n {
        tv[k] = t * tv[k - 1] * 2.0 - tv[k - 2];
    }
    tv.truncate(n);
    tv
}

fn cheb_fit(vals: &[Complex64]) -> Vec<Complex64> {
    // vals at Lobatto nodes ordered by increasing s (angle π(n−j)/n).
    let n = vals.len() - 1;
    (0..=n)
        .map(|k| {
            let mut s = ZERO;
            for (j, v) in vals.iter().enumerate() {
                let th = PI * (n - j) as f64 / n as f64;
                let w = if j == 0 || j == n { 0.5 } else { 1.0 };
                s += v * (w * (k as f64 * th).cos());
            }
            let f = if k == 0 || k == n { 1.0 } else { 2.0 };
            s * (f / n as f64)
        })
        .collect()
}

impl CylMode {
    pub fn eval(&self, s: Complex64, t: f64) -> Complex64 {
        let tv = cheb_values(s / t, self.poly.len());
        let p: Complex64 = self.poly.iter().zip(&tv).map(|(a, b)| a * b).sum();
        p + self.osc * (-I * self.freq * s).exp()
    }

    /// `du/ds`.
    pub fn deriv(&self, s: Complex64, t: f64) -> Complex64 {
        let d = cheb_derivative(&self.poly, t);
        let tv = cheb_values(s / t, d.len().max(1));
        let p: Complex64 = d.iter().zip(&tv).map(|(a, b)| a * b).sum();
        p - I * self.freq * self.osc * (-I * self.freq * s).exp()
    }
}

/// Chebyshev coefficients of the derivative (w.r.t. `s = T·τ`).
fn cheb_derivative(c: &[Complex64], t: f64) -> Vec<Complex64> {
    let n = c.len();
    if n <= 1 {
        return vec![ZERO];
    }
    let mut d = vec![ZERO; n + 1];
    for j in (0..n - 1).rev() {
        d[j] = d[j + 2] + c[j + 1] * (2.0 * (j + 1) as f64);
    }
    d[0] *= 0.5;
    d.truncate(n - 1);
    d.iter().map(|v| v / t).collect()
}

/// Chebyshev coefficients of the antiderivative vanishing at `s = 0`.
fn cheb_integral(c: &[Complex64], t: f64) -> Vec<Complex64> {
    let n = c.len();
    let mut out = vec![ZERO; n + 1];
    for k in 1..=n {
        let cm1 = c[k - 1] * if k == 1 { 2.0 } else { 1.0 };
        let cp1 = if k + 1 < n { c[k + 1] } else { ZERO };
        out[k] = (cm1 - cp1) / (2.0 * k as f64);
    }
    // Fix the constant so the integral vanishes at τ = 0.
    let tv = cheb_values(ZERO, n + 1);
    let v0: Complex64 = out.iter().zip(&tv).map(|(a, b)| a * b).sum();
    out[0] -= v0;
    out.iter().map(|v| v * t).collect()
}

impl CylinderField {
    /// Samples per-mode functions on `nodes + 1` Chebyshev–Lobatto points.
    pub fn from_mode_fns(t: f64, nodes: usize, modes: &[Vec<i64>], f: impl Fn(usize, f64) -> Complex64) -> Self {
        let s: Vec<f64> = (0..=nodes).map(|j| -t * (PI * j as f64 / nodes as f64).cos()).collect();
        let modes = modes
            .iter()
            .enumerate()
            .map(|(m, k)| {
                let vals: Vec<Complex64> = s.iter().map(|sv| f(m, *sv)).collect();
                CylMode { k: k.clone(), poly: cheb_fit(&vals), osc: ZERO, freq: 0.0 }
            })
            .collect();
        Self { t, modes }
    }

    /// Index of mode `k`.
    pub fn find(&self, k: &[i64]) -> Option<usize> {
        self.modes.iter().position(|m| m.k == k)
    }

    /// Real value at `(s, φ)`.
    pub fn eval(&self, s: f64, phi: &[f64]) -> f64 {
        self.modes
            .iter()
            .map(|m| {
                let ph: f64 = m.k.iter().zip(phi).map(|(a, b)| *a as f64 * b).sum();
                (m.eval(Complex64::new(s, 0.0), self.t) * Complex64::from_polar(1.0, ph)).re
            })
            .sum()
    }

    /// `Σ_k e^{|k|σ} sup_{s∈[−T,T]} |u_k(s)|` on a 257-point grid.
    pub fn norm(&self, sigma: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| {
                let l1: i64 = m.k.iter().map(|v| v.abs()).sum();
                let sup = (0..=256)
                    .map(|j| m.eval(Complex64::new(-self.t + 2.0 * self.t * j as f64 / 256.0, 0.0), self.t).norm())
                    .fold(0.0f64, f64::max);
                sup * (l1 as f64 * sigma).exp()
            })
            .sum()
    }
}

/// Threshold on `|α|T/λ` above which the oscillator representation is used.
const OSC_SWITCH: f64 = 30.0;

fn cauchy_mode(v: &CylMode, t: f64, lambda: f64, alpha: f64, rho_prime: f64) -> CylMode {
    let n = v.poly.len();
    if alpha == 0.0 {
        let poly: Vec<Complex64> = cheb_integral(&v.poly, t).iter().map(|c| c / lambda).collect();
        return CylMode { k: v.k.clone(), poly, osc: ZERO, freq: 0.0 };
    }
    // Initial value from the vertical segment [iρ′, 0].
    let (gx, gw) = gauss_legendre(24);
    let panels = ((rho_prime * alpha.abs() / lambda / 4.0).ceil() as usize).clamp(4, 64);
    let hz = rho_prime / panels as f64;
    let mut init = ZERO;
    for p in 0..panels {
        for (z, w) in gx.iter().zip(&gw) {
            let zeta = hz * (p as f64 + 0.5 * (z + 1.0));
            init += v.eval(Complex64::new(0.0, zeta), t) * ((-alpha * zeta / lambda).exp() * w * 0.5 * hz);
        }
    }
    let u0 = -I * init / lambda;
    let freq = alpha / lambda;
    // The back substitution multiplies by `2jλ/(|α|T)` per degree, so it is
    // only stable when the oscillation outpaces the polynomial degree.
    if alpha.abs() * t / lambda > OSC_SWITCH.max(2.0 * n as f64) {
        // Polynomial particular solution by back substitution in coefficient
        // space, then the homogeneous oscillator fixes u(0).
        let mut c = vec![ZERO; n];
        let mut d = vec![ZERO; n + 2];
        for j in (0..n).rev() {
            d[j] = d[j + 2] + if j + 1 < n { c[j + 1] * (2.0 * (j + 1) as f64) } else { ZERO };
            let dj = if j == 0 { d[0] * 0.5 } else { d[j] };
            c[j] = (v.poly[j] - dj * (lambda / t)) / (I * alpha);
        }
        let p0: Complex64 = c.iter().zip(cheb_values(ZERO, n)).map(|(a, b)| a * b).sum();
        return CylMode { k: v.k.clone(), poly: c, osc: u0 - p0, freq };
    }
    // Direct collocation of λu' + iαu = v with u(0) = u0.
    // Enough nodes to resolve the homogeneous oscillation e^{−iαs/λ}.
    let need = (n - 1).max((1.5 * alpha.abs() * t / lambda) as usize + 32);
    let nn = need + need % 2;
    let cheb = crate::chart::Cheb::new(-t, t, nn);
    let m = nn + 1;
    let mut a = DMatrix::<Complex64>::zeros(m, m);
    let mut b = DVector::<Complex64>::zeros(m);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = Complex64::new(lambda * cheb.dmat[i * m + j], 0.0);
        }
        a[(i, i)] += I * alpha;
        b[i] = v.eval(Complex64::new(cheb.nodes[i], 0.0), t);
    }
    let mid = nn / 2;
    for j in 0..m {
        a[(mid, j)] = ZERO;
    }
    a[(mid, mid)] = Complex64::new(1.0, 0.0);
    b[mid] = u0;
    let sol = a.lu().solve(&b).expect("Cauchy collocation is nonsingular");
    let vals: Vec<Complex64> = sol.iter().copied().collect();
    CylMode { k: v.k.clone(), poly: cheb_fit(&vals), osc: ZERO, freq: 0.0 }
}

/// `λ∂_s u + ω·∂_φ u = v` on `[−T, T] × 𝕋ⁿ` with, for `⟨k,ω⟩ > 0`,
/// `u_k(s) = λ⁻¹∫_{iρ′}^{s} v_k(t) e^{i⟨k,ω⟩(t−s)/λ} dt` (vertical then
/// horizontal path), conjugate data for `⟨k,ω⟩ < 0` and
/// `u_k(s) = λ⁻¹∫_0^s v_k` on resonant modes.
pub fn solve_cauchy(v: &CylinderField, lambda: f64, omega: &[f64], rho_prime: f64) -> Result<CylinderField> {
    if lambda <= 0.0 {
        return Err(Error::Domain(format!("λ = {lambda} must be positive")));
    }
    if v.modes.iter().any(|m| m.osc.norm() != 0.0) {
        return Err(Error::Precondition("input modes must be polynomial in s".into()));
    }
    let modes: Vec<CylMode> = v
        .modes
        .par_iter()
        .map(|m| {
            let alpha: f64 = m.k.iter().zip(omega).map(|(a, b)| *a as f64 * b).sum();
            if alpha >= 0.0 {
                return cauchy_mode(m, v.t, lambda, alpha, rho_prime);
            }
            // Conjugate of the solution for −k.
            let neg: Vec<i64> = m.k.iter().map(|x| -x).collect();
            let partner = match v.find(&neg) {
                Some(i) => v.modes[i].clone(),
                None => CylMode { k: neg, poly: m.poly.iter().map(|c| c.conj()).collect(), osc: ZERO, freq: 0.0 },
            };
            let sol = cauchy_mode(&partner, v.t, lambda, -alpha, rho_prime);
            CylMode {
                k: m.k.clone(),
                poly: sol.poly.iter().map(|c| c.conj()).collect(),
                osc: sol.osc.conj(),
                freq: -sol.freq,
            }
        })
        .collect();
    Ok(CylinderField { t: v.t, modes })
}

/// `max_k sup_s |λu_k' + i⟨k,ω⟩u_k − v_k| / max_k sup_s |v_k|` on a
/// 257-point grid.
pub fn cauchy_residual(u: &CylinderField, v: &CylinderField, lambda: f64, omega: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for (um, vm) in u.modes.iter().zip(&v.modes) {
        let alpha: f64 = um.k.iter().zip(omega).map(|(a, b)| *a as f64 * b).sum();
        for j in 0..=256 {
            let s = Complex64::new(-u.t + 2.0 * u.t * j as f64 / 256.0, 0.0);
            let vv = vm.eval(s, v.t);
            let r = um.deriv(s, u.t) * lambda + I * alpha * um.eval(s, u.t) - vv;
            worst = worst.max(r.norm());
            scale = scale.max(vv.norm());
        }
    }
    worst / scale.max(1e-300)
}

/// Empirical constant `λ‖u‖/‖v‖` of the Cauchy solver (σ = 0).
pub fn cauchy_constant(v: &CylinderField, lambda: f64, omega: &[f64], rho_prime: f64) -> Result<f64> {
    let u = solve_cauchy(v, lambda, omega, rho_prime)?;
    Ok(lambda * u.norm(0.0) / v.norm(0.0).max(1e-300))
}

/// Reference constant: every mode treated as resonant from above
/// (`⟨k,ω⟩ → 0⁺`), i.e. the vertical-plus-horizontal integral without
/// oscillation.  Used to express the ω-uniformity of the Cauchy solver.
pub fn cauchy_reference_constant(v: &CylinderField, lambda: f64, rho_prime: f64) -> f64 {
    let modes: Vec<CylMode> = v
        .modes
        .iter()
        .map(|m| {
            let tiny = 1e-300;
            let mut sol = cauchy_mode(m, v.t, lambda, tiny, rho_prime);
            // α → 0⁺ keeps the vertical initial value but no oscillation.
            let prim = cheb_integral(&m.poly, v.t);
            let p0: Complex64 = sol.poly.iter().zip(cheb_values(ZERO, sol.poly.len())).map(|(a, b)| a * b).sum();
            let u0 = p0 + sol.osc;
            sol.poly = prim.iter().map(|c| c / lambda).collect();
            sol.poly[0] += u0;
            sol.osc = ZERO;
            sol.freq = 0.0;
            sol
        })
        .collect();
    let u = CylinderField { t: v.t, modes };
    lambda * u.norm(0.0) / v.norm(0.0).max(1e-300)
}
