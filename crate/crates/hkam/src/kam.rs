//! The hyperbolic KAM engine.
//!
//! A Hamiltonian quadratic in the momenta `p = (y, I)` is carried on a chart
//! around the torus `x = 0` (Chebyshev in `x`, Fourier in `φ`):
//!
//! `H(p, q) = f(q) + ⟨X(q), p⟩ + ½⟨Q(q)p, p⟩`,
//!
//! with the unperturbed drift `X⁰ = (λψ(x), ω)`, perturbations `f` and
//! `g = X − X⁰`.  One Newton step builds an affine canonical map
//! `Ψ(a, S): (p', q') ↦ (dS(a(q')) + Da(q')^{-T} p', a(q'))` with
//! `S = ⟨ξ, φ⟩ + Ŝ`, `a = id + b`:
//!
//! 1. `Ŝ` solves `λψ Ŝ_x + ω·Ŝ_φ = ⟨f⟩ − f`;
//! 2. `g₁ = g + Q dS` and `ξ = −⟨Q_II⟩⁻¹⟨G₁⟩` (averages at infinity);
//! 3. `c₀ = ⟨f⟩ + ⟨ω, ξ⟩`;
//! 4. `b` solves the conjugation system `D b_x − λψ' b_x = g₁_y − c₁ψ`,
//!    `D b_φ = G₁`, and `λ' = λ + c₁`;
//! 5. `H' = H∘Ψ`, which is again exactly quadratic in `p'`.
//!
//! Because the jet is quadratic the pullback is exact; the only
//! approximation is the spectral representation on the chart.  The graph
//! of `dS` of the composed map is the perturbed whisker, and
//! [`hj_residual`] evaluates the Hamilton–Jacobi defect of that graph in
//! the original coordinates.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chart::{Chart, Coeffs, Field};
use crate::error::{Error, Result};
use crate::homological::{chart_residual, chart_transport, Frequency, TransportKind};
use crate::separatrix::SeparatrixMap;
use crate::series::{FourierTable, MomentumJet};

/// Serializable chart geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    pub lo: f64,
    pub hi: f64,
    pub nx: usize,
    pub n: usize,
    pub kcut: usize,
}

impl ChartSpec {
    /// Chart covering `|s| ≤ t` on both separatrix branches.
    pub fn around(sep: &SeparatrixMap, t: f64, nx: usize, n: usize, kcut: usize) -> Self {
        let (lo, hi) = sep.chart_bounds(t);
        Self { lo, hi, nx, n, kcut }
    }

    pub fn chart(&self) -> Chart {
        Chart::new(self.lo, self.hi, self.nx, self.n, self.kcut)
    }
}

/// A momentum-quadratic Hamiltonian sampled on a chart.
#[derive(Debug, Clone)]
pub struct ChartJet {
    pub spec: ChartSpec,
    pub chart: Chart,
    /// Signed hyperbolicity: negative for the stable (sputnik) runs.
    pub lambda: f64,
    pub omega: Vec<f64>,
    pub f: Field,
    /// Momentum gradient at `p = 0`, components `(y, I₁, …)`.
    pub x: Vec<Field>,
    /// Momentum Hessian (symmetric, stored in full).
    pub q: Vec<Vec<Field>>,
}

impl ChartJet {
    /// Samples a degree-≤2 jet in `(y, I, x, φ)` form on the chart.
    pub fn from_jet(jet: &MomentumJet, spec: ChartSpec, lambda: f64, omega: &[f64]) -> Result<Self> {
        if jet.energy_time {
            return Err(Error::Precondition("KAM charts take jets in (y, x) form, not energy-time".into()));
        }
        if jet.degree() > 2 {
            return Err(Error::OrderDeficit(format!("jet degree {} exceeds 2", jet.degree())));
        }
        let np1 = jet.momenta;
        if np1 != spec.n + 1 || omega.len() != spec.n {
            return Err(Error::DimensionMismatch(format!(
                "jet has {np1} momenta, chart has {} angles, ω has {}",
                spec.n,
                omega.len()
            )));
        }
        let chart = spec.chart();
        let sample = |t: Option<FourierTable>| match t {
            Some(t) => chart.sample_table(&t, 0.0, &[], &jet.shear),
            None => chart.constant(0.0),
        };
        let f = sample(jet.f().cloned());
        let x: Vec<Field> = (0..np1).map(|i| sample(jet.linear(i).cloned())).collect();
        let q: Vec<Vec<Field>> = (0..np1).map(|i| (0..np1).map(|j| sample(jet.hessian(i, j))).collect()).collect();
        Ok(Self { spec, chart, lambda, omega: omega.to_vec(), f, x, q })
    }

    pub fn momenta(&self) -> usize {
        self.x.len()
    }

    /// `ψ` at the x nodes.
    fn psi_nodes(&self, sep: &SeparatrixMap) -> Vec<f64> {
        self.chart.cheb.nodes.iter().map(|&x| sep.psi_at(x)).collect()
    }

    /// Drift perturbation `g = X − (λψ, ω)`.
    pub fn drift_perturbation(&self, sep: &SeparatrixMap) -> Vec<Field> {
        let np = self.chart.nphi();
        let psi = self.psi_nodes(sep);
        let mut g = self.x.clone();
        for (i, v) in g[0].vals.iter_mut().enumerate() {
            *v -= self.lambda * psi[i / np];
        }
        for a in 0..self.chart.n {
            g[a + 1] = g[a + 1].add_const(-self.omega[a]);
        }
        g
    }

    /// `(μ, ν)`: sup of the oscillating part of `f` and of `g`.
    pub fn perturbation(&self, sep: &SeparatrixMap) -> (f64, f64) {
        let f0 = self.chart.average_at_infinity(&self.f);
        let mu = self.f.add_const(-f0).max_abs();
        let nu = self.drift_perturbation(sep).iter().fold(0.0f64, |m, g| m.max(g.max_abs()));
        (mu, nu)
    }

    /// `H(P(q), q)` at every node for momentum fields `P`.
    pub fn energy_on(&self, p: &[Field]) -> Field {
        let k = self.momenta();
        let vals = (0..self.chart.npts())
            .map(|g| {
                let mut h = self.f.vals[g];
                for i in 0..k {
                    h += self.x[i].vals[g] * p[i].vals[g];
                    for j in 0..k {
                        h += 0.5 * self.q[i][j].vals[g] * p[i].vals[g] * p[j].vals[g];
                    }
                }
                h
            })
            .collect();
        Field { vals }
    }

    /// Averages at infinity of the rotator block of `Q`.
    fn twist(&self) -> DMatrix<f64> {
        let n = self.chart.n;
        DMatrix::from_fn(n, n, |a, b| self.chart.average_at_infinity(&self.q[a + 1][b + 1]))
    }
}

/// An affine canonical transformation `Ψ(a, S)` on a chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCanonical {
    pub chart: ChartSpec,
    /// Torus displacement `b_x(0, ·)` as a table over φ.
    pub b0: FourierTable,
    /// Base displacement `a − id`, components `(x, φ₁, …)`; the x-component
    /// minus `b0` vanishes at `x = 0`.
    pub b: Vec<Field>,
    pub xi: Vec<f64>,
    pub s_hat: Field,
    pub c0: f64,
    pub c1: f64,
}

impl AffineCanonical {
    pub fn identity(spec: ChartSpec) -> Self {
        let chart = spec.chart();
        let z = chart.constant(0.0);
        Self {
            chart: spec,
            b0: FourierTable::zeros(spec.n, &vec![spec.kcut; spec.n]),
            b: vec![z.clone(); spec.n + 1],
            xi: vec![0.0; spec.n],
            s_hat: z,
            c0: 0.0,
            c1: 0.0,
        }
    }

    fn with_b(spec: ChartSpec, chart: &Chart, b: Vec<Field>, xi: Vec<f64>, s_hat: Field, c0: f64, c1: f64) -> Self {
        let b0 = torus_table(chart, &b[0]);
        Self { chart: spec, b0, b, xi, s_hat, c0, c1 }
    }

    /// `self ∘ later`: base maps compose as `a₁∘a₂`, generating functions as
    /// `S₁ + S₂∘a₁⁻¹`.
    pub fn compose(&self, later: &AffineCanonical) -> Result<AffineCanonical> {
        if self.chart != later.chart {
            return Err(Error::DimensionMismatch("composing maps on different charts".into()));
        }
        let chart = self.chart.chart();
        let n = chart.n;
        // b = b₂ + b₁∘(id + b₂)
        let b1: Vec<&Field> = self.b.iter().collect();
        let moved = eval_displaced(&chart, &b1, &later.b);
        let b: Vec<Field> = later.b.iter().zip(&moved).map(|(u, v)| u.add(v)).collect();
        // Ŝ = Ŝ₁ + Ŝ₂∘a₁⁻¹ − ⟨ξ₂, b₁_φ∘a₁⁻¹⟩
        let inv = inverse_displacement(&chart, &self.b);
        let mut fields: Vec<&Field> = vec![&later.s_hat];
        for a in 0..n {
            fields.push(&self.b[a + 1]);
        }
        let pulled = eval_displaced(&chart, &fields, &inv);
        let mut s_hat = self.s_hat.add(&pulled[0]);
        for a in 0..n {
            s_hat = s_hat.sub(&pulled[a + 1].scale(later.xi[a]));
        }
        let xi: Vec<f64> = self.xi.iter().zip(&later.xi).map(|(u, v)| u + v).collect();
        Ok(Self::with_b(self.chart, &chart, b, xi, s_hat, later.c0, self.c1 + later.c1))
    }

    /// Momentum fields `dS = (Ŝ_x, ξ + Ŝ_φ)` at the nodes.
    pub fn momentum(&self, chart: &Chart) -> Vec<Field> {
        let mut g = chart.grad(&self.s_hat);
        for a in 0..chart.n {
            g[a + 1] = g[a + 1].add_const(self.xi[a]);
        }
        g
    }

    /// Largest `|b|` over the grid.
    pub fn displacement(&self) -> f64 {
        self.b.iter().fold(0.0f64, |m, f| m.max(f.max_abs()))
    }
}

/// `u(0, ·)` as a table over φ.
fn torus_table(chart: &Chart, u: &Field) -> FourierTable {
    let n = chart.n;
    let r = chart.restrict(u, 0.0);
    if n == 0 {
        return FourierTable::constant(0, &[], r[0]);
    }
    FourierTable::analyze(&r, &vec![chart.m; n], &vec![chart.kcut; n])
}

/// Values of `fields` at the displaced nodes `q + disp(q)`.
fn eval_displaced(chart: &Chart, fields: &[&Field], disp: &[Field]) -> Vec<Field> {
    if disp.iter().all(|d| d.max_abs() == 0.0) {
        return fields.iter().map(|f| (*f).clone()).collect();
    }
    let cs: Vec<Coeffs> = fields.iter().map(|f| chart.coeffs(f)).collect();
    let refs: Vec<&Coeffs> = cs.iter().collect();
    let np = chart.nphi();
    let rows: Vec<Vec<f64>> = (0..chart.npts())
        .into_par_iter()
        .map(|g| {
            let (i, j) = (g / np, g % np);
            let x = chart.cheb.nodes[i] + disp[0].vals[g];
            let phi: Vec<f64> = chart.phi(j).iter().enumerate().map(|(a, p)| p + disp[a + 1].vals[g]).collect();
            chart.eval_many(&refs, x, &phi)
        })
        .collect();
    (0..fields.len()).map(|k| Field { vals: rows.iter().map(|r| r[k]).collect() }).collect()
}

/// Displacement `d` with `a⁻¹(q) = q + d(q)` for `a = id + b`
/// (fixed-point iteration `d = −b(q + d)`).
fn inverse_displacement(chart: &Chart, b: &[Field]) -> Vec<Field> {
    let refs: Vec<&Field> = b.iter().collect();
    let mut d: Vec<Field> = b.iter().map(|f| f.scale(-1.0)).collect();
    for _ in 0..60 {
        let next: Vec<Field> = eval_displaced(chart, &refs, &d).into_iter().map(|f| f.scale(-1.0)).collect();
        let change = next.iter().zip(&d).fold(0.0f64, |m, (u, v)| m.max(u.sub(v).max_abs()));
        d = next;
        if change <= 1e-17 * (1.0 + b.iter().fold(0.0f64, |m, f| m.max(f.max_abs()))) {
            break;
        }
    }
    d
}

/// Jacobian `Da = I + Db` at the nodes, row-major per node.
fn base_jacobian(chart: &Chart, b: &[Field]) -> Vec<DMatrix<f64>> {
    let k = b.len();
    let grads: Vec<Vec<Field>> = b.iter().map(|f| chart.grad(f)).collect();
    (0..chart.npts())
        .map(|g| DMatrix::from_fn(k, k, |r, c| grads[r][c].vals[g] + if r == c { 1.0 } else { 0.0 }))
        .collect()
}

/// `H∘Ψ` for a quadratic chart jet: with `P₀ = dS(a(q'))`, `A = Da(q')`,
/// * `f' = H(P₀, a(q'))`,
/// * `X' = A⁻¹ (X + Q P₀)(a(q'))`,
/// * `Q' = A⁻¹ Q(a(q')) A^{-T}`.
///
/// Only the perturbations `g = X − (λψ, ω)` and `Q − ⟨Q⟩` are interpolated
/// at the displaced nodes; the drift and the averaged Hessian are added back
/// exactly, so interpolation round-off scales with the perturbation.  The
/// drift reference of the result is `h.lambda + psi.c1`.
pub fn pullback(h: &ChartJet, psi: &AffineCanonical, sep: &SeparatrixMap) -> Result<ChartJet> {
    if psi.chart != h.spec {
        return Err(Error::DimensionMismatch("map and Hamiltonian live on different charts".into()));
    }
    let chart = &h.chart;
    let k = h.momenta();
    let dsf = psi.momentum(chart);
    let g = h.drift_perturbation(sep);
    let qbar: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| chart.average_at_infinity(&h.q[i][j])).collect()).collect();
    let qosc: Vec<Vec<Field>> = (0..k).map(|i| (0..k).map(|j| h.q[i][j].add_const(-qbar[i][j])).collect()).collect();
    let mut fields: Vec<&Field> = vec![&h.f];
    fields.extend(g.iter());
    for i in 0..k {
        for j in i..k {
            fields.push(&qosc[i][j]);
        }
    }
    fields.extend(dsf.iter());
    let mut at = eval_displaced(chart, &fields, &psi.b);
    let np = chart.nphi();
    for (gi, v) in at[1].vals.iter_mut().enumerate() {
        let x = chart.cheb.nodes[gi / np] + psi.b[0].vals[gi];
        *v += h.lambda * sep.psi_at(x);
    }
    for a in 0..chart.n {
        at[2 + a] = at[2 + a].add_const(h.omega[a]);
    }
    let mut idx = 1 + k;
    for i in 0..k {
        for j in i..k {
            at[idx] = at[idx].add_const(qbar[i][j]);
            idx += 1;
        }
    }
    let jac = base_jacobian(chart, &psi.b);
    let npts = chart.npts();
    let out: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..npts)
        .into_par_iter()
        .map(|g| {
            let f = at[0].vals[g];
            let x: Vec<f64> = (0..k).map(|i| at[1 + i].vals[g]).collect();
            let mut qm = DMatrix::<f64>::zeros(k, k);
            let mut idx = 1 + k;
            for i in 0..k {
                for j in i..k {
                    qm[(i, j)] = at[idx].vals[g];
                    qm[(j, i)] = at[idx].vals[g];
                    idx += 1;
                }
            }
            let p0 = nalgebra::DVector::from_fn(k, |i, _| at[idx + i].vals[g]);
            let xv = nalgebra::DVector::from_vec(x);
            let qp = &qm * &p0;
            let f_new = f + xv.dot(&p0) + 0.5 * p0.dot(&qp);
            let a = &jac[g];
            let ainv = a.clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(k, k, f64::NAN));
            let x_new = &ainv * (xv + qp);
            let q_new = &ainv * qm * ainv.transpose();
            (f_new, x_new.iter().copied().collect(), q_new.iter().copied().collect())
        })
        .collect();
    if let Some(g) = jac.iter().position(|a| a.determinant() <= 0.0 || !a.determinant().is_finite()) {
        return Err(Error::Fold(format!("det Da ≤ 0 at node {g}")));
    }
    let f = Field { vals: out.iter().map(|o| o.0).collect() };
    let x: Vec<Field> = (0..k).map(|i| Field { vals: out.iter().map(|o| o.1[i]).collect() }).collect();
    // nalgebra stores column-major; the Hessian is symmetric anyway.
    let q: Vec<Vec<Field>> =
        (0..k).map(|i| (0..k).map(|j| Field { vals: out.iter().map(|o| 0.5 * (o.2[i + j * k] + o.2[j + i * k])).collect() }).collect()).collect();
    Ok(ChartJet { spec: h.spec, chart: h.chart.clone(), lambda: h.lambda + psi.c1, omega: h.omega.clone(), f, x, q })
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiag {
    pub mu: f64,
    pub nu: f64,
    pub lambda: f64,
    /// Largest Hessian entry.
    pub m: f64,
    /// Smallest eigenvalue modulus of the averaged twist `⟨Q_II⟩`.
    pub r: f64,
    pub mu_next: f64,
    pub nu_next: f64,
    pub lambda_next: f64,
    pub c0: f64,
    pub c1: f64,
    pub xi: Vec<f64>,
    /// Predicted `μ'/μ²` from the quadratic terms `⟨g, dS⟩ + ½⟨Q dS, dS⟩`.
    pub c_eta: f64,
    /// Largest base displacement.
    pub b_sup: f64,
}

fn psi_closure(sep: &SeparatrixMap) -> impl Fn(f64) -> (f64, f64) + '_ {
    move |x| (sep.psi_at(x), sep.dpsi_at(x))
}

/// One Newton step.  Returns the step map, `H∘Ψ` and diagnostics.
pub fn kam_step(h: &ChartJet, sep: &SeparatrixMap, freq: &Frequency) -> Result<(AffineCanonical, ChartJet, StepDiag)> {
    let chart = &h.chart;
    let n = chart.n;
    let k = n + 1;
    if freq.omega != h.omega {
        return Err(Error::DimensionMismatch("frequency differs from the jet's drift".into()));
    }
    let (mu, nu) = h.perturbation(sep);
    let twist = h.twist();
    let m = h.q.iter().flatten().fold(0.0f64, |a, f| a.max(f.max_abs()));
    let r = if n == 0 { 1.0 } else { twist.clone().symmetric_eigenvalues().iter().fold(f64::INFINITY, |a, v| a.min(v.abs())) };
    if n > 0 && r < 1e-12 * m.max(1.0) {
        return Err(Error::TwistDegeneracy(format!("smallest eigenvalue of ⟨Q_II⟩ is {r:.3e}")));
    }
    let psi = psi_closure(sep);
    let pp0 = sep.psi_pp0();
    let lam = h.lambda;
    if mu == 0.0 && nu == 0.0 {
        let id = AffineCanonical::identity(h.spec);
        let c0 = chart.average_at_infinity(&h.f);
        let diag = StepDiag {
            mu,
            nu,
            lambda: lam,
            m,
            r,
            mu_next: 0.0,
            nu_next: 0.0,
            lambda_next: lam,
            c0,
            c1: 0.0,
            xi: vec![0.0; n],
            c_eta: 0.0,
            b_sup: 0.0,
        };
        return Ok((AffineCanonical { c0, ..id }, h.clone(), diag));
    }
    // (ii) λψŜ_x + ω·Ŝ_φ = ⟨f⟩ − f.
    let sol = chart_transport(chart, &psi, pp0, lam, freq, &h.f.scale(-1.0), TransportKind::Plain)?;
    let s_hat = sol.u;
    let f_inf = chart.average_at_infinity(&h.f);
    let mut ds = chart.grad(&s_hat);
    // (iii) g₁ = g + Q dŜ, then (iv) ξ = −⟨Q_II⟩⁻¹⟨G₁⟩.
    let g = h.drift_perturbation(sep);
    let qdot = |p: &[Field]| -> Vec<Field> {
        (0..k)
            .map(|i| {
                let mut acc = Field::zeros(chart.npts());
                for j in 0..k {
                    acc = acc.add(&h.q[i][j].mul(&p[j]));
                }
                acc
            })
            .collect()
    };
    let g1_hat: Vec<Field> = g.iter().zip(qdot(&ds)).map(|(u, v)| u.add(&v)).collect();
    let xi: Vec<f64> = if n == 0 {
        vec![]
    } else {
        let rhs = nalgebra::DVector::from_fn(n, |a, _| chart.average_at_infinity(&g1_hat[a + 1]));
        let sol = twist.clone().lu().solve(&rhs).ok_or_else(|| Error::TwistDegeneracy("⟨Q_II⟩ is singular".into()))?;
        sol.iter().map(|v| -v).collect()
    };
    for a in 0..n {
        ds[a + 1] = ds[a + 1].add_const(xi[a]);
    }
    let g1: Vec<Field> = g.iter().zip(qdot(&ds)).map(|(u, v)| u.add(&v)).collect();
    // (i) c₀ = ⟨f⟩ + ⟨ω, ξ⟩.
    let c0 = f_inf + xi.iter().zip(&h.omega).map(|(a, b)| a * b).sum::<f64>();
    // Predicted size of the next f from its quadratic part.
    let qds = qdot(&ds);
    let mut quad = Field::zeros(chart.npts());
    for i in 0..k {
        quad = quad.add(&g[i].mul(&ds[i])).add(&qds[i].mul(&ds[i]).scale(0.5));
    }
    let quad_inf = chart.average_at_infinity(&quad);
    let c_eta = if mu > 0.0 { quad.add_const(-quad_inf).max_abs() / (mu * mu) } else { 0.0 };
    // (v) conjugation of the drift on the zero section.
    let bx = chart_transport(chart, &psi, pp0, lam, freq, &g1[0], TransportKind::Minus)?;
    log::debug!("radial conjugation residual {:.3e}", chart_residual(chart, &psi, lam, freq, &bx, &g1[0], TransportKind::Minus));
    let c1 = bx.c;
    let mut b = vec![bx.u];
    let gscale = g1.iter().fold(0.0f64, |a, f| a.max(f.max_abs()));
    for a in 0..n {
        let sa = chart_transport(chart, &psi, pp0, lam, freq, &g1[a + 1], TransportKind::Plain)?;
        if sa.c.abs() > 1e-8 * gscale.max(f64::MIN_POSITIVE) {
            return Err(Error::ResidualMean(format!("angular component {a} keeps mean {:.3e} after ξ", sa.c)));
        }
        log::debug!("angular conjugation residual {:.3e}", chart_residual(chart, &psi, lam, freq, &sa, &g1[a + 1], TransportKind::Plain));
        b.push(sa.u);
    }
    let step = AffineCanonical::with_b(h.spec, chart, b, xi.clone(), s_hat, c0, c1);
    // (vi) H' = H∘Ψ.
    let next = pullback(h, &step, sep)?;
    let (mu_next, nu_next) = next.perturbation(sep);
    let diag = StepDiag {
        mu,
        nu,
        lambda: lam,
        m,
        r,
        mu_next,
        nu_next,
        lambda_next: next.lambda,
        c0,
        c1,
        xi,
        c_eta,
        b_sup: step.displacement(),
    };
    log::debug!(
        "kam step: μ = {mu:.3e} → {mu_next:.3e}, ν = {nu:.3e} → {nu_next:.3e}, c₁ = {c1:.3e}, |b| = {:.3e}",
        diag.b_sup
    );
    Ok((step, next, diag))
}

/// Iteration options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KamOptions {
    pub max_iter: usize,
    /// Stop once `max(μ_j, ν_j) < rel_tol · max(μ₀, ν₀)`.
    pub rel_tol: f64,
    /// Initial analyticity loss `δ₀`; step `j` spends `δ₀ 2^{-j}`.
    pub delta0: f64,
}

impl Default for KamOptions {
    fn default() -> Self {
        Self { max_iter: 8, rel_tol: 1e-12, delta0: 0.05 }
    }
}

/// One record of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamRecord {
    pub j: usize,
    pub delta: f64,
    pub accepted: bool,
    /// Hamilton–Jacobi residual of the composed map after this step.
    pub residual: f64,
    #[serde(flatten)]
    pub step: StepDiag,
}

/// Iteration log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KamDiagnostics {
    pub records: Vec<KamRecord>,
    /// Total analyticity spend `Σ δ_j` of the accepted steps.
    pub spend: f64,
    /// Why the iteration stopped.
    pub stop: String,
}

impl KamDiagnostics {
    /// CSV with columns `j, mu, nu, lambda, M, R, residual`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("j,mu,nu,lambda,M,R,residual\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.j,
                fmt17(r.step.mu),
                fmt17(r.step.nu),
                fmt17(r.step.lambda),
                fmt17(r.step.m),
                fmt17(r.step.r),
                fmt17(r.residual)
            ));
        }
        s
    }

    /// `μ_j` of the accepted steps followed by the final `μ`.
    pub fn mu_sequence(&self) -> Vec<f64> {
        let acc: Vec<&KamRecord> = self.records.iter().filter(|r| r.accepted).collect();
        let mut v: Vec<f64> = acc.iter().map(|r| r.step.mu).collect();
        if let Some(last) = acc.last() {
            v.push(last.step.mu_next);
        }
        v
    }
}

/// `%.17g`-style formatting: shortest round-trip representation.
pub fn fmt17(v: f64) -> String {
    format!("{v:e}")
}

/// Output of [`kam_iterate`].
#[derive(Debug, Clone)]
pub struct KamRun {
    pub total: AffineCanonical,
    pub h_final: ChartJet,
    pub diag: KamDiagnostics,
    pub residual: f64,
}

/// Round-off floors `(μ, ν)`: `μ` is limited by the relative accuracy of
/// the chart representation, `ν` by the ulp of the unperturbed drift.
fn noise_floors(h: &ChartJet, mu0: f64) -> (f64, f64) {
    let drift = h.x.iter().fold(0.0f64, |a, f| a.max(f.max_abs()));
    (1e4 * f64::EPSILON * mu0, 64.0 * f64::EPSILON * drift.max(1.0))
}

/// Newton iteration: composes `Ψ₁∘Ψ₂∘…` until `μ_j < rel_tol·μ₀`, the
/// round-off floor is reached, or `max_iter` steps were taken.
///
/// A step is accepted iff `μ' < μ/2` and `ν' ≤ max(max(μ, ν)/2, ν_floor)`
/// (a step may create drift perturbations of order `μ²`).  A rejected step at the round-off floor ends the
/// iteration; elsewhere it is an error.
pub fn kam_iterate(h0: &ChartJet, sep: &SeparatrixMap, freq: &Frequency, opts: &KamOptions) -> Result<KamRun> {
    let (mu0, nu0) = h0.perturbation(sep);
    let mut total = AffineCanonical::identity(h0.spec);
    total.c0 = h0.chart.average_at_infinity(&h0.f);
    let mut h = h0.clone();
    let mut diag = KamDiagnostics::default();
    let (mu_floor, nu_floor) = noise_floors(h0, mu0.max(nu0));
    if mu0 == 0.0 && nu0 <= nu_floor {
        diag.stop = "unperturbed".into();
        let residual = hj_residual(h0, &total);
        return Ok(KamRun { total, h_final: h, diag, residual });
    }
    let mut increases = 0;
    diag.stop = "max_iter".into();
    for j in 0..opts.max_iter {
        let (mu, nu) = h.perturbation(sep);
        if mu <= (opts.rel_tol * mu0).max(mu_floor) && nu <= nu_floor.max(opts.rel_tol * nu0.max(mu0)) {
            diag.stop = "tolerance".into();
            break;
        }
        let delta = opts.delta0 * 0.5f64.powi(j as i32);
        let (step, next, sd) = kam_step(&h, sep, freq)?;
        let mu_ok = sd.mu_next < 0.5 * mu || sd.mu_next <= mu_floor;
        let nu_ok = sd.nu_next <= (0.5 * nu.max(mu)).max(nu_floor);
        let accepted = mu_ok && nu_ok;
        if !accepted {
            let at_floor = mu <= mu_floor && nu <= nu_floor;
            increases = if sd.mu_next > mu { increases + 1 } else { 0 };
            let msg = format!("step {j}: μ = {mu:.3e} → {:.3e}, ν = {nu:.3e} → {:.3e}", sd.mu_next, sd.nu_next);
            diag.records.push(KamRecord { j, delta, accepted, residual: f64::NAN, step: sd });
            if at_floor {
                diag.stop = "round-off floor".into();
                break;
            }
            if increases >= 2 {
                return Err(Error::Diverged(msg));
            }
            return Err(Error::StepRejected(msg));
        }
        total = total.compose(&step)?;
        h = next;
        let residual = hj_residual(h0, &total);
        diag.spend += delta;
        log::info!("kam iterate j = {j}: μ = {:.3e} ν = {:.3e} residual = {residual:.3e}", sd.mu, sd.nu);
        diag.records.push(KamRecord { j, delta, accepted, residual, step: sd });
    }
    let residual = hj_residual(h0, &total);
    Ok(KamRun { total, h_final: h, diag, residual })
}

/// `max |H(dS(q), q) − c₀|` over the chart nodes, `S = ⟨ξ, φ⟩ + Ŝ`.
pub fn hj_residual(h: &ChartJet, psi: &AffineCanonical) -> f64 {
    let p = psi.momentum(&h.chart);
    h.energy_on(&p).add_const(-psi.c0).max_abs()
}

/// Normal component of the Hamiltonian vector field along the graph
/// `p = dS(q)`: `max |ṗ − D²S·q̇|`.
pub fn invariance_defect(h: &ChartJet, psi: &AffineCanonical) -> f64 {
    let chart = &h.chart;
    let k = h.momenta();
    let p = psi.momentum(chart);
    // q̇ = X + Q p; ṗ = −∂_q H(p, q).
    let qdot: Vec<Field> = (0..k)
        .map(|i| {
            let mut acc = h.x[i].clone();
            for j in 0..k {
                acc = acc.add(&h.q[i][j].mul(&p[j]));
            }
            acc
        })
        .collect();
    let mut worst = 0.0f64;
    let fg = chart.grad(&h.f);
    let xg: Vec<Vec<Field>> = h.x.iter().map(|f| chart.grad(f)).collect();
    let qg: Vec<Vec<Vec<Field>>> = h.q.iter().map(|row| row.iter().map(|f| chart.grad(f)).collect()).collect();
    let pg: Vec<Vec<Field>> = p.iter().map(|f| chart.grad(f)).collect();
    for g in 0..chart.npts() {
        for c in 0..k {
            let mut pdot = -fg[c].vals[g];
            for i in 0..k {
                pdot -= xg[i][c].vals[g] * p[i].vals[g];
                for j in 0..k {
                    pdot -= 0.5 * qg[i][j][c].vals[g] * p[i].vals[g] * p[j].vals[g];
                }
            }
            let along: f64 = (0..k).map(|i| pg[c][i].vals[g] * qdot[i].vals[g]).sum();
            worst = worst.max((pdot - along).abs());
        }
    }
    worst
}

/// Drift conjugacy defect `max |Da·(λ'ψ, ω) − X(a(q))|` of the composed base
/// map for a Hamiltonian whose zero section is invariant (`f` constant).
pub fn conjugacy_residual(h0: &ChartJet, total: &AffineCanonical, lambda_final: f64, sep: &SeparatrixMap) -> f64 {
    let chart = &h0.chart;
    let k = h0.momenta();
    let refs: Vec<&Field> = h0.x.iter().collect();
    let at = eval_displaced(chart, &refs, &total.b);
    let jac = base_jacobian(chart, &total.b);
    let np = chart.nphi();
    let mut worst = 0.0f64;
    for g in 0..chart.npts() {
        let x = chart.cheb.nodes[g / np];
        let mut x0 = vec![lambda_final * sep.psi_at(x)];
        x0.extend(h0.omega.iter().copied());
        for r in 0..k {
            let lhs: f64 = (0..k).map(|c| jac[g][(r, c)] * x0[c]).sum();
            worst = worst.max((lhs - at[r].vals[g]).abs());
        }
    }
    worst
}

/// Full phase-space map `(p', q') ↦ (p, q)` of `Ψ` at one point.
struct PhaseMap {
    chart: Chart,
    b: Vec<Coeffs>,
    db: Vec<Vec<Coeffs>>,
    ds: Vec<Coeffs>,
    xi: Vec<f64>,
}

impl PhaseMap {
    fn new(psi: &AffineCanonical) -> Self {
        let chart = psi.chart.chart();
        let b = psi.b.iter().map(|f| chart.coeffs(f)).collect();
        let db = psi.b.iter().map(|f| chart.grad(f).iter().map(|g| chart.coeffs(g)).collect()).collect();
        let ds = chart.grad(&psi.s_hat).iter().map(|g| chart.coeffs(g)).collect();
        Self { chart, b, db, ds, xi: psi.xi.clone() }
    }

    /// `z = (q, p)` in, `(q, p)` out.
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let k = self.b.len();
        let (q, pp) = z.split_at(k);
        let bv: Vec<f64> = self.b.iter().map(|c| c.eval(q[0], &q[1..])).collect();
        let qn: Vec<f64> = q.iter().zip(&bv).map(|(a, b)| a + b).collect();
        let mut ds: Vec<f64> = self.ds.iter().map(|c| c.eval(qn[0], &qn[1..])).collect();
        for (a, x) in self.xi.iter().enumerate() {
            ds[a + 1] += x;
        }
        let da = DMatrix::from_fn(k, k, |r, c| self.db[r][c].eval(q[0], &q[1..]) + if r == c { 1.0 } else { 0.0 });
        let inv_t = da.try_inverse().map(|m| m.transpose()).unwrap_or_else(|| DMatrix::from_element(k, k, f64::NAN));
        let pv = inv_t * nalgebra::DVector::from_column_slice(pp);
        let mut out = qn;
        out.extend((0..k).map(|i| ds[i] + pv[i]));
        out
    }
}

/// `max ‖JᵀΩJ − Ω‖` over random points, `J` by central differences.
pub fn symplectic_check(psi: &AffineCanonical, samples: usize, seed: u64) -> f64 {
    let map = PhaseMap::new(psi);
    let k = map.b.len();
    let dim = 2 * k;
    let omega = DMatrix::from_fn(dim, dim, |r, c| {
        if r < k && c == r + k {
            1.0
        } else if r >= k && c + k == r {
            -1.0
        } else {
            0.0
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (map.chart.cheb.lo, map.chart.cheb.hi);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut z = vec![rng.random_range(0.5 * lo..0.5 * hi)];
        z.extend((1..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)));
        z.extend((0..k).map(|_| rng.random_range(-0.1..0.1)));
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        for c in 0..dim {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += h;
            zm[c] -= h;
            let (fp, fm) = (map.apply(&zp), map.apply(&zm));
            for r in 0..dim {
                jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        let d = jac.transpose() * &omega * &jac - &omega;
        worst = worst.max(d.abs().max());
    }
    worst
}

/// Least-squares slope of `log μ_{j+1}` against `log μ_j`.
pub fn convergence_slope(mu: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = mu.windows(2).map(|w| (w[0].ln(), w[1].ln())).collect();
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / m, sy / m);
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    num / den
}
