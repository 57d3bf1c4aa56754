//! Lattice preliminaries and the explicit chain of normal-form
//! transformations leading from the localized Hamiltonian to the
//! energy-time form consumed by the KAM engine.
//!
//! All jets use the x-representation (see [`crate::series`]): dimension 0
//! of every table carries `e^{ikx/2}`, the remaining dimensions the rotator
//! angles `φ`.  The pipeline fixes the lattice basis so that the resonant
//! vector is `k0 = (1, 0, …, 0)`; [`complete_basis`] and
//! [`diophantine_mod_check`] handle a general `k0` once, up front.

use std::f64::consts::PI;

use log::info;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homological::Frequency;
use crate::separatrix::{analyze_potential, separatrix_function, SeparatrixMap};
use crate::series::{FourierTable, MomentumJet};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Lattice data of a simple resonance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceFrame {
    pub k0: Vec<i64>,
    /// Unimodular basis with first row `k0`.
    pub basis: Vec<Vec<i64>>,
    pub p0: Vec<f64>,
    /// Quotient frequency `(⟨k_j, ω⟩)_{j ≥ 1}`.
    pub omega0: Frequency,
}

impl ResonanceFrame {
    /// Builds the frame for the full frequency `omega = DH0(p0)`.
    pub fn new(k0: &[i64], p0: Vec<f64>, omega: &[f64], tau: f64, kmax: usize) -> Result<Self> {
        if p0.len() != k0.len() || omega.len() != k0.len() {
            return Err(Error::DimensionMismatch("k0, p0 and ω must have the same length".into()));
        }
        let basis = complete_basis(k0)?;
        diophantine_mod_check(omega, k0, tau, kmax)?;
        let w = quotient_frequency(omega, &basis);
        let omega0 = Frequency::new(w, tau, kmax)?;
        Ok(Self { k0: k0.to_vec(), basis, p0, omega0 })
    }
}

/// Parameters of the model statement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub gamma0: f64,
    pub kappa0: f64,
    pub sigma0: f64,
    pub r0: f64,
    pub m0: f64,
    pub eps0: f64,
    pub lambda: f64,
    pub theta: Vec<f64>,
    /// Row-major `n × n` matrix `Θ`.
    pub big_theta: Vec<Vec<f64>>,
}

impl ModelParams {
    /// `(C M0)^{-2} R0 [λ² inf(ς0 δ0, R0)]²` with `ς0 = γ0 δ0^τ`.
    pub fn smallness_bound(&self, delta0: f64, tau: f64, c: f64) -> f64 {
        let varsigma = self.gamma0 * delta0.powf(tau);
        let inf = (varsigma * delta0).min(self.r0);
        (c * self.m0).powi(-2) * self.r0 * (self.lambda * self.lambda * inf).powi(2)
    }

    /// Checks positivity, `κ0 > 1`, `Θ` symmetric with smallest eigenvalue
    /// at least one, and `ε0` against the smallness bound.
    pub fn validate(&self, delta0: f64, tau: f64, c: f64) -> Result<()> {
        for (name, v) in [
            ("gamma0", self.gamma0),
            ("kappa0", self.kappa0),
            ("sigma0", self.sigma0),
            ("r0", self.r0),
            ("m0", self.m0),
            ("eps0", self.eps0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Precondition(format!("{name} must be positive, got {v}")));
            }
        }
        if self.kappa0 <= 1.0 {
            return Err(Error::Precondition(format!("kappa0 must exceed 1, got {}", self.kappa0)));
        }
        let n = self.theta.len();
        if self.big_theta.len() != n || self.big_theta.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("Theta must be n × n".into()));
        }
        let m = DMatrix::from_fn(n, n, |i, j| self.big_theta[i][j]);
        if (&m - m.transpose()).amax() > 1e-12 {
            return Err(Error::Precondition("Theta is not symmetric".into()));
        }
        if n > 0 {
            let min = m.symmetric_eigenvalues().min();
            if min < 1.0 - 1e-12 {
                return Err(Error::Precondition(format!("Theta has eigenvalue {min} < 1")));
            }
        }
        let bound = self.smallness_bound(delta0, tau, c);
        if self.eps0 > bound {
            return Err(Error::NormalFormRange(format!("eps0 = {:.3e} exceeds the smallness bound {bound:.3e}", self.eps0)));
        }
        Ok(())
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn int_det(m: &[Vec<i64>]) -> i64 {
    let n = m.len();
    DMatrix::from_fn(n, n, |i, j| m[i][j] as f64).determinant().round() as i64
}

/// Reduces `row` modulo `k0` so that its entry at the first non-zero
/// position `j` of `k0` lies in `[0, |k0_j|)`.
fn reduce_row(row: &mut [i64], k0: &[i64]) {
    let j = k0.iter().position(|v| *v != 0).expect("k0 is non-zero");
    let t = row[j].div_euclid(k0[j].abs()) * k0[j].signum();
    for (r, k) in row.iter_mut().zip(k0) {
        *r -= t * k;
    }
}

/// Completes a primitive integer vector to a unimodular basis with first
/// row `k0` and determinant `+1`.
///
/// Column operations of the Euclidean algorithm reduce `k0` to `e_1`; the
/// inverse operations, applied to rows of the identity, build the basis.
/// The remaining rows are then reduced modulo `k0`, which makes the result
/// canonical.
pub fn complete_basis(k0: &[i64]) -> Result<Vec<Vec<i64>>> {
    let n = k0.len();
    if n == 0 || k0.iter().all(|v| *v == 0) {
        return Err(Error::NotMinimal("k0 must be non-zero".into()));
    }
    let g = k0.iter().fold(0, |a, b| gcd(a, *b));
    if g != 1 {
        return Err(Error::NotMinimal(format!("gcd of {k0:?} is {g}")));
    }
    let mut w = k0.to_vec();
    let mut inv: Vec<Vec<i64>> = (0..n).map(|i| (0..n).map(|j| i64::from(i == j)).collect()).collect();
    loop {
        let nz: Vec<usize> = (0..n).filter(|&i| w[i] != 0).collect();
        if nz.len() == 1 {
            break;
        }
        let p = *nz.iter().min_by_key(|&&i| (w[i].abs(), i)).expect("non-empty");
        for &j in &nz {
            if j == p {
                continue;
            }
            let q = w[j] / w[p];
            w[j] -= q * w[p];
            // Column j of V minus q·column p ⇔ row p of V⁻¹ plus q·row j.
            let rj = inv[j].clone();
            for (a, b) in inv[p].iter_mut().zip(&rj) {
                *a += q * b;
            }
        }
    }
    let p = (0..n).find(|&i| w[i] != 0).expect("non-zero");
    inv.swap(0, p);
    if w[p] < 0 {
        for v in inv[0].iter_mut() {
            *v = -*v;
        }
    }
    debug_assert_eq!(inv[0], k0);
    for r in inv.iter_mut().skip(1) {
        reduce_row(r, k0);
    }
    if int_det(&inv) < 0 {
        let last = n.saturating_sub(1);
        if last == 0 {
            return Err(Error::NotMinimal(format!("{k0:?} cannot be completed with determinant +1")));
        }
        for v in inv[last].iter_mut() {
            *v = -*v;
        }
        reduce_row(&mut inv[last], k0);
    }
    Ok(inv)
}

/// `(⟨k_j, ω⟩)_{j ≥ 1}` for the rows `k_j` of the completed basis.
pub fn quotient_frequency(omega: &[f64], basis: &[Vec<i64>]) -> Vec<f64> {
    basis[1..].iter().map(|r| r.iter().zip(omega).map(|(a, b)| *a as f64 * b).sum()).collect()
}

fn lattice_l1(n: usize, r: i64) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::new();
        for v in &out {
            let used: i64 = v.iter().map(|a: &i64| a.abs()).sum();
            for k in -(r - used)..=(r - used) {
                let mut w = v.clone();
                w.push(k);
                next.push(w);
            }
        }
        out = next;
    }
    out
}

/// Empirical Diophantine constant of `ω` modulo `k0`: the minimum of
/// `|⟨k, ω⟩| |k̂|^τ` over `0 < |k̂|₁ ≤ K`, where `k̂` are the coordinates of
/// `k` along the complementary basis rows.
pub fn diophantine_mod_check(omega: &[f64], k0: &[i64], tau: f64, kmax: usize) -> Result<f64> {
    if omega.len() != k0.len() {
        return Err(Error::DimensionMismatch("ω and k0 differ in length".into()));
    }
    let res: f64 = k0.iter().zip(omega).map(|(a, b)| *a as f64 * b).sum();
    if res.abs() > 1e-12 {
        return Err(Error::Precondition(format!("⟨k0, ω⟩ = {res:.3e} ≠ 0")));
    }
    let basis = complete_basis(k0)?;
    let w = quotient_frequency(omega, &basis);
    let mut gamma = f64::INFINITY;
    for k in lattice_l1(w.len(), kmax as i64) {
        let l1: i64 = k.iter().map(|v| v.abs()).sum();
        if l1 == 0 {
            continue;
        }
        let a: f64 = k.iter().zip(&w).map(|(a, b)| *a as f64 * b).sum();
        if a.abs() < 1e-14 {
            return Err(Error::Resonance(format!("⟨{k:?}, ω̂⟩ = {a:.3e}")));
        }
        gamma = gamma.min(a.abs() * (l1 as f64).powf(tau));
    }
    Ok(gamma)
}

/// Taylor data of the integrable part at the resonant action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionJet {
    /// `D²H0(p0)` in the resonance basis, row-major `(n+1) × (n+1)`.
    pub hessian: Vec<Vec<f64>>,
    /// Supremum of the cubic Taylor remainder coefficient on the unit ball.
    #[serde(default)]
    pub cubic_bound: f64,
}

/// Converts a table that is 2π-periodic in its first angle into the
/// x-representation (mode `k` in dimension 0 becomes `2k`).
pub fn to_xrep(t: &FourierTable) -> FourierTable {
    let mut cut = t.cutoffs().to_vec();
    cut[0] *= 2;
    let mut out = FourierTable::zeros(t.dims(), &cut);
    for (k, c) in t.modes() {
        if c.norm() == 0.0 {
            continue;
        }
        let mut kk = k.clone();
        kk[0] *= 2;
        out.set(&kk, c);
    }
    out
}

fn unit(m: usize, i: usize) -> Vec<u32> {
    let mut e = vec![0; m];
    e[i] = 1;
    e
}

fn pair(m: usize, i: usize, j: usize) -> Vec<u32> {
    let mut e = vec![0; m];
    e[i] += 1;
    e[j] += 1;
    e
}

/// Constant table with the dimensions and cutoffs of `like`.
fn const_like(like: &FourierTable, v: f64) -> FourierTable {
    FourierTable::constant(like.dims(), like.cutoffs(), v)
}

/// Result of localization and scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledModel {
    pub jet: MomentumJet,
    /// `ω1 = ω0/√(ε R0)`.
    pub omega1: Vec<f64>,
    /// `Q1 = Q0/R0`.
    pub q1: Vec<Vec<f64>>,
    /// `R0`, fixed so that `Q1` has unit first entry.
    pub r0: f64,
}

/// Localizes `H0 + εH1` at the resonant action and rescales actions by
/// `√(ε/R0)` and the Hamiltonian by `1/ε`.
///
/// `h1` is given in the resonance basis with tables 2π-periodic in `x`
/// (plain convention); the result is in the x-representation.  `R0` is
/// chosen as the first diagonal entry of `Q0`, which normalizes the
/// coefficient of `y²` to `1/2`.
pub fn localize_and_scale(h0: &ActionJet, h1: &MomentumJet, frame: &ResonanceFrame, eps: f64, eps0: f64) -> Result<ScaledModel> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("ε must be positive (ω1 = ω0/√(εR0)), got {eps}")));
    }
    if eps > eps0 {
        return Err(Error::NormalFormRange(format!("ε = {eps:.3e} exceeds ε0 = {eps0:.3e}")));
    }
    let m = frame.k0.len();
    if h1.momenta != m || h0.hessian.len() != m || h0.hessian.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("H0 Hessian and H1 must match the frame dimension".into()));
    }
    let q0 = DMatrix::from_fn(m, m, |i, j| h0.hessian[i][j]);
    if (&q0 - q0.transpose()).amax() > 1e-12 || q0.clone().cholesky().is_none() {
        return Err(Error::Precondition("Q0 is not symmetric positive definite".into()));
    }
    let r0 = q0[(0, 0)];
    let omega1: Vec<f64> = frame.omega0.omega.iter().map(|w| w / (eps * r0).sqrt()).collect();
    let q1: Vec<Vec<f64>> = h0.hessian.iter().map(|r| r.iter().map(|v| v / r0).collect()).collect();
    let scale = (eps / r0).sqrt();
    let mut jet = MomentumJet::zero(m);
    let proto = h1
        .terms
        .values()
        .next()
        .map(to_xrep)
        .unwrap_or_else(|| FourierTable::zeros(m, &vec![0; m]));
    for (e, t) in &h1.terms {
        let deg: u32 = e.iter().sum();
        jet.add_term(e.clone(), &to_xrep(t).scale(scale.powi(deg as i32)))?;
    }
    for (j, w) in omega1.iter().enumerate() {
        jet.add_term(unit(m, j + 1), &const_like(&proto, *w))?;
    }
    for i in 0..m {
        for j in i..m {
            let c = if i == j { 0.5 * q1[i][i] } else { q1[i][j] };
            if c != 0.0 {
                jet.add_term(pair(m, i, j), &const_like(&proto, c))?;
            }
        }
    }
    // ε^{-1} O3(√(ε/R0) p) on the unit ball.
    jet.remainder_bound = h0.cubic_bound * eps.sqrt() * r0.powf(-1.5) + h1.remainder_bound * scale.powi(3);
    jet.validate()?;
    Ok(ScaledModel { jet, omega1, q1, r0 })
}

/// `∂/∂φ_j` of an x-representation table (`j` counts rotators from 0).
fn dphi(t: &FourierTable, j: usize) -> FourierTable {
    t.differentiate(j + 1)
}

/// Splits `v(x, φ)` into its φ-mean (modes with `k_φ = 0`) and the rest.
pub fn phi_mean_split(v: &FourierTable) -> (FourierTable, FourierTable) {
    let mut mean = FourierTable::zeros(v.dims(), v.cutoffs());
    for (k, c) in v.modes() {
        if c.norm() != 0.0 && k[1..].iter().all(|a| *a == 0) && k[0] >= 0 {
            mean.set(&k, c);
        }
    }
    let osc = v.sub(&mean).expect("same dims");
    (mean, osc)
}

/// Output of [`average_out`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub h_nu: MomentumJet,
    pub s_nu: FourierTable,
    /// φ-mean `U(x)` of the momentum-independent term (x-representation).
    pub u: FourierTable,
    /// Residual of `D_ω S_ν + {H1(0, ·)}`.
    pub pde_residual: f64,
    pub f1_norm: f64,
    pub g1_norm: f64,
}

fn l1_norm(t: &FourierTable) -> f64 {
    t.modes().map(|(_, c)| c.norm()).sum()
}

/// Removes the φ-oscillatory part of the momentum-independent term by the
/// change `p → p + dS_ν`, `D_{ω1} S_ν = −{H1(0, x, φ)}`, with `S_ν` of zero
/// φ-average for every `x`.
pub fn average_out(h: &MomentumJet, omega1: &Frequency) -> Result<Averaged> {
    let m = h.momenta;
    if omega1.n() + 1 != m {
        return Err(Error::DimensionMismatch("ω1 must have one entry per rotator".into()));
    }
    let f = h.f().cloned().ok_or_else(|| Error::Precondition("Hamiltonian has no momentum-independent term".into()))?;
    let (u, osc) = phi_mean_split(&f);
    let mut s = FourierTable::zeros(f.dims(), f.cutoffs());
    for (k, c) in osc.modes() {
        if c.norm() == 0.0 || k[1..].iter().all(|a| *a == 0) {
            continue;
        }
        let a = omega1.divisor(&k[1..])?;
        s.set(&k, -c / (I * a));
    }
    let mut dom = FourierTable::zeros(f.dims(), f.cutoffs());
    for (j, w) in omega1.omega.iter().enumerate() {
        dom = dom.add(&dphi(&s, j).scale(*w))?;
    }
    let pde_residual = dom.add(&osc)?.max_abs();
    let mut zeta = vec![Some(s.dx())];
    for j in 0..omega1.n() {
        zeta.push(Some(dphi(&s, j)));
    }
    let h_nu = h.shift_momentum(&zeta)?;
    let f1 = h_nu.f().cloned().unwrap_or_else(|| const_like(&f, 0.0)).sub(&u)?;
    let mut g1_norm = 0.0f64;
    for i in 0..m {
        let old = h.linear(i).cloned().unwrap_or_else(|| const_like(&f, 0.0));
        if let Some(new) = h_nu.linear(i) {
            g1_norm = g1_norm.max(l1_norm(&new.sub(&old)?));
        }
    }
    let f1_norm = l1_norm(&f1);
    let u_norm = l1_norm(&u);
    info!("average_out: |U| = {u_norm:.3e}, |f1| = {f1_norm:.3e}, |g1| = {g1_norm:.3e}, PDE residual = {pde_residual:.3e}");
    if u_norm > 0.0 && f1_norm > 0.5 * u_norm {
        return Err(Error::NormalFormRange(format!("|f1| = {f1_norm:.3e} is not small against |U| = {u_norm:.3e}")));
    }
    Ok(Averaged { h_nu, s_nu: s, u, pde_residual, f1_norm, g1_norm })
}

/// Lifts the one-dimensional x-representation `ψ` into the table space of
/// the jet.
pub fn lift_psi(sep: &SeparatrixMap, dims: usize) -> FourierTable {
    let mut cut = vec![0; dims];
    cut[0] = sep.psi.cutoffs()[0];
    let positions = [0usize];
    sep.psi.embed(dims, &cut, &positions)
}

fn table_dims(h: &MomentumJet) -> Result<usize> {
    h.terms.values().next().map(|t| t.dims()).ok_or_else(|| Error::Precondition("empty jet".into()))
}

/// The change `y → y + λψ(x)`: moves the unperturbed separatrix branch to
/// the zero section.
pub fn shift_separatrix(h_nu: &MomentumJet, sep: &SeparatrixMap) -> Result<MomentumJet> {
    let dims = table_dims(h_nu)?;
    let mut zeta = vec![None; h_nu.momenta];
    zeta[0] = Some(lift_psi(sep, dims).scale(sep.lambda));
    let mut out = h_nu.shift_momentum(&zeta)?;
    // ½λ²ψ² + U cancels identically; drop the round-off it leaves behind.
    if let Some(f) = out.terms.get_mut(&vec![0; h_nu.momenta]) {
        let scale = l1_norm(f).max(1.0);
        *f = f.clone().prune_abs(1e-15 * scale);
    }
    Ok(out)
}

/// Substitutes `p = A p'` in a degree-two jet.
fn linear_momentum_change(h: &MomentumJet, a: &[Vec<f64>]) -> Result<MomentumJet> {
    let m = h.momenta;
    let mut out = MomentumJet { terms: Default::default(), ..h.clone() };
    for (e, t) in &h.terms {
        let idx: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, e[i] as usize)).collect();
        match idx.len() {
            0 => out.add_term(e.clone(), t)?,
            1 => {
                for j in 0..m {
                    let c = a[idx[0]][j];
                    if c != 0.0 {
                        out.add_term(unit(m, j), &t.scale(c))?;
                    }
                }
            }
            _ => {
                for j in 0..m {
                    for l in 0..m {
                        let c = a[idx[0]][j] * a[idx[1]][l];
                        if c != 0.0 {
                            out.add_term(pair(m, j, l), &t.scale(c))?;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The cross-term vector `θ` read off the constant part of the `y I_j`
/// coefficients.
pub fn cross_theta(h: &MomentumJet) -> Vec<f64> {
    let m = h.momenta;
    (1..m)
        .map(|j| h.terms.get(&pair(m, 0, j)).map_or(0.0, |t| t.average()))
        .collect()
}

/// `Ξ_θ`: `y = y' − ⟨θ, I⟩`, `φ = φ' + θ x`.  The shear is recorded on the
/// jet, so tables keep their 4π-periodic form.
pub fn eliminate_theta(h_psi: &MomentumJet, theta: &[f64]) -> Result<MomentumJet> {
    let m = h_psi.momenta;
    if theta.len() + 1 != m {
        return Err(Error::DimensionMismatch("θ must have one entry per rotator".into()));
    }
    let mut a: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for (j, t) in theta.iter().enumerate() {
        a[0][j + 1] = -t;
    }
    let mut out = linear_momentum_change(h_psi, &a)?;
    for (s, t) in out.shear.iter_mut().zip(theta) {
        *s += t;
    }
    // Round-off of the eliminated cross and λψ⟨θ,I⟩ terms.
    for t in out.terms.values_mut() {
        let scale = l1_norm(t).max(1.0);
        *t = t.clone().prune_abs(1e-15 * scale);
    }
    Ok(out)
}

/// Constant part of the momentum Hessian, `D²_pp H` averaged over the base.
pub fn hessian_matrix(h: &MomentumJet) -> Vec<Vec<f64>> {
    let m = h.momenta;
    (0..m)
        .map(|i| (0..m).map(|j| h.hessian(i, j).map_or(0.0, |t| t.average())).collect())
        .collect()
}

/// Translates every table so that the result evaluates as
/// `H(y, I, x + dx, φ + dphi)` (shear included).
fn translate(h: &MomentumJet, dx: f64, dphi: &[f64]) -> MomentumJet {
    let shift: Vec<f64> = dphi.iter().zip(&h.shear).map(|(d, t)| d + t * dx).collect();
    let mut out = h.clone();
    for t in out.terms.values_mut() {
        *t = t.shift_x(dx, &shift);
    }
    out
}

/// Branch `j` of the θ-eliminated Hamiltonian: `H(y, I, x + 2πj, φ)`.
pub fn theta_branch(h_theta: &MomentumJet, j: i64) -> MomentumJet {
    translate(h_theta, 2.0 * PI * j as f64, &vec![0.0; h_theta.shear.len()])
}

/// `Ξ_s`: `y = h/χ(s)`, `x = x(s)`.  The first momentum of the result is
/// `h`; tables stay in the x-representation and the jet is flagged so that
/// the first slot is read as `h/χ(s)`.  With this convention the term
/// `λψ(x) y` becomes exactly `λh`.
pub fn to_energy_time(h_theta: &MomentumJet, sep: &SeparatrixMap) -> Result<MomentumJet> {
    if h_theta.energy_time {
        return Err(Error::NotMinusClass("jet is already in energy-time form".into()));
    }
    let dims = table_dims(h_theta)?;
    let lpsi = lift_psi(sep, dims).scale(sep.lambda);
    let gy = h_theta.linear(0).cloned().unwrap_or_else(|| const_like(&lpsi, 0.0));
    let defect = l1_norm(&gy.sub(&lpsi)?);
    if defect >= 0.5 * l1_norm(&lpsi) {
        return Err(Error::NotMinusClass(format!(
            "first momentum coefficient differs from λψ by {defect:.3e}; the χ^-1 factor would not be dominated"
        )));
    }
    let mut out = h_theta.clone();
    out.energy_time = true;
    Ok(out)
}

/// Evaluates an energy-time jet at `(h, I, s, φ)` on the given branch.
pub fn eval_energy_time(h: &MomentumJet, sep: &SeparatrixMap, hh: f64, actions: &[f64], s: f64, phi: &[f64], upper: bool) -> f64 {
    let x = sep.branch_x(s, upper);
    let mut p = vec![hh / sep.psi_at(x)];
    p.extend_from_slice(actions);
    h.eval(&p, x, phi)
}

/// Sputnik branch: the Hamiltonian `H(y, I, x + 2πβ, φ)`, which is
/// identically `H(y − 2λψ(x), I, x, φ + 2πβθ)`.  Evaluated in energy time
/// on the branch `−β` it equals `H_β ∘ 𝕴_β`; its leading term is `−λh`.
pub fn sputnik_branch(h_s: &MomentumJet, beta: i8, theta: &[f64]) -> Result<MomentumJet> {
    if beta != 1 && beta != -1 {
        return Err(Error::Domain(format!("β must be ±1, got {beta}")));
    }
    if theta.len() != h_s.shear.len() || h_s.shear.iter().zip(theta).any(|(a, b)| (a - b).abs() > 1e-15) {
        return Err(Error::DimensionMismatch("θ must match the shear recorded on the jet".into()));
    }
    Ok(theta_branch(h_s, beta as i64))
}

/// The whole chain from the scaled Hamiltonian to the energy-time form.
#[derive(Debug, Clone)]
pub struct Reduced {
    pub sep: SeparatrixMap,
    /// Jet after the optional averaging step.
    pub h_nu: MomentumJet,
    pub h_psi: MomentumJet,
    pub h_theta: MomentumJet,
    pub theta: Vec<f64>,
    /// `Q2` after the θ-elimination.
    pub q2: Vec<Vec<f64>>,
}

/// Runs separatrix shift and θ-elimination on `h_nu`, building the
/// separatrix from the φ-mean of its momentum-independent term.
///
/// The potential must have its maximum at `x = 0`.
pub fn reduce(h_nu: &MomentumJet) -> Result<Reduced> {
    let f = h_nu.f().ok_or_else(|| Error::Precondition("no potential term".into()))?;
    let (u, _) = phi_mean_split(f);
    // The φ-mean as a plain 2π-periodic table in x.
    let kx = u.cutoffs()[0];
    let mut plain = FourierTable::zeros(1, &[kx.div_ceil(2)]);
    for (k, c) in u.modes() {
        if c.norm() == 0.0 || k[1..].iter().any(|a| *a != 0) || k[0] < 0 {
            continue;
        }
        if k[0] % 2 != 0 {
            return Err(Error::Precondition("potential must be 2π-periodic in x".into()));
        }
        plain.set(&[k[0] / 2], c);
    }
    let y2 = h_nu.hessian(0, 0).map_or(0.0, |t| t.average());
    if (y2 - 1.0).abs() > 1e-12 {
        return Err(Error::Precondition(format!("coefficient of y²/2 must be 1, got {y2}")));
    }
    let prof = analyze_potential(&plain)?;
    if prof.maximizer.abs() > 1e-10 {
        return Err(Error::Precondition(format!("potential maximum at x = {:.3e}, expected 0", prof.maximizer)));
    }
    let sep = separatrix_function(&prof)?;
    let mut h_nu = h_nu.clone();
    let u0 = plain.eval(&[0.0]);
    if u0 != 0.0 {
        // The energy constant U(0) plays no role; normalize it away.
        let proto = h_nu.f().cloned().expect("checked above");
        h_nu.add_term(vec![0; h_nu.momenta], &const_like(&proto, -u0))?;
    }
    let h_psi = shift_separatrix(&h_nu, &sep)?;
    let theta = cross_theta(&h_nu);
    let h_theta = eliminate_theta(&h_psi, &theta)?;
    let q2 = hessian_matrix(&h_theta);
    Ok(Reduced { sep, h_nu, h_psi, h_theta, theta, q2 })
}
