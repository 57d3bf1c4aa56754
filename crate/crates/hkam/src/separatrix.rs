//! Separatrix function, energy-time map and strip parameters.
//!
//! For a 2π-periodic potential `U` with a unique non-degenerate maximum at
//! `x = 0` the unperturbed separatrix is `y = λψ(x)` with `ψ² = -2U/λ²`,
//! `ψ(0) = 0`, `ψ'(0) = 1`.  The time along the separatrix is
//! `s(x) = ∫ dζ/ψ(ζ)`; it maps `(0, 2π)` monotonically onto `ℝ`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{fft_size, FourierTable};

/// Coefficients of sampled tables below this fraction of the maximum are
/// round-off; keeping them would wreck complex continuation.
const SAMPLE_TOL: f64 = 1e-15;

/// Removes the round-off plateau of a sampled one-dimensional table: the
/// top quarter of the mode range is taken as the noise level and every
/// coefficient within a factor 10 of it is dropped.
fn drop_noise_plateau(t: FourierTable) -> FourierTable {
    let kc = t.cutoffs()[0] as i64;
    let floor = t
        .modes()
        .filter(|(k, _)| 4 * k[0].abs() > 3 * kc)
        .fold(0.0f64, |m, (_, c)| m.max(c.norm()));
    t.prune_abs(10.0 * floor)
}

/// Potential normalized so that its maximum sits at `x = 0` with `U(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialProfile {
    /// One-dimensional 2π-periodic table (plain convention).
    pub u: FourierTable,
    pub lambda: f64,
    /// Location of the maximum of the input potential.
    pub maximizer: f64,
}

/// Separatrix data: `ψ`, `ψ₁`, the time map and derived constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatrixMap {
    pub lambda: f64,
    /// `ψ` as a one-dimensional x-representation table (4π-periodic).
    pub psi: FourierTable,
    /// `ψ₁` with `ψ = 2 sin(x/2) ψ₁`, a 2π-periodic plain table.
    pub psi1: FourierTable,
    /// Regular part `r = (1/ψ₁ - 1)/(2 sin(x/2))` of `1/ψ` (x-representation).
    pub time_kernel: FourierTable,
    /// Additive constant of the time map.
    pub time_offset: f64,
    pub r: f64,
    pub r_psi: f64,
    pub t_psi: f64,
    /// Default time window `T = 1.5 T_ψ`.
    pub t: f64,
}

/// Result of the strip estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripEstimate {
    /// Infimum over the four level-curve segments.
    pub rho: f64,
    pub sigma2: f64,
    /// Per segment: upper branch `+ζ`, `-ζ`, lower branch `+ζ`, `-ζ`.
    pub rho4: [f64; 4],
    pub sigma4: [f64; 4],
}

/// `Σ_k c_k (e^{ikx/2} − 1)`: the x-representation table minus its value at
/// `x = 0`, without cancellation for small `x`.
fn anchored(t: &FourierTable, x: Complex64) -> Complex64 {
    let i = Complex64::new(0.0, 1.0);
    let mut s = Complex64::new(0.0, 0.0);
    for (k, c) in t.modes_1d() {
        if k == 0 || (c.re == 0.0 && c.im == 0.0) {
            continue;
        }
        let th = x * (k as f64 / 2.0);
        // e^{iθ} − 1 = 2i sin(θ/2) e^{iθ/2}
        s += c * (i * 2.0) * (th / 2.0).sin() * (i * th / 2.0).exp();
    }
    s
}

/// Converts a plain 2π-periodic one-dimensional table into the
/// x-representation (mode `k` becomes `2k`).
pub fn plain_to_xrep(t: &FourierTable) -> FourierTable {
    let k = t.cutoffs()[0];
    let mut out = FourierTable::zeros(1, &[2 * k]);
    for (m, c) in t.modes() {
        if c.norm() > 0.0 && m[0] >= 0 {
            out.set(&[2 * m[0]], c);
        }
    }
    out
}

fn second_derivative_at_zero(u: &FourierTable) -> f64 {
    u.modes().map(|(k, c)| -(k[0] * k[0]) as f64 * c.re).sum()
}

fn refine_max(u: &FourierTable, x0: f64) -> f64 {
    let d1 = u.differentiate(0);
    let d2 = d1.differentiate(0);
    let mut x = x0;
    for _ in 0..50 {
        let g = d1.eval(&[x]);
        let h = d2.eval(&[x]);
        if h >= 0.0 {
            break;
        }
        let step = g / h;
        x -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    x
}

/// Locates the absolute maximum of `U`, translates it to 0, subtracts
/// `U(0)` and returns `λ = sqrt(-U''(0))`.
pub fn analyze_potential(u: &FourierTable) -> Result<PotentialProfile> {
    if u.dims() != 1 {
        return Err(Error::DimensionMismatch("potential must be one-dimensional".into()));
    }
    let n = 4096;
    let vals: Vec<f64> = (0..n).map(|i| u.eval(&[2.0 * PI * i as f64 / n as f64])).collect();
    let mut peaks = Vec::new();
    for i in 0..n {
        let (a, b, c) = (vals[(i + n - 1) % n], vals[i], vals[(i + 1) % n]);
        if b >= a && b >= c {
            let x = refine_max(u, 2.0 * PI * i as f64 / n as f64);
            peaks.push((x.rem_euclid(2.0 * PI), u.eval(&[x])));
        }
    }
    if peaks.is_empty() {
        return Err(Error::NonHyperbolic("potential is constant".into()));
    }
    peaks.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let (xm, um) = peaks[0];
    for &(x, v) in &peaks[1..] {
        let dist = (x - xm).rem_euclid(2.0 * PI);
        let dist = dist.min(2.0 * PI - dist);
        if dist > 1e-6 && (um - v).abs() < 1e-8 {
            return Err(Error::DegenerateMaximum(format!("maxima at x = {xm:.9} and x = {x:.9}")));
        }
    }
    let shifted = u.shift_angles(&[xm]);
    let mut normalized = shifted.clone();
    normalized.set(&[0], Complex64::new(shifted.average() - um, 0.0));
    let upp = second_derivative_at_zero(&normalized);
    if upp >= -1e-8 {
        return Err(Error::NonHyperbolic(format!("U''(0) = {upp:.3e}")));
    }
    Ok(PotentialProfile { u: normalized, lambda: (-upp).sqrt(), maximizer: xm })
}

/// Builds `ψ`, `ψ₁` and the time-map data from a normalized potential.
pub fn separatrix_function(prof: &PotentialProfile) -> Result<SeparatrixMap> {
    let lam2 = prof.lambda * prof.lambda;
    let u1 = prof.u.scale(1.0 / lam2);
    let ku = prof.u.cutoffs()[0];
    let kk = (4 * ku).max(64);
    let grid = fft_size(4 * kk);
    // V = U₁/(cos x − 1) sampled on a staggered grid that avoids x = 0.
    let h = 2.0 * PI / grid as f64;
    let mut v_vals = Vec::with_capacity(grid);
    for i in 0..grid {
        let x = (i as f64 + 0.5) * h;
        v_vals.push(u1.eval(&[x]) / (x.cos() - 1.0));
    }
    for (i, v) in v_vals.iter().enumerate() {
        if *v <= 0.0 {
            return Err(Error::SquareRootBranch(format!(
                "V(x) = {v:.3e} <= 0 at x = {:.6}",
                (i as f64 + 0.5) * h
            )));
        }
    }
    let vmin = (0..2000)
        .map(|i| {
            let x = 1e-3 + (2.0 * PI - 2e-3) * i as f64 / 1999.0;
            u1.eval(&[x]) / (x.cos() - 1.0)
        })
        .fold(f64::INFINITY, f64::min);
    if vmin <= 0.0 {
        return Err(Error::SquareRootBranch(format!("V attains {vmin:.3e}")));
    }
    let unstagger = |vals: Vec<f64>| {
        drop_noise_plateau(FourierTable::analyze(&vals, &[grid], &[kk]).shift_angles(&[-h / 2.0])).prune_rel(SAMPLE_TOL)
    };
    let psi1 = unstagger(v_vals.iter().map(|v| v.sqrt()).collect());
    // ψ = 2 sin(x/2) ψ₁ in the x-representation.
    let two_sin = FourierTable::sine(1, &[1], &[1], 2.0);
    let psi = plain_to_xrep(&psi1).mul(&two_sin)?.prune_rel(SAMPLE_TOL);
    // Regular part of 1/ψ: r = (1/ψ₁ − 1)/(2 sin(x/2)), on a staggered
    // 4π grid avoiding the zeros of sin(x/2).
    let g4 = 2 * grid;
    let h4 = 4.0 * PI / g4 as f64;
    let r_vals: Vec<f64> = (0..g4)
        .map(|i| {
            let x = (i as f64 + 0.5) * h4;
            let p1 = psi1.eval(&[x]);
            (1.0 / p1 - 1.0) / (2.0 * (x / 2.0).sin())
        })
        .collect();
    // Raw angle of the x-representation is x/2, so the staggering is h4/4.
    let kernel = drop_noise_plateau(
        FourierTable::analyze(&r_vals, &[g4], &[2 * kk]).shift_angles(&[-h4 / 4.0]),
    )
    .prune_abs(SAMPLE_TOL);
    let mut sep = SeparatrixMap {
        lambda: prof.lambda,
        psi,
        psi1,
        time_kernel: kernel,
        time_offset: 0.0,
        r: 0.0,
        r_psi: 0.0,
        t_psi: 0.0,
        t: 0.0,
    };
    // s(x + 2π) = iπ − s(x) fixes the offset as −C/2 with C = ∫_π^{3π} r.
    let c = sep.kernel_integral(3.0 * PI);
    sep.time_offset = -0.5 * c;
    let rpsi = sep.nearest_zero_radius(3.0) / 2.0;
    sep.r_psi = rpsi;
    sep.r = 1.5 * rpsi;
    sep.t_psi = (-2.0 * rpsi.ln()).max(1.0);
    sep.t = 1.5 * sep.t_psi;
    Ok(sep)
}

impl SeparatrixMap {
    /// `ψ(x)` for real `x`.
    pub fn psi_at(&self, x: f64) -> f64 {
        self.psi_c(Complex64::new(x, 0.0)).re
    }

    /// `ψ(x)` for complex `x`, evaluated as `Σ c_k (e^{ikx/2} − 1)` so that
    /// the relative accuracy survives near the zero at `x = 0`.
    pub fn psi_c(&self, x: Complex64) -> Complex64 {
        anchored(&self.psi, x)
    }

    /// `η(x) = (ψ'(x) − 1)/ψ(x)`, regular at `x = 0` where it equals `ψ''(0)`.
    pub fn eta(&self, x: f64) -> f64 {
        if x == 0.0 {
            return self.psi_pp0();
        }
        let z = Complex64::new(x, 0.0);
        (anchored(&self.psi.dx(), z) / self.psi_c(z)).re
    }

    /// `ψ'(x)`.
    pub fn dpsi_at(&self, x: f64) -> f64 {
        self.psi.dx().eval_x(x, &[])
    }

    /// `ψ''(0)`.
    pub fn psi_pp0(&self) -> f64 {
        self.psi.dx().dx().eval_x(0.0, &[])
    }

    /// `∫_π^x r(ζ) dζ` evaluated termwise (complex `x` allowed).
    fn kernel_integral_c(&self, x: Complex64) -> Complex64 {
        let i = Complex64::new(0.0, 1.0);
        let mut s = Complex64::new(0.0, 0.0);
        for (k, c) in self.time_kernel.modes_1d() {
            if k == 0 || (c.re == 0.0 && c.im == 0.0) {
                // r is antiperiodic and carries no zero mode.
                continue;
            }
            let kk = k as f64 / 2.0;
            s += c / (i * kk) * ((i * kk * x).exp() - (i * kk * PI).exp());
        }
        s
    }

    fn kernel_integral(&self, x: f64) -> f64 {
        self.kernel_integral_c(Complex64::new(x, 0.0)).re
    }

    /// Time map `s(x)` on the upper branch `x ∈ (0, 2π)`.
    pub fn time_map(&self, x: f64) -> Result<f64> {
        if !(x > 0.0 && x < 2.0 * PI) {
            return Err(Error::Domain(format!("time map needs x in (0, 2π), got {x}")));
        }
        Ok((x / 4.0).tan().ln() + self.kernel_integral(x) + self.time_offset)
    }

    /// Time map for complex `x` near the upper branch.
    pub fn time_map_c(&self, x: Complex64) -> Complex64 {
        (x / 4.0).tan().ln() + self.kernel_integral_c(x) + self.time_offset
    }

    /// Inverse time map on the upper branch: `x(s) ∈ (0, 2π)`.
    pub fn inverse_time_map(&self, s: f64) -> f64 {
        let mut x = 4.0 * (s - self.time_offset).exp().atan();
        let (mut lo, mut hi) = (0.0f64, 2.0 * PI);
        for _ in 0..100 {
            let f = (x / 4.0).tan().ln() + self.kernel_integral(x) + self.time_offset - s;
            if f > 0.0 {
                hi = hi.min(x);
            } else {
                lo = lo.max(x);
            }
            let mut xn = x - f * self.psi_at(x);
            if !(xn >= lo && xn <= hi) {
                xn = 0.5 * (lo + hi);
            }
            let done = (xn - x).abs() <= 1e-16 * x.abs().max(1e-300);
            x = xn;
            if done || f == 0.0 {
                break;
            }
        }
        x
    }

    /// Inverse time map for complex `s` (continuation from `Re s`).
    pub fn inverse_time_map_c(&self, s: Complex64) -> Complex64 {
        let mut x = Complex64::new(self.inverse_time_map(s.re), 0.0);
        let steps = ((s.im.abs() / 0.05).ceil() as usize).max(1);
        for m in 1..=steps {
            let target = Complex64::new(s.re, s.im * m as f64 / steps as f64);
            for _ in 0..30 {
                let f = self.time_map_c(x) - target;
                let dx = f * self.psi_c(x);
                x -= dx;
                if dx.norm() < 1e-15 * x.norm().max(1.0) {
                    break;
                }
            }
        }
        x
    }

    /// `χ(s) = ψ(x(s))` on the upper branch.
    pub fn chi(&self, s: f64) -> f64 {
        self.psi_at(self.inverse_time_map(s))
    }

    /// Branch-aware time: for `x ∈ (0, 2π)` the upper-branch time, for
    /// `x ∈ (-2π, 0)` the real part of the lower-branch time
    /// `s(x) = iπ − s(x + 2π)`.
    pub fn branch_time(&self, x: f64) -> Result<f64> {
        if x > 0.0 {
            self.time_map(x)
        } else if x < 0.0 {
            Ok(-self.time_map(x + 2.0 * PI)?)
        } else {
            Err(Error::Domain("x = 0 corresponds to s = -∞".into()))
        }
    }

    /// Inverse of [`SeparatrixMap::branch_time`] on the given branch
    /// (`upper = true` for `x > 0`).
    pub fn branch_x(&self, s: f64, upper: bool) -> f64 {
        if upper {
            self.inverse_time_map(s)
        } else {
            self.inverse_time_map(-s) - 2.0 * PI
        }
    }

    /// Chart bounds `[x(T) on the lower branch, x(T) on the upper branch]`.
    pub fn chart_bounds(&self, t: f64) -> (f64, f64) {
        (self.branch_x(t, false), self.branch_x(t, true))
    }

    fn nearest_zero_radius(&self, halfwidth: f64) -> f64 {
        // Zeros of ψ other than 0 inside the strip |Im x| ≤ 2·halfwidth,
        // located by Newton from a seed lattice.
        let dpsi = self.psi.dx();
        let mut best = f64::INFINITY;
        let hw = 2.0 * halfwidth;
        for a in 0..48 {
            for b in 0..9 {
                let mut z = Complex64::new(-2.0 * PI + 4.0 * PI * a as f64 / 47.0, -hw + 2.0 * hw * b as f64 / 8.0);
                let mut ok = false;
                for _ in 0..60 {
                    let f = self.psi_c(z);
                    let d = dpsi.eval_xc(z, &[]);
                    if d.norm() < 1e-14 {
                        break;
                    }
                    let step = f / d;
                    z -= step;
                    if z.im.abs() > hw + 1.0 || z.re.abs() > 4.0 * PI {
                        break;
                    }
                    if step.norm() < 1e-13 {
                        ok = true;
                        break;
                    }
                }
                if ok && z.im.abs() <= hw && z.norm() > 1e-6 && self.psi_c(z).norm() < 1e-10 {
                                        best = best.min(z.norm());
                }
            }
        }
        if best.is_finite() {
            best
        } else {
            2.0 * PI
        }
    }

    /// Marches one level curve `s(x) ∈ [−T, T] + iζ` and returns the
    /// supremum of `|Im x|`, or `None` if the curve leaves the strip
    /// `|Im x| ≤ 2·halfwidth`.
    fn march(&self, zeta: f64, lower: bool, halfwidth: f64, t: f64) -> Result<Option<f64>> {
        // On the lower branch s = iπ − s(x + 2π): the segment Im s = π ± ζ is
        // traced by x' = x + 2π on s(x') = −σ ∓ iζ.
        let (z_eff, dir) = if lower { (-zeta, -1.0) } else { (zeta, 1.0) };
        let hmax = 2.0 * halfwidth;
        let step = 1e-2;
        let nsteps = (2.0 * t / step).ceil() as usize;
        let s0 = Complex64::new(-dir * t, z_eff);
        let mut x = self.inverse_time_map_c(s0);
        let mut sup = x.im.abs();
        if sup > hmax {
            return Ok(None);
        }
        for m in 1..=nsteps {
            let sigma = -t + 2.0 * t * m as f64 / nsteps as f64;
            let target = Complex64::new(dir * sigma, z_eff);
            let h = dir * 2.0 * t / nsteps as f64;
            // Heun predictor on dx/dσ = ψ(x), then one Newton correction.
            let k1 = self.psi_c(x);
            let k2 = self.psi_c(x + k1 * h);
            let mut xn = x + (k1 + k2) * (0.5 * h);
            let p = self.psi_c(xn);
            if p.norm() < 1e-12 {
                return Err(Error::LevelCurveStall(format!("ψ vanishes near x = {xn}")));
            }
            xn -= (self.time_map_c(xn) - target) * p;
            if !xn.re.is_finite() || !xn.im.is_finite() {
                return Ok(None);
            }
            x = xn;
            sup = sup.max(x.im.abs());
            if sup > hmax {
                return Ok(None);
            }
        }
        Ok(Some(sup))
    }

    /// Estimates `ρ` and `σ₂` for the strip `|Im(x/2)| ≤ halfwidth`.
    pub fn estimate_strip(&self, halfwidth: f64, t: f64) -> Result<StripEstimate> {
        let cap = PI / 2.0 - 1e-6;
        let mut rho4 = [0.0; 4];
        let mut sigma4 = [0.0; 4];
        for (idx, (lower, sign)) in [(false, 1.0), (false, -1.0), (true, 1.0), (true, -1.0)].into_iter().enumerate() {
            let (mut lo, mut hi) = (0.0f64, cap);
            let mut sup_lo = 0.0;
            if let Some(s) = self.march(sign * cap, lower, halfwidth, t)? {
                lo = cap;
                sup_lo = s;
            } else {
                while hi - lo > 1e-3 {
                    let mid = 0.5 * (lo + hi);
                    match self.march(sign * mid, lower, halfwidth, t)? {
                        Some(s) => {
                            lo = mid;
                            sup_lo = s;
                        }
                        None => hi = mid,
                    }
                }
            }
            rho4[idx] = lo.min(cap);
            sigma4[idx] = sup_lo;
        }
        let rho = rho4.iter().cloned().fold(f64::INFINITY, f64::min);
        let sigma2 = sigma4.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(StripEstimate { rho, sigma2, rho4, sigma4 })
    }
}
