//! Truncated multivariate Fourier series and momentum jets.
//!
//! A [`FourierTable`] stores the coefficients of a real trigonometric
//! polynomial densely inside the cutoff box `|k_j| <= K_j`.  The reality
//! constraint `u_{-k} = conj(u_k)` is maintained by every operation.
//!
//! Tables over the base angle `x` together with rotator angles `φ` use the
//! *x-representation*: dimension 0 is the 4π-periodic base angle and its mode
//! index `k_x` stands for `exp(i k_x x / 2)`; all other dimensions are
//! 2π-periodic.  Plain tables (functions of `φ` only, or a 2π-periodic
//! potential) use `exp(i k θ)` in every dimension.  The helpers with an `_x`
//! suffix take care of the halving.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default per-dimension cutoff.
pub const DEFAULT_CUTOFF: usize = 32;

/// Relative threshold under which coefficients are dropped after composite
/// operations.
pub const PRUNE_REL: f64 = 1e-16;

/// Analyticity parameters `(r, T, ρ, σ)` of a bi-cylinder domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StripParams {
    pub r: f64,
    /// `None` encodes an infinite cylinder.
    pub t: Option<f64>,
    pub rho: f64,
    pub sigma: f64,
}

impl StripParams {
    pub fn new(r: f64, t: Option<f64>, rho: f64, sigma: f64) -> Result<Self> {
        let ok_t = t.is_none_or(|t| t > 0.0);
        if !(r > 0.0 && ok_t && rho > 0.0 && rho <= PI / 2.0 && sigma > 0.0) {
            return Err(Error::Domain(format!(
                "strip parameters must be positive with rho in (0, pi/2]: r={r}, t={t:?}, rho={rho}, sigma={sigma}"
            )));
        }
        Ok(Self { r, t, rho, sigma })
    }

    /// Componentwise partial order `self <= other`.
    pub fn le(&self, other: &StripParams) -> bool {
        let t_le = match (self.t, other.t) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(b)) => a <= b,
        };
        self.r <= other.r && t_le && self.rho <= other.rho && self.sigma <= other.sigma
    }

    /// Shrinks `ρ` and `σ` by `delta`, keeping them positive.
    pub fn shrink(&self, delta: f64) -> StripParams {
        StripParams {
            r: self.r,
            t: self.t,
            rho: (self.rho - delta).max(f64::MIN_POSITIVE),
            sigma: (self.sigma - delta).max(f64::MIN_POSITIVE),
        }
    }
}

/// Dense truncated Fourier series of a real function on a torus.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierTable {
    dims: usize,
    cutoffs: Vec<usize>,
    coeffs: Vec<Complex64>,
}

fn shape_of(cutoffs: &[usize]) -> Vec<usize> {
    cutoffs.iter().map(|k| 2 * k + 1).collect()
}

/// Smallest 2^a 3^b 5^c not below `n`.
pub fn fft_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// In-place multidimensional FFT over a row-major array.
/// `inverse = false` computes `Σ u e^{-i k θ}` (analysis direction).
pub fn fft_nd(data: &mut [Complex64], shape: &[usize], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let total: usize = shape.iter().product();
    assert_eq!(total, data.len());
    for axis in 0..shape.len() {
        let len = shape[axis];
        if len <= 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let stride: usize = shape[axis + 1..].iter().product();
        let outer = total / (len * stride);
        let mut line = vec![Complex64::new(0.0, 0.0); len];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * len * stride + s;
                for (m, v) in line.iter_mut().enumerate() {
                    *v = data[base + m * stride];
                }
                fft.process(&mut line);
                for (m, v) in line.iter().enumerate() {
                    data[base + m * stride] = *v;
                }
            }
        }
    }
}

impl FourierTable {
    /// The zero table.
    pub fn zeros(dims: usize, cutoffs: &[usize]) -> Self {
        assert_eq!(dims, cutoffs.len(), "one cutoff per dimension");
        let len = shape_of(cutoffs).iter().product();
        Self { dims, cutoffs: cutoffs.to_vec(), coeffs: vec![Complex64::new(0.0, 0.0); len] }
    }

    /// A constant function.
    pub fn constant(dims: usize, cutoffs: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(dims, cutoffs);
        t.set(&vec![0; dims], Complex64::new(value, 0.0));
        t
    }

    /// `amp · cos(⟨k, θ⟩)`.
    pub fn cosine(dims: usize, cutoffs: &[usize], k: &[i64], amp: f64) -> Self {
        let mut t = Self::zeros(dims, cutoffs);
        t.add_to(k, Complex64::new(amp / 2.0, 0.0));
        t
    }

    /// `amp · sin(⟨k, θ⟩)`.
    pub fn sine(dims: usize, cutoffs: &[usize], k: &[i64], amp: f64) -> Self {
        let mut t = Self::zeros(dims, cutoffs);
        t.add_to(k, Complex64::new(0.0, -amp / 2.0));
        t
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn cutoffs(&self) -> &[usize] {
        &self.cutoffs
    }

    fn index(&self, k: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for (j, &kj) in k.iter().enumerate() {
            let kc = self.cutoffs[j] as i64;
            if kj.abs() > kc {
                return None;
            }
            idx = idx * (2 * self.cutoffs[j] + 1) + (kj + kc) as usize;
        }
        Some(idx)
    }

    fn multi_index(&self, mut idx: usize) -> Vec<i64> {
        let mut k = vec![0i64; self.dims];
        for j in (0..self.dims).rev() {
            let w = 2 * self.cutoffs[j] + 1;
            k[j] = (idx % w) as i64 - self.cutoffs[j] as i64;
            idx /= w;
        }
        k
    }

    /// Coefficient of mode `k` (zero outside the cutoff box).
    pub fn get(&self, k: &[i64]) -> Complex64 {
        self.index(k).map_or(Complex64::new(0.0, 0.0), |i| self.coeffs[i])
    }

    /// Sets `u_k = c` and `u_{-k} = conj(c)`.  The zero mode keeps only the
    /// real part.
    pub fn set(&mut self, k: &[i64], c: Complex64) {
        let neg: Vec<i64> = k.iter().map(|v| -v).collect();
        if k.iter().all(|&v| v == 0) {
            if let Some(i) = self.index(k) {
                self.coeffs[i] = Complex64::new(c.re, 0.0);
            }
            return;
        }
        if let (Some(i), Some(j)) = (self.index(k), self.index(&neg)) {
            self.coeffs[i] = c;
            self.coeffs[j] = c.conj();
        }
    }

    /// Adds `c` to mode `k` and `conj(c)` to mode `-k`.
    pub fn add_to(&mut self, k: &[i64], c: Complex64) {
        let cur = self.get(k);
        if k.iter().all(|&v| v == 0) {
            self.set(k, cur + Complex64::new(2.0 * c.re, 0.0));
        } else {
            self.set(k, cur + c);
        }
    }

    /// Iterates over all stored modes (including zero coefficients).
    pub fn modes(&self) -> impl Iterator<Item = (Vec<i64>, Complex64)> + '_ {
        self.coeffs.iter().enumerate().map(move |(i, c)| (self.multi_index(i), *c))
    }

    /// Modes of a one-dimensional table as `(k, u_k)`, without allocation.
    pub fn modes_1d(&self) -> impl Iterator<Item = (i64, Complex64)> + '_ {
        assert_eq!(self.dims, 1, "modes_1d needs a one-dimensional table");
        let kc = self.cutoffs[0] as i64;
        self.coeffs.iter().enumerate().map(move |(i, c)| (i as i64 - kc, *c))
    }

    /// Largest coefficient modulus.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0f64, |m, c| m.max(c.norm()))
    }

    /// Maximum violation of `u_{-k} = conj(u_k)`.
    pub fn reality_defect(&self) -> f64 {
        let mut d = 0.0f64;
        for (i, c) in self.coeffs.iter().enumerate() {
            let k = self.multi_index(i);
            let neg: Vec<i64> = k.iter().map(|v| -v).collect();
            d = d.max((self.get(&neg) - c.conj()).norm());
        }
        d
    }

    /// Returns a copy with cutoffs changed (truncating or zero padding).
    pub fn with_cutoffs(&self, cutoffs: &[usize]) -> Self {
        assert_eq!(cutoffs.len(), self.dims);
        let mut out = Self::zeros(self.dims, cutoffs);
        for (i, c) in self.coeffs.iter().enumerate() {
            if *c == Complex64::new(0.0, 0.0) {
                continue;
            }
            let k = self.multi_index(i);
            if let Some(j) = out.index(&k) {
                out.coeffs[j] = *c;
            }
        }
        out
    }

    /// Embeds a table in a space with more dimensions: the old dimension `j`
    /// becomes `positions[j]`.
    pub fn embed(&self, dims: usize, cutoffs: &[usize], positions: &[usize]) -> Self {
        assert_eq!(positions.len(), self.dims);
        let mut out = Self::zeros(dims, cutoffs);
        for (i, c) in self.coeffs.iter().enumerate() {
            if *c == Complex64::new(0.0, 0.0) {
                continue;
            }
            let k = self.multi_index(i);
            let mut kk = vec![0i64; dims];
            for (j, &p) in positions.iter().enumerate() {
                kk[p] = k[j];
            }
            if let Some(idx) = out.index(&kk) {
                out.coeffs[idx] += *c;
            }
        }
        out
    }

    /// Drops coefficients below `PRUNE_REL` times the table maximum.
    pub fn prune(self) -> Self {
        self.prune_rel(PRUNE_REL)
    }

    /// Drops coefficients below `tol` times the table maximum.
    pub fn prune_rel(self, tol: f64) -> Self {
        let thr = tol * self.max_abs();
        self.prune_abs(thr)
    }

    /// Drops coefficients of modulus below `thr`.
    pub fn prune_abs(mut self, thr: f64) -> Self {
        for c in self.coeffs.iter_mut() {
            if c.norm() < thr {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        self
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!("{} vs {} dimensions", self.dims, other.dims)));
        }
        Ok(())
    }

    fn merged_cutoffs(&self, other: &Self) -> Vec<usize> {
        self.cutoffs.iter().zip(&other.cutoffs).map(|(a, b)| *a.max(b)).collect()
    }

    /// Coefficientwise sum; cutoffs merge to the elementwise maximum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let cut = self.merged_cutoffs(other);
        let mut out = self.with_cutoffs(&cut);
        let b = other.with_cutoffs(&cut);
        for (o, v) in out.coeffs.iter_mut().zip(&b.coeffs) {
            *o += v;
        }
        Ok(out)
    }

    /// Coefficientwise difference.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(-1.0))
    }

    /// Multiplication by a real scalar.
    pub fn scale(&self, a: f64) -> Self {
        let mut out = self.clone();
        for c in out.coeffs.iter_mut() {
            *c *= a;
        }
        out
    }

    /// Product of two tables: exact convolution on a grid large enough to
    /// hold the doubled cutoff, then truncation to the merged cutoffs.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let cut = self.merged_cutoffs(other);
        let grid: Vec<usize> = self
            .cutoffs
            .iter()
            .zip(&other.cutoffs)
            .map(|(a, b)| fft_size(2 * (a + b) + 2))
            .collect();
        let va = self.synthesize_complex(&grid);
        let vb = other.synthesize_complex(&grid);
        let prod: Vec<Complex64> = va.iter().zip(&vb).map(|(a, b)| a * b).collect();
        Ok(Self::analyze_complex(prod, &grid, &cut).prune())
    }

    /// `Σ_k |u_k| exp(|k|_1 σ)` treating every dimension as a rotator angle.
    pub fn weighted_norm(&self, p: &StripParams) -> f64 {
        self.weighted_norm_x(None, p)
    }

    /// Weighted ℓ¹ majorant for an x-representation table:
    /// `Σ_k |u_k| exp(|k_x| · width_x + |k_φ|_1 σ)`, where `width_x` is the
    /// strip half-width measured in the raw angle `x/2`.  With
    /// `width_x = None` dimension 0 is weighted like the others.
    pub fn weighted_norm_x(&self, width_x: Option<f64>, p: &StripParams) -> f64 {
        let mut s = 0.0;
        for (i, c) in self.coeffs.iter().enumerate() {
            if c.norm() == 0.0 {
                continue;
            }
            let k = self.multi_index(i);
            let expo: f64 = match width_x {
                Some(w) => {
                    (k[0].abs() as f64) * w
                        + k[1..].iter().map(|v| v.abs() as f64).sum::<f64>() * p.sigma
                }
                None => k.iter().map(|v| v.abs() as f64).sum::<f64>() * p.sigma,
            };
            s += c.norm() * expo.exp();
        }
        s
    }

    /// Zero-mode value.
    pub fn average(&self) -> f64 {
        self.get(&vec![0; self.dims]).re
    }

    /// Spectral derivative with respect to the raw angle of dimension `dim`.
    pub fn differentiate(&self, dim: usize) -> Self {
        let mut out = self.clone();
        for (i, c) in out.coeffs.iter_mut().enumerate() {
            let k = self.multi_index(i);
            *c *= Complex64::new(0.0, k[dim] as f64);
        }
        out
    }

    /// Derivative with respect to the base angle `x` of an x-representation
    /// table.
    pub fn dx(&self) -> Self {
        self.differentiate(0).scale(0.5)
    }

    /// Multiplies every mode by `exp(i⟨k, c⟩)`, i.e. evaluates at `θ + c`.
    pub fn shift_angles(&self, c: &[f64]) -> Self {
        assert_eq!(c.len(), self.dims);
        let mut out = self.clone();
        for (i, v) in out.coeffs.iter_mut().enumerate() {
            let k = self.multi_index(i);
            let ph: f64 = k.iter().zip(c).map(|(a, b)| *a as f64 * b).sum();
            *v *= Complex64::from_polar(1.0, ph);
        }
        out
    }

    /// Shift in the x-representation: `u(x + dx, φ + dphi)`.
    pub fn shift_x(&self, dx: f64, dphi: &[f64]) -> Self {
        let mut c = vec![dx / 2.0];
        c.extend_from_slice(dphi);
        self.shift_angles(&c)
    }

    /// Value at real raw angles.
    pub fn eval(&self, angles: &[f64]) -> f64 {
        let a: Vec<Complex64> = angles.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        self.eval_c(&a).re
    }

    /// Value at complex raw angles (analytic continuation of the polynomial).
    pub fn eval_c(&self, angles: &[Complex64]) -> Complex64 {
        assert_eq!(angles.len(), self.dims);
        let i = Complex64::new(0.0, 1.0);
        let pw: Vec<Vec<Complex64>> = angles
            .iter()
            .zip(&self.cutoffs)
            .map(|(a, &kc)| (-(kc as i64)..=(kc as i64)).map(|k| (i * a * k as f64).exp()).collect())
            .collect();
        let mut s = Complex64::new(0.0, 0.0);
        for (idx, c) in self.coeffs.iter().enumerate() {
            if *c == Complex64::new(0.0, 0.0) {
                continue;
            }
            let mut term = *c;
            let mut r = idx;
            for j in (0..self.dims).rev() {
                let w = 2 * self.cutoffs[j] + 1;
                term *= pw[j][r % w];
                r /= w;
            }
            s += term;
        }
        s
    }

    /// Value of an x-representation table at `(x, φ)`.
    pub fn eval_x(&self, x: f64, phi: &[f64]) -> f64 {
        let mut a = vec![x / 2.0];
        a.extend_from_slice(phi);
        self.eval(&a)
    }

    /// Complex value of an x-representation table at `(x, φ)`.
    pub fn eval_xc(&self, x: Complex64, phi: &[Complex64]) -> Complex64 {
        let mut a = vec![x / 2.0];
        a.extend_from_slice(phi);
        self.eval_c(&a)
    }

    fn synthesize_complex(&self, grid: &[usize]) -> Vec<Complex64> {
        assert_eq!(grid.len(), self.dims);
        for (g, k) in grid.iter().zip(&self.cutoffs) {
            assert!(*g > 2 * k, "grid too coarse for cutoff");
        }
        let total: usize = grid.iter().product();
        let mut data = vec![Complex64::new(0.0, 0.0); total];
        for (idx, c) in self.coeffs.iter().enumerate() {
            if *c == Complex64::new(0.0, 0.0) {
                continue;
            }
            let k = self.multi_index(idx);
            let mut g = 0usize;
            for (j, &kj) in k.iter().enumerate() {
                g = g * grid[j] + kj.rem_euclid(grid[j] as i64) as usize;
            }
            data[g] += *c;
        }
        fft_nd(&mut data, grid, true);
        data
    }

    /// Values on the uniform grid `θ_j = 2π m_j / grid_j` (row-major).
    pub fn synthesize(&self, grid: &[usize]) -> Vec<f64> {
        self.synthesize_complex(grid).into_iter().map(|c| c.re).collect()
    }

    fn analyze_complex(mut data: Vec<Complex64>, grid: &[usize], cutoffs: &[usize]) -> Self {
        let total: usize = grid.iter().product();
        fft_nd(&mut data, grid, false);
        let dims = grid.len();
        let mut out = Self::zeros(dims, cutoffs);
        let norm = 1.0 / total as f64;
        for idx in 0..out.coeffs.len() {
            let k = out.multi_index(idx);
            let mut g = 0usize;
            for (j, &kj) in k.iter().enumerate() {
                g = g * grid[j] + kj.rem_euclid(grid[j] as i64) as usize;
            }
            out.coeffs[idx] = data[g] * norm;
        }
        out.symmetrize()
    }

    /// Projects onto the reality-constrained subspace.
    pub fn symmetrize(mut self) -> Self {
        // Every cutoff box is symmetric, so `−k` sits at the mirrored index.
        let snapshot = self.coeffs.clone();
        let last = snapshot.len() - 1;
        for (idx, c) in self.coeffs.iter_mut().enumerate() {
            *c = (snapshot[idx] + snapshot[last - idx].conj()) * 0.5;
        }
        self
    }

    /// Coefficients from samples on the uniform grid (inverse of
    /// [`FourierTable::synthesize`]).
    pub fn analyze(values: &[f64], grid: &[usize], cutoffs: &[usize]) -> Self {
        let data: Vec<Complex64> = values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        Self::analyze_complex(data, grid, cutoffs)
    }

    /// Samples `f` on a grid of `grid` points per dimension and analyzes.
    pub fn from_fn(cutoffs: &[usize], grid: &[usize], f: impl Fn(&[f64]) -> f64) -> Self {
        let dims = cutoffs.len();
        let total: usize = grid.iter().product();
        let mut vals = Vec::with_capacity(total);
        let mut th = vec![0.0; dims];
        for g in 0..total {
            let mut r = g;
            for j in (0..dims).rev() {
                th[j] = 2.0 * PI * (r % grid[j]) as f64 / grid[j] as f64;
                r /= grid[j];
            }
            vals.push(f(&th));
        }
        Self::analyze(&vals, grid, cutoffs)
    }

    /// `u0(φ) = u(0, φ)` and `u1 = u - u0` for an x-representation table.
    pub fn split_at_infinity(&self) -> (FourierTable, FourierTable) {
        let n = self.dims - 1;
        let cut_phi = self.cutoffs[1..].to_vec();
        let mut u0 = FourierTable::zeros(n, &cut_phi);
        for (idx, c) in self.coeffs.iter().enumerate() {
            let k = self.multi_index(idx);
            if let Some(j) = u0.index(&k[1..]) {
                u0.coeffs[j] += *c;
            }
        }
        let positions: Vec<usize> = (1..=n).collect();
        let lifted = u0.embed(self.dims, &self.cutoffs, &positions);
        let u1 = self.sub(&lifted).expect("same dims");
        (u0, u1)
    }

    /// Average at infinity: the zero mode of `u(0, ·)`.
    pub fn average_at_infinity(&self) -> f64 {
        self.split_at_infinity().0.average()
    }

    /// Restriction of an x-representation table to a fixed base angle `x`.
    pub fn restrict_x(&self, x: f64) -> FourierTable {
        let n = self.dims - 1;
        let mut out = FourierTable::zeros(n, &self.cutoffs[1..]);
        // Row-major storage: each x-mode owns one contiguous block.
        let block = out.coeffs.len();
        let kc = self.cutoffs[0] as i64;
        for (i0, chunk) in self.coeffs.chunks_exact(block).enumerate() {
            let ph = Complex64::from_polar(1.0, (i0 as i64 - kc) as f64 * x / 2.0);
            for (o, c) in out.coeffs.iter_mut().zip(chunk) {
                *o += *c * ph;
            }
        }
        out.symmetrize()
    }

    /// Factors `u = ψ^j v` in the x-representation.
    ///
    /// `u` must vanish to order `j` on the zero set of `ψ`, which for a
    /// separatrix function is `{0, 2π}` modulo 4π.
    pub fn factor_chi(&self, psi: &FourierTable, j: u32) -> Result<FourierTable> {
        self.check_dims(&psi.embed(self.dims, &self.full_cut(psi), &[0]))?;
        let scale = self.max_abs().max(1e-300);
        let mut d = self.clone();
        for m in 0..j {
            for x0 in [0.0, 2.0 * PI] {
                let r = d.restrict_x(x0).max_abs();
                if r > 1e-10 * scale {
                    return Err(Error::OrderDeficit(format!(
                        "derivative of order {m} at x = {x0:.6} is {r:.3e}, need vanishing to order {j}"
                    )));
                }
            }
            d = d.dx();
        }
        if j == 0 {
            return Ok(self.clone());
        }
        let cut = self.cutoffs.clone();
        let grid: Vec<usize> = cut.iter().map(|k| fft_size(4 * k + 8)).collect();
        let cut_psi = self.full_cut(psi);
        let psi_full = psi.embed(self.dims, &cut_psi, &[0]);
        // Samples on a staggered grid avoid the zeros of ψ.
        let total: usize = grid.iter().product();
        let mut vals = Vec::with_capacity(total);
        let mut th = vec![0.0; self.dims];
        for g in 0..total {
            let mut r = g;
            for k in (0..self.dims).rev() {
                let off = if k == 0 { 0.5 } else { 0.0 };
                th[k] = 2.0 * PI * ((r % grid[k]) as f64 + off) / grid[k] as f64;
                r /= grid[k];
            }
            let p = psi_full.eval(&th);
            vals.push(self.eval(&th) / p.powi(j as i32));
        }
        // Undo the half-cell stagger in dimension 0.
        let v = Self::analyze(&vals, &grid, &cut);
        let mut shift = vec![0.0; self.dims];
        shift[0] = -PI / grid[0] as f64;
        let v = v.shift_angles(&shift).prune();
        let mut back = v.clone();
        for _ in 0..j {
            back = back.mul(&psi_full)?;
        }
        let err = back.sub(self)?.with_cutoffs(&cut).max_abs();
        if err > 1e-10 * scale.max(1.0) {
            return Err(Error::OrderDeficit(format!("quotient does not reproduce u (defect {err:.3e})")));
        }
        Ok(v)
    }

    fn full_cut(&self, psi: &FourierTable) -> Vec<usize> {
        let mut c = self.cutoffs.clone();
        c[0] = c[0].max(psi.cutoffs[0]);
        c
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableJson {
    dims: usize,
    cutoffs: Vec<usize>,
    entries: Vec<Vec<f64>>,
}

fn is_positive_half(k: &[i64]) -> bool {
    for &v in k {
        if v != 0 {
            return v > 0;
        }
    }
    true
}

impl Serialize for FourierTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut entries = Vec::new();
        for (k, c) in self.modes() {
            if c.norm() == 0.0 || !is_positive_half(&k) {
                continue;
            }
            let mut e: Vec<f64> = k.iter().map(|v| *v as f64).collect();
            e.push(c.re);
            e.push(c.im);
            entries.push(e);
        }
        TableJson { dims: self.dims, cutoffs: self.cutoffs.clone(), entries }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FourierTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let j = TableJson::deserialize(d)?;
        if j.cutoffs.len() != j.dims {
            return Err(D::Error::custom("cutoffs must have one entry per dimension"));
        }
        let mut t = FourierTable::zeros(j.dims, &j.cutoffs);
        for e in &j.entries {
            if e.len() != j.dims + 2 {
                return Err(D::Error::custom(format!("entry {e:?} must hold dims+2 numbers")));
            }
            let k: Vec<i64> = e[..j.dims].iter().map(|v| v.round() as i64).collect();
            if t.index(&k).is_none() {
                return Err(D::Error::custom(format!("mode {k:?} outside the cutoff box")));
            }
            let c = Complex64::new(e[j.dims], e[j.dims + 1]);
            if k.iter().all(|v| *v == 0) {
                t.set(&k, c);
            } else {
                let kp = if is_positive_half(&k) { k.clone() } else { k.iter().map(|v| -v).collect() };
                let cp = if is_positive_half(&k) { c } else { c.conj() };
                t.set(&kp, cp);
            }
        }
        Ok(t)
    }
}

/// JSON form of the jet terms: a list of `{exponents, table}` records,
/// since JSON object keys must be strings.
mod jet_terms {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::FourierTable;

    #[derive(Serialize)]
    struct TermRef<'a> {
        exponents: &'a [u32],
        table: &'a FourierTable,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Term {
        exponents: Vec<u32>,
        table: FourierTable,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<Vec<u32>, FourierTable>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter().map(|(k, v)| TermRef { exponents: k, table: v }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Vec<u32>, FourierTable>, D::Error> {
        let terms = Vec::<Term>::deserialize(d)?;
        let mut m = BTreeMap::new();
        for t in terms {
            if m.insert(t.exponents.clone(), t.table).is_some() {
                return Err(serde::de::Error::custom(format!("duplicate exponents {:?}", t.exponents)));
            }
        }
        Ok(m)
    }
}

/// Polynomial of degree at most two in the momenta `p = (y or h/χ, I_1..I_n)`
/// with Fourier coefficients over `(x, φ)`, plus a bound for the discarded
/// super-quadratic part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumJet {
    /// Number of momenta (`n + 1`).
    pub momenta: usize,
    /// Monomial exponents → coefficient table; absent keys are zero.
    #[serde(with = "jet_terms")]
    pub terms: BTreeMap<Vec<u32>, FourierTable>,
    pub remainder_bound: f64,
    /// Angle shear `θ`: coefficients are evaluated at `(x, φ + θ x)`.
    #[serde(default)]
    pub shear: Vec<f64>,
    /// Set once the first momentum stands for `h/χ(s)`.
    #[serde(default)]
    pub energy_time: bool,
}

impl MomentumJet {
    /// The zero jet with `momenta` momenta.
    pub fn zero(momenta: usize) -> Self {
        Self { momenta, terms: BTreeMap::new(), remainder_bound: 0.0, shear: vec![0.0; momenta - 1], energy_time: false }
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum::<u32>()).max().unwrap_or(0)
    }

    fn unit(&self, i: usize) -> Vec<u32> {
        let mut e = vec![0; self.momenta];
        e[i] += 1;
        e
    }

    fn pair(&self, i: usize, j: usize) -> Vec<u32> {
        let mut e = vec![0; self.momenta];
        e[i] += 1;
        e[j] += 1;
        e
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.remainder_bound >= 0.0 && self.remainder_bound.is_finite()) {
            return Err(Error::Domain("remainder bound must be finite and non-negative".into()));
        }
        if self.shear.len() + 1 != self.momenta {
            return Err(Error::DimensionMismatch("shear must have n entries".into()));
        }
        for (e, t) in &self.terms {
            if e.len() != self.momenta || e.iter().sum::<u32>() > 2 {
                return Err(Error::Domain(format!("invalid exponent {e:?}")));
            }
            if t.dims() != self.momenta {
                return Err(Error::DimensionMismatch(format!("table for {e:?} has {} dims", t.dims())));
            }
            if t.reality_defect() > 1e-12 * t.max_abs().max(1.0) {
                return Err(Error::Domain(format!("table for {e:?} violates reality")));
            }
        }
        Ok(())
    }

    fn term(&self, e: &[u32]) -> Option<&FourierTable> {
        self.terms.get(e)
    }

    /// Adds `t` to the coefficient of monomial `e`.
    pub fn add_term(&mut self, e: Vec<u32>, t: &FourierTable) -> Result<()> {
        let new = match self.terms.get(&e) {
            Some(old) => old.add(t)?,
            None => t.clone(),
        };
        self.terms.insert(e, new);
        Ok(())
    }

    /// Momentum-independent part `f`.
    pub fn f(&self) -> Option<&FourierTable> {
        self.term(&vec![0; self.momenta])
    }

    /// Coefficient of `p_i`.
    pub fn linear(&self, i: usize) -> Option<&FourierTable> {
        self.term(&self.unit(i))
    }

    /// `∂²H/∂p_i∂p_j` as a table.
    pub fn hessian(&self, i: usize, j: usize) -> Option<FourierTable> {
        let t = self.term(&self.pair(i, j))?;
        Some(if i == j { t.scale(2.0) } else { t.clone() })
    }

    /// Evaluates the jet at real `(p, x, φ)` (x-representation, shear applied).
    pub fn eval(&self, p: &[f64], x: f64, phi: &[f64]) -> f64 {
        let phis: Vec<f64> = phi.iter().zip(&self.shear).map(|(a, t)| a + t * x).collect();
        let mut s = 0.0;
        for (e, t) in &self.terms {
            let mono: f64 = e.iter().zip(p).map(|(k, v)| v.powi(*k as i32)).product();
            if mono != 0.0 {
                s += mono * t.eval_x(x, &phis);
            }
        }
        s
    }

    /// Substitutes `p → p + ζ(q)` with `ζ` a vector of x-representation
    /// tables.  Exact for degree ≤ 2.
    pub fn shift_momentum(&self, zeta: &[Option<FourierTable>]) -> Result<Self> {
        assert_eq!(zeta.len(), self.momenta);
        let m = self.momenta;
        let mut out = MomentumJet { terms: BTreeMap::new(), ..self.clone() };
        for (e, t) in &self.terms {
            out.add_term(e.clone(), t)?;
            let deg: u32 = e.iter().sum();
            if deg == 0 {
                continue;
            }
            // Linear monomial p_i → contributes ζ_i · t to the constant.
            let idx: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, e[i] as usize)).collect();
            if deg == 1 {
                if let Some(z) = &zeta[idx[0]] {
                    out.add_term(vec![0; m], &t.mul(z)?)?;
                }
            } else {
                let (i, j) = (idx[0], idx[1]);
                // (p_i + ζ_i)(p_j + ζ_j) = p_i p_j + ζ_j p_i + ζ_i p_j + ζ_i ζ_j
                if let Some(zj) = &zeta[j] {
                    out.add_term(self.unit(i), &t.mul(zj)?)?;
                }
                if let Some(zi) = &zeta[i] {
                    out.add_term(self.unit(j), &t.mul(zi)?)?;
                    if let Some(zj) = &zeta[j] {
                        out.add_term(vec![0; m], &t.mul(&zi.mul(zj)?)?)?;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Maximum reality defect over all stored tables.
    pub fn reality_defect(&self) -> f64 {
        self.terms.values().map(|t| t.reality_defect()).fold(0.0, f64::max)
    }
}
