//! Chebyshev × Fourier fields on a bounded chart of the bi-cylinder.
//!
//! Solutions of the transport equations are analytic in the base angle `x`
//! near the torus `x = 0` but are not 4π-periodic, so the iteration works
//! on a chart `[x_lo, x_hi] × 𝕋ⁿ` containing `x = 0` in its interior: values
//! are stored at Chebyshev–Lobatto nodes in `x` and on a uniform grid in
//! each rotator angle.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::series::{fft_nd, FourierTable};

/// Chebyshev–Lobatto grid on `[lo, hi]` with `n + 1` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Cheb {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub nodes: Vec<f64>,
    /// Differentiation matrix, row-major `(n+1)²`.
    pub dmat: Vec<f64>,
    weights: Vec<f64>,
}

impl Cheb {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        assert!(hi > lo && n >= 2);
        let c = 0.5 * (hi + lo);
        let h = 0.5 * (hi - lo);
        // Nodes in increasing order.
        let t: Vec<f64> = (0..=n).map(|j| -(PI * j as f64 / n as f64).cos()).collect();
        let nodes: Vec<f64> = t.iter().map(|v| c + h * v).collect();
        let weights: Vec<f64> = (0..=n)
            .map(|j| {
                let s = if j % 2 == 0 { 1.0 } else { -1.0 };
                if j == 0 || j == n {
                    0.5 * s
                } else {
                    s
                }
            })
            .collect();
        let m = n + 1;
        let mut dmat = vec![0.0; m * m];
        for i in 0..m {
            let mut diag = 0.0;
            for j in 0..m {
                if i != j {
                    let v = weights[j] / weights[i] / (nodes[i] - nodes[j]);
                    dmat[i * m + j] = v;
                    diag -= v;
                }
            }
            dmat[i * m + i] = diag;
        }
        Self { lo, hi, n, nodes, dmat, weights }
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Barycentric interpolation weights for evaluating at `x` (may be
    /// complex and outside the interval, where it continues the polynomial).
    pub fn interp_row(&self, x: Complex64) -> Vec<Complex64> {
        let m = self.len();
        for (j, &xj) in self.nodes.iter().enumerate() {
            if (x - xj).norm() == 0.0 {
                let mut r = vec![Complex64::new(0.0, 0.0); m];
                r[j] = Complex64::new(1.0, 0.0);
                return r;
            }
        }
        let terms: Vec<Complex64> = (0..m).map(|j| self.weights[j] / (x - self.nodes[j])).collect();
        let den: Complex64 = terms.iter().sum();
        terms.into_iter().map(|t| t / den).collect()
    }

    /// Real interpolation row.
    pub fn interp_row_re(&self, x: f64) -> Vec<f64> {
        self.interp_row(Complex64::new(x, 0.0)).into_iter().map(|c| c.re).collect()
    }

    /// Applies the differentiation matrix to a vector of nodal values.
    pub fn diff<T>(&self, v: &[T]) -> Vec<T>
    where
        T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + Default,
    {
        let m = self.len();
        (0..m)
            .map(|i| {
                let mut s = T::default();
                for j in 0..m {
                    s = s + v[j] * self.dmat[i * m + j];
                }
                s
            })
            .collect()
    }

    /// Clenshaw–Curtis-free spectral antiderivative vanishing at `x0`:
    /// solves `D u = v` in the least-squares-exact sense by replacing one
    /// collocation row with the anchor condition.
    pub fn integrate_from(&self, v: &[f64], x0: f64) -> Vec<f64> {
        let m = self.len();
        let mut a = nalgebra::DMatrix::<f64>::zeros(m, m);
        let mut b = nalgebra::DVector::<f64>::zeros(m);
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = self.dmat[i * m + j];
            }
            b[i] = v[i];
        }
        // Replace the row of the node closest to x0 with u(x0) = 0.
        let row = self.interp_row_re(x0);
        let k = (0..m)
            .min_by(|&i, &j| (self.nodes[i] - x0).abs().partial_cmp(&(self.nodes[j] - x0).abs()).unwrap())
            .unwrap();
        for j in 0..m {
            a[(k, j)] = row[j];
        }
        b[k] = 0.0;
        let sol = a.lu().solve(&b).expect("integration system is nonsingular");
        sol.iter().copied().collect()
    }

    /// Maximal spacing-independent error bound helper: last Chebyshev
    /// coefficients' magnitude relative to the first (resolution check).
    pub fn tail_ratio(&self, v: &[f64]) -> f64 {
        let c = self.coefficients(v);
        let head = c.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
        let tail = c[c.len().saturating_sub(4)..].iter().fold(0.0f64, |a, b| a.max(b.abs()));
        tail / head
    }

    /// Chebyshev coefficients of nodal values (direct O(n²) transform).
    pub fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..=n)
            .map(|k| {
                let mut s = 0.0;
                for j in 0..=n {
                    // node j corresponds to angle π(n-j)/n in the standard ordering
                    let th = PI * (n - j) as f64 / n as f64;
                    let w = if j == 0 || j == n { 0.5 } else { 1.0 };
                    s += w * v[j] * (k as f64 * th).cos();
                }
                let f = if k == 0 || k == n { 1.0 } else { 2.0 };
                f * s / n as f64
            })
            .collect()
    }
}

/// Geometry of a chart: Chebyshev in `x`, uniform in `n` rotator angles.
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub cheb: Cheb,
    /// Rotator grid size per angle (uniform in each).
    pub m: usize,
    pub n: usize,
    /// Fourier cutoff kept after products.
    pub kcut: usize,
}

impl Chart {
    pub fn new(lo: f64, hi: f64, nx: usize, n: usize, kcut: usize) -> Self {
        let m = crate::series::fft_size(2 * kcut + 2);
        Self { cheb: Cheb::new(lo, hi, nx), m, n, kcut }
    }

    /// Number of rotator grid points.
    pub fn nphi(&self) -> usize {
        self.m.pow(self.n as u32)
    }

    pub fn npts(&self) -> usize {
        self.cheb.len() * self.nphi()
    }

    /// Rotator angles of flat φ-index `j`.
    pub fn phi(&self, mut j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for a in (0..self.n).rev() {
            out[a] = 2.0 * PI * (j % self.m) as f64 / self.m as f64;
            j /= self.m;
        }
        out
    }

    /// Integer mode vector of flat FFT index `j` (signed, aliased to
    /// `[-m/2, m/2)`).
    pub fn mode(&self, mut j: usize) -> Vec<i64> {
        let mut out = vec![0i64; self.n];
        for a in (0..self.n).rev() {
            let r = (j % self.m) as i64;
            out[a] = if r >= (self.m as i64 + 1) / 2 { r - self.m as i64 } else { r };
            j /= self.m;
        }
        out
    }

    /// Whether flat FFT index `j` is inside the kept cutoff box.
    pub fn kept(&self, j: usize) -> bool {
        self.mode(j).iter().all(|k| k.unsigned_abs() as usize <= self.kcut)
    }

    fn phi_shape(&self) -> Vec<usize> {
        vec![self.m; self.n]
    }

    /// Samples a function of `(x, φ)` at the nodes.
    pub fn sample(&self, f: impl Fn(f64, &[f64]) -> f64 + Sync) -> Field {
        let np = self.nphi();
        let vals: Vec<f64> = (0..self.npts())
            .into_par_iter()
            .map(|g| {
                let (i, j) = (g / np, g % np);
                f(self.cheb.nodes[i], &self.phi(j))
            })
            .collect();
        Field { vals }
    }

    /// Samples an x-representation Fourier table at the nodes, evaluating it
    /// at `(x + x_shift, φ + phi_shift + shear·(x + x_shift))`.
    pub fn sample_table(&self, t: &FourierTable, x_shift: f64, phi_shift: &[f64], shear: &[f64]) -> Field {
        // Evaluate per x node via restriction then φ-synthesis (fast).
        let np = self.nphi();
        let mut vals = vec![0.0; self.npts()];
        let n = self.n;
        let rows: Vec<Vec<f64>> = self
            .cheb
            .nodes
            .par_iter()
            .map(|&x| {
                let xx = x + x_shift;
                let mut r = t.restrict_x(xx);
                let sh: Vec<f64> = (0..n).map(|a| phi_shift.get(a).copied().unwrap_or(0.0) + shear.get(a).copied().unwrap_or(0.0) * xx).collect();
                if n > 0 {
                    r = r.shift_angles(&sh);
                    let cut: Vec<usize> = r.cutoffs().to_vec();
                    let big = cut.iter().any(|k| 2 * k + 1 > self.m);
                    if big {
                        // Cutoff exceeds grid: evaluate directly.
                        (0..np).map(|j| r.eval(&self.phi(j))).collect()
                    } else {
                        r.synthesize(&self.phi_shape())
                    }
                } else {
                    vec![r.average()]
                }
            })
            .collect();
        for (i, row) in rows.into_iter().enumerate() {
            vals[i * np..(i + 1) * np].copy_from_slice(&row);
        }
        Field { vals }
    }

    /// Constant field.
    pub fn constant(&self, c: f64) -> Field {
        Field { vals: vec![c; self.npts()] }
    }

    /// φ-modes at each x node: `out[i][j]` with `j` a flat FFT index,
    /// normalized so that `u(x_i, φ) = Σ_j out[i][j] e^{i⟨k_j, φ⟩}`.
    pub fn modes(&self, u: &Field) -> Vec<Vec<Complex64>> {
        let np = self.nphi();
        let shape = self.phi_shape();
        (0..self.cheb.len())
            .into_par_iter()
            .map(|i| {
                let mut row: Vec<Complex64> = u.vals[i * np..(i + 1) * np].iter().map(|v| Complex64::new(*v, 0.0)).collect();
                if self.n > 0 {
                    fft_nd(&mut row, &shape, false);
                }
                let s = 1.0 / np as f64;
                row.iter_mut().for_each(|c| *c *= s);
                row
            })
            .collect()
    }

    /// Inverse of [`Chart::modes`]; modes outside the cutoff are dropped.
    pub fn from_modes(&self, modes: &[Vec<Complex64>]) -> Field {
        let np = self.nphi();
        let shape = self.phi_shape();
        let rows: Vec<Vec<f64>> = modes
            .par_iter()
            .map(|row| {
                let mut r: Vec<Complex64> =
                    row.iter().enumerate().map(|(j, c)| if self.kept(j) { *c } else { Complex64::new(0.0, 0.0) }).collect();
                if self.n > 0 {
                    fft_nd(&mut r, &shape, true);
                }
                r.into_iter().map(|c| c.re).collect()
            })
            .collect();
        let mut vals = vec![0.0; self.npts()];
        for (i, row) in rows.into_iter().enumerate() {
            vals[i * np..(i + 1) * np].copy_from_slice(&row);
        }
        Field { vals }
    }

    /// Removes modes above the cutoff (anti-aliasing after products).
    pub fn filter(&self, u: &Field) -> Field {
        self.from_modes(&self.modes(u))
    }

    /// `∂u/∂x` by Chebyshev differentiation.
    pub fn dx(&self, u: &Field) -> Field {
        let np = self.nphi();
        let nx = self.cheb.len();
        let mut out = vec![0.0; self.npts()];
        let d = &self.cheb.dmat;
        out.par_chunks_mut(np).enumerate().for_each(|(i, row)| {
            for k in 0..nx {
                let w = d[i * nx + k];
                if w == 0.0 {
                    continue;
                }
                let src = &u.vals[k * np..(k + 1) * np];
                for j in 0..np {
                    row[j] += w * src[j];
                }
            }
        });
        Field { vals: out }
    }

    /// `∂u/∂φ_a` spectrally.
    pub fn dphi(&self, u: &Field, a: usize) -> Field {
        let mut md = self.modes(u);
        for row in md.iter_mut() {
            for (j, c) in row.iter_mut().enumerate() {
                let k = self.mode(j)[a] as f64;
                // The Nyquist mode has no consistent real derivative.
                let k = if self.m.is_multiple_of(2) && (self.mode(j)[a].unsigned_abs() as usize) == self.m / 2 { 0.0 } else { k };
                *c *= Complex64::new(0.0, k);
            }
        }
        self.from_modes(&md)
    }

    /// Gradient `(∂_x u, ∂_φ u)`.
    pub fn grad(&self, u: &Field) -> Vec<Field> {
        let mut g = vec![self.dx(u)];
        for a in 0..self.n {
            g.push(self.dphi(u, a));
        }
        g
    }

    /// Spectral coefficients `c[ix_cheb][j_phi]` for fast point evaluation.
    pub fn coeffs(&self, u: &Field) -> Coeffs {
        let md = self.modes(u);
        let np = self.nphi();
        let nx = self.cheb.len();
        // Chebyshev transform per φ-mode.
        let mut c = vec![Complex64::new(0.0, 0.0); nx * np];
        for j in 0..np {
            if !self.kept(j) {
                continue;
            }
            let re: Vec<f64> = md.iter().map(|r| r[j].re).collect();
            let im: Vec<f64> = md.iter().map(|r| r[j].im).collect();
            let cr = self.cheb.coefficients(&re);
            let ci = self.cheb.coefficients(&im);
            for k in 0..nx {
                c[k * np + j] = Complex64::new(cr[k], ci[k]);
            }
        }
        let active: Vec<usize> = (0..np).filter(|&j| self.kept(j) && (0..nx).any(|k| c[k * np + j].norm() > 0.0)).collect();
        Coeffs { c, nx, np, active, modes: (0..np).map(|j| self.mode(j)).collect(), lo: self.cheb.lo, hi: self.cheb.hi }
    }

    /// Value at `x = x0` for every φ node (interpolation in x).
    pub fn restrict(&self, u: &Field, x0: f64) -> Vec<f64> {
        let row = self.cheb.interp_row_re(x0);
        let np = self.nphi();
        let mut out = vec![0.0; np];
        for (i, w) in row.iter().enumerate() {
            for j in 0..np {
                out[j] += w * u.vals[i * np + j];
            }
        }
        out
    }

    /// Average at infinity: mean over φ of `u(0, φ)`.
    pub fn average_at_infinity(&self, u: &Field) -> f64 {
        let r = self.restrict(u, 0.0);
        r.iter().sum::<f64>() / r.len() as f64
    }

    /// Weighted norm `Σ_k e^{|k|σ} max_x |u_k(x)|`.
    pub fn norm(&self, u: &Field, sigma: f64) -> f64 {
        let md = self.modes(u);
        let np = self.nphi();
        let mut s = 0.0;
        for j in 0..np {
            if !self.kept(j) {
                continue;
            }
            let k1: f64 = self.mode(j).iter().map(|v| v.abs() as f64).sum();
            let mx = md.iter().fold(0.0f64, |a, r| a.max(r[j].norm()));
            s += mx * (k1 * sigma).exp();
        }
        s
    }

    /// Supremum over the grid.
    pub fn sup(&self, u: &Field) -> f64 {
        u.vals.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Values of several fields at one real point, sharing the basis
    /// evaluation.  All coefficient sets must come from this chart.
    pub fn eval_many(&self, cs: &[&Coeffs], x: f64, phi: &[f64]) -> Vec<f64> {
        let Some(first) = cs.first() else { return vec![] };
        let tv = first.cheb_values(Complex64::new(x, 0.0));
        let np = first.np;
        let nx = first.nx;
        let mut e = vec![Complex64::new(0.0, 0.0); np];
        for j in 0..np {
            if self.kept(j) {
                let ph: f64 = first.modes[j].iter().zip(phi).map(|(a, b)| *a as f64 * b).sum();
                e[j] = Complex64::from_polar(1.0, ph);
            }
        }
        cs.iter()
            .map(|c| {
                let mut s = 0.0;
                for &j in &c.active {
                    let mut cx = Complex64::new(0.0, 0.0);
                    for m in 0..nx {
                        cx += c.c[m * np + j] * tv[m];
                    }
                    s += (cx * e[j]).re;
                }
                s
            })
            .collect()
    }

    /// Evaluates a batch of fields at points `(x, φ)`.
    pub fn eval_points(&self, cs: &[&Coeffs], pts: &[(f64, Vec<f64>)]) -> Vec<Vec<f64>> {
        pts.par_iter().map(|(x, phi)| cs.iter().map(|c| c.eval(*x, phi)).collect()).collect()
    }
}

/// Nodal values, row-major `[x node][φ flat index]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Field {
    pub vals: Vec<f64>,
}

impl Field {
    pub fn zeros(len: usize) -> Self {
        Self { vals: vec![0.0; len] }
    }

    pub fn add(&self, o: &Field) -> Field {
        Field { vals: self.vals.iter().zip(&o.vals).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, o: &Field) -> Field {
        Field { vals: self.vals.iter().zip(&o.vals).map(|(a, b)| a - b).collect() }
    }

    pub fn mul(&self, o: &Field) -> Field {
        Field { vals: self.vals.iter().zip(&o.vals).map(|(a, b)| a * b).collect() }
    }

    pub fn scale(&self, s: f64) -> Field {
        Field { vals: self.vals.iter().map(|a| a * s).collect() }
    }

    pub fn add_const(&self, c: f64) -> Field {
        Field { vals: self.vals.iter().map(|a| a + c).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

/// Chebyshev × Fourier coefficients for evaluation off the grid.
#[derive(Debug, Clone)]
pub struct Coeffs {
    c: Vec<Complex64>,
    nx: usize,
    np: usize,
    active: Vec<usize>,
    modes: Vec<Vec<i64>>,
    lo: f64,
    hi: f64,
}

impl Coeffs {
    fn cheb_values(&self, x: Complex64) -> Vec<Complex64> {
        let t = (x * 2.0 - (self.hi + self.lo)) / (self.hi - self.lo);
        let mut tv = vec![Complex64::new(0.0, 0.0); self.nx];
        tv[0] = Complex64::new(1.0, 0.0);
        if self.nx > 1 {
            tv[1] = t;
        }
        for k in 2..self.nx {
            tv[k] = t * tv[k - 1] * 2.0 - tv[k - 2];
        }
        tv
    }

    /// Value at a real point (real part of the synthesized sum).
    pub fn eval(&self, x: f64, phi: &[f64]) -> f64 {
        let pc: Vec<Complex64> = phi.iter().map(|p| Complex64::new(*p, 0.0)).collect();
        self.eval_c(Complex64::new(x, 0.0), &pc).re
    }

    /// Analytic continuation to complex `(x, φ)`.
    pub fn eval_c(&self, x: Complex64, phi: &[Complex64]) -> Complex64 {
        let tv = self.cheb_values(x);
        let i = Complex64::new(0.0, 1.0);
        let mut s = Complex64::new(0.0, 0.0);
        for &j in &self.active {
            let k = &self.modes[j];
            let ph: Complex64 = k.iter().zip(phi).map(|(a, b)| b * (*a as f64)).sum();
            let e = (i * ph).exp();
            let mut cx = Complex64::new(0.0, 0.0);
            for m in 0..self.nx {
                cx += self.c[m * self.np + j] * tv[m];
            }
            s += cx * e;
        }
        s
    }

    /// φ-mode coefficient function `u_k(x)` for the active mode with index
    /// vector `k` (zero if absent).
    pub fn mode_at(&self, k: &[i64], x: Complex64) -> Complex64 {
        let tv = self.cheb_values(x);
        for &j in &self.active {
            if self.modes[j] == k {
                let mut cx = Complex64::new(0.0, 0.0);
                for m in 0..self.nx {
                    cx += self.c[m * self.np + j] * tv[m];
                }
                return cx;
            }
        }
        Complex64::new(0.0, 0.0)
    }
}
