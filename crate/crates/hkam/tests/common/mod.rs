//! Model builders shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::f64::consts::PI;

use hkam::homological::{CylinderField, Frequency};
use hkam::kam::{ChartJet, ChartSpec};
use hkam::normalform::{localize_and_scale, reduce, ActionJet, Reduced, ResonanceFrame};
use hkam::series::{FourierTable, MomentumJet};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GOLDEN: f64 = 0.618_033_988_749_895;

/// Pendulum ⊗ one rotator after localization, scaling and reduction.
pub struct Model {
    pub red: Reduced,
    pub omega: Vec<f64>,
    pub freq: Frequency,
}

/// `½(y² + I²) + (cos x − 1)(1 + μ cos φ)` with the golden rotator
/// frequency, localized at scale `ε`.
pub fn arnold(eps: f64, mu: f64) -> Model {
    let frame = ResonanceFrame::new(&[1, 0], vec![0.0, 0.0], &[0.0, GOLDEN], 1.0, 10).unwrap();
    let h0 = ActionJet { hessian: vec![vec![1.0, 0.0], vec![0.0, 1.0]], cubic_bound: 0.0 };
    let cut = [2usize, 2];
    let f = FourierTable::cosine(2, &cut, &[1, 0], 1.0).add(&FourierTable::constant(2, &cut, -1.0)).unwrap();
    let f = f.add(&f.mul(&FourierTable::cosine(2, &cut, &[0, 1], mu)).unwrap()).unwrap();
    let mut h1 = MomentumJet::zero(2);
    h1.add_term(vec![0, 0], &f).unwrap();
    let sm = localize_and_scale(&h0, &h1, &frame, eps, 1.0).unwrap();
    let freq = Frequency::new(sm.omega1.clone(), 1.0, 8).unwrap();
    let red = reduce(&sm.jet).unwrap();
    Model { red, omega: sm.omega1, freq }
}

impl Model {
    pub fn spec(&self, nx: usize, kcut: usize) -> ChartSpec {
        ChartSpec::around(&self.red.sep, self.red.sep.t, nx, 1, kcut)
    }

    /// The unstable-side chart jet.
    pub fn chart_jet(&self, nx: usize, kcut: usize) -> ChartJet {
        ChartJet::from_jet(&self.red.h_theta, self.spec(nx, kcut), self.red.sep.lambda, &self.omega).unwrap()
    }

    /// Adds `t` (x-representation, two dimensions) to the momentum-free term.
    pub fn with_f(&self, t: &FourierTable) -> MomentumJet {
        let mut j = self.red.h_theta.clone();
        j.add_term(vec![0, 0], t).unwrap();
        j
    }
}

/// Random trigonometric polynomial with coefficients decaying like `e^{−0.4|k|₁}`.
pub fn random_table(rng: &mut ChaCha8Rng, cutoffs: &[usize]) -> FourierTable {
    let mut t = FourierTable::zeros(cutoffs.len(), cutoffs);
    let keys: Vec<Vec<i64>> = t.modes().map(|(k, _)| k).collect();
    for k in keys {
        let l1: i64 = k.iter().map(|v| v.abs()).sum();
        let amp = (-0.4 * l1 as f64).exp();
        t.add_to(&k, Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * amp);
    }
    t
}

/// Spectral derivative oracle: `Σ ω_a ∂_a u` by multiplication with `i⟨k,ω⟩`.
pub fn d_omega(u: &FourierTable, omega: &[f64]) -> FourierTable {
    let mut out = FourierTable::zeros(u.dims(), u.cutoffs());
    for (k, c) in u.modes() {
        let a: f64 = k.iter().zip(omega).map(|(x, y)| *x as f64 * y).sum();
        if k.iter().any(|v| *v != 0) || c.norm() > 0.0 {
            out.set(&k, c * Complex64::new(0.0, a));
        }
    }
    out
}

/// Random entire data on the cylinder `[−t, t] × 𝕋ⁿ` with `|k|∞ ≤ kc`.
pub fn cyl_random(rng: &mut ChaCha8Rng, t: f64, n: usize, kc: i64) -> CylinderField {
    let mut modes: Vec<Vec<i64>> = vec![vec![]];
    for _ in 0..n {
        modes = modes.iter().flat_map(|m| (-kc..=kc).map(move |k| [m.clone(), vec![k]].concat())).collect();
    }
    // v_k(s) = Σ_j a_j cos(b_j s + c_j), entire in s; v_{-k} = conj(v_k) on ℝ.
    let mut params = HashMap::new();
    for k in &modes {
        let neg: Vec<i64> = k.iter().map(|v| -v).collect();
        if params.contains_key(&neg) {
            continue;
        }
        let p: Vec<(Complex64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    rng.random_range(0.0..2.0),
                    rng.random_range(0.0..PI),
                )
            })
            .collect();
        params.insert(k.clone(), p);
    }
    let eval = |k: &Vec<i64>, s: f64| -> Complex64 {
        let neg: Vec<i64> = k.iter().map(|v| -v).collect();
        let (p, conj) = match params.get(k) {
            Some(p) => (p, false),
            None => (&params[&neg], true),
        };
        let v: Complex64 = p.iter().map(|(a, b, c)| a * (b * s + c).cos()).sum();
        let v = if k.iter().all(|x| *x == 0) { Complex64::new(v.re, 0.0) } else { v };
        if conj {
            v.conj()
        } else {
            v
        }
    };
    CylinderField::from_mode_fns(t, 40, &modes, |m, s| eval(&modes[m], s))
}
