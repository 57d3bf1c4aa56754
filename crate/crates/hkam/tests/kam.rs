mod common;

use std::f64::consts::PI;

use common::{arnold, GOLDEN};
use hkam::homological::Frequency;
use hkam::kam::*;
use hkam::normalform::lift_psi;
use hkam::series::{FourierTable, MomentumJet};
use proptest::prelude::*;

/// `λψ(x) y + ω I + ½(y² + I²)` with nothing else: the exact normal form.
fn unperturbed(lambda_sign: f64) -> (common::Model, ChartJet) {
    let m = arnold(1.0, 0.0);
    let sep = &m.red.sep;
    let mut j = MomentumJet::zero(2);
    j.add_term(vec![1, 0], &lift_psi(sep, 2).scale(lambda_sign * sep.lambda)).unwrap();
    j.add_term(vec![0, 1], &FourierTable::constant(2, &[0, 0], m.omega[0])).unwrap();
    j.add_term(vec![2, 0], &FourierTable::constant(2, &[0, 0], 0.5)).unwrap();
    j.add_term(vec![0, 2], &FourierTable::constant(2, &[0, 0], 0.5)).unwrap();
    let cj = ChartJet::from_jet(&j, m.spec(40, 6), lambda_sign * sep.lambda, &m.omega).unwrap();
    (m, cj)
}

#[test]
fn zero_perturbation_is_a_fixed_point() {
    let (m, h) = unperturbed(1.0);
    let (mu, nu) = h.perturbation(&m.red.sep);
    assert_eq!(mu, 0.0);
    assert!(nu < 1e-14, "ν = {nu}");
    let (step, next, d) = kam_step(&h, &m.red.sep, &m.freq).unwrap();
    assert_eq!(d.mu_next, 0.0);
    assert_eq!(step.s_hat.max_abs(), 0.0);
    assert!(step.displacement() < 1e-14);
    assert!(next.f.max_abs() == 0.0);
    let run = kam_iterate(&h, &m.red.sep, &m.freq, &KamOptions::default()).unwrap();
    assert!(run.diag.records.is_empty());
    assert_eq!(run.diag.stop, "unperturbed");
    assert_eq!(run.residual, 0.0);
    assert_eq!(run.total, AffineCanonical::identity(h.spec));
}

#[test]
fn degenerate_perturbation_keeps_the_torus() {
    // (cos x − 1) cos φ vanishes to second order at x = 0 and g = 0.
    let m = arnold(1e-3, 1e-6);
    let h = m.chart_jet(48, 8);
    let (step, _, d) = kam_step(&h, &m.red.sep, &m.freq).unwrap();
    assert!(d.xi[0].abs() < 1e-12, "ξ = {:?}", d.xi);
    assert!(d.c0.abs() < 1e-12, "c₀ = {}", d.c0);
    assert!(step.b0.max_abs() < 1e-12, "b₀ = {}", step.b0.max_abs());
    let run = kam_iterate(&h, &m.red.sep, &m.freq, &KamOptions::default()).unwrap();
    assert!(run.total.xi[0].abs() < 1e-12);
    assert!(run.total.c0.abs() < 1e-12);
}

#[test]
fn half_angle_perturbation_contracts_quadratically() {
    // f = 1e−6 (1 − cos(x/2)) cos φ in the x-representation.
    let m = arnold(1e-3, 0.0);
    let cut = [1usize, 1];
    let t = FourierTable::cosine(2, &cut, &[0, 1], 1e-6)
        .sub(&FourierTable::cosine(2, &cut, &[1, 1], 0.5e-6))
        .unwrap()
        .sub(&FourierTable::cosine(2, &cut, &[1, -1], 0.5e-6))
        .unwrap();
    let h = ChartJet::from_jet(&m.with_f(&t), m.spec(48, 8), m.red.sep.lambda, &m.omega).unwrap();
    let (_, _, d) = kam_step(&h, &m.red.sep, &m.freq).unwrap();
    let measured = d.mu_next / (d.mu * d.mu);
    assert!(d.mu > 5e-7);
    assert!(measured < 10.0 * d.c_eta && measured > 0.1 * d.c_eta, "μ'/μ² = {measured:e}, predicted {:e}", d.c_eta);
}

#[test]
fn iteration_solves_hamilton_jacobi() {
    let m = arnold(1e-3, 1e-5);
    let h = m.chart_jet(64, 8);
    let run = kam_iterate(&h, &m.red.sep, &m.freq, &KamOptions::default()).unwrap();
    assert!(run.residual < 1e-10, "residual {:e}", run.residual);
    assert_eq!(run.diag.stop, "tolerance");
    let mus = run.diag.mu_sequence();
    assert!(mus.windows(2).all(|w| w[1] < w[0]), "{mus:?}");
    // log μ_{j+1} ≈ 2 log μ_j + const on the first step.
    let r = &run.diag.records[0].step;
    assert!(r.mu_next < 10.0 * r.c_eta * r.mu * r.mu);
    assert!(invariance_defect(&h, &run.total) < 1e-8);
    assert!(symplectic_check(&run.total, 6, 3) < 1e-6);
    // Parameter drift is of the order of the perturbation.
    for rec in &run.diag.records {
        assert!((rec.step.lambda_next - rec.step.lambda).abs() < 10.0 * rec.step.mu.max(rec.step.nu));
    }
    let csv = run.diag.to_csv();
    assert!(csv.starts_with("j,mu,nu,lambda,M,R,residual\n"));
    assert_eq!(csv.lines().count(), run.diag.records.len() + 1);
}

#[test]
fn stable_branch_runs_with_negative_lambda() {
    let m = arnold(1.0, 1e-6);
    let jp = hkam::normalform::theta_branch(&m.red.h_theta, 1);
    let h = ChartJet::from_jet(&jp, m.spec(48, 8), -m.red.sep.lambda, &m.omega).unwrap();
    let run = kam_iterate(&h, &m.red.sep, &m.freq, &KamOptions::default()).unwrap();
    assert!(run.residual < 1e-10, "residual {:e}", run.residual);
    assert!(run.total.c1.abs() < 1e-8);
}

#[test]
fn resolution_independence() {
    let m = arnold(1.0, 1e-5);
    let coarse = kam_iterate(&m.chart_jet(48, 8), &m.red.sep, &m.freq, &KamOptions::default()).unwrap();
    let fine = kam_iterate(&m.chart_jet(72, 10), &m.red.sep, &m.freq, &KamOptions::default()).unwrap();
    let (cc, cf) = (coarse.total.chart.chart(), fine.total.chart.chart());
    let (sc, sf) = (cc.coeffs(&coarse.total.s_hat), cf.coeffs(&fine.total.s_hat));
    // Ŝ is normalized by a zero-mean torus value, so compare directly.
    let mut worst = 0.0f64;
    for i in 0..15 {
        let x = -4.0 + 8.0 * i as f64 / 14.0;
        for j in 0..7 {
            let p = [2.0 * PI * j as f64 / 7.0];
            worst = worst.max((sc.eval(x, &p) - sf.eval(x, &p)).abs());
        }
    }
    assert!(worst < 1e-8, "{worst:e}");
}

#[test]
fn conjugacy_mode() {
    // f ≡ 0 and an angular drift 1e−6 sin x cos φ vanishing on the torus.
    let (m, mut h) = unperturbed(1.0);
    let g = h.chart.sample(|x, p| 1e-6 * x.sin() * p[0].cos());
    h.x[1] = h.x[1].add(&g);
    let run = kam_iterate(&h, &m.red.sep, &m.freq, &KamOptions::default()).unwrap();
    assert!(!run.diag.records.is_empty());
    assert!(run.total.s_hat.max_abs() < 1e-14);
    assert!(run.total.xi[0].abs() < 1e-14);
    let res = conjugacy_residual(&h, &run.total, run.h_final.lambda, &m.red.sep);
    assert!(res < 1e-12, "conjugacy residual {res:e}");
    assert!(run.total.displacement() > 1e-8);
}

#[test]
fn pure_momentum_shift() {
    let (m, h) = unperturbed(1.0);
    let xi = 0.01;
    let mut psi = AffineCanonical::identity(h.spec);
    psi.xi = vec![xi];
    let out = pullback(&h, &psi, &m.red.sep).unwrap();
    // f' = ⟨ω, ξ⟩ + ½ξ², nothing else.
    let expect = m.omega[0] * xi + 0.5 * xi * xi;
    assert!(out.f.add_const(-expect).max_abs() < 1e-15);
    // The drift picks up Qξ in the angular slot.
    assert!(out.x[1].add_const(-(m.omega[0] + xi)).max_abs() < 1e-13);
    let same = pullback(&h, &AffineCanonical::identity(h.spec), &m.red.sep).unwrap();
    assert_eq!(same.f, h.f);
    assert_eq!(same.x, h.x);
}

#[test]
fn symplectic_checks() {
    let (_, h) = unperturbed(1.0);
    let id = AffineCanonical::identity(h.spec);
    assert!(symplectic_check(&id, 5, 1) < 1e-9);
    let mut shift = id.clone();
    shift.s_hat = h.chart.sample(|x, p| 1e-2 * (0.3 * x).sin() * (p[0] + 0.2).cos());
    shift.xi = vec![0.05];
    assert!(symplectic_check(&shift, 5, 2) < 1e-8);
}

#[test]
fn composition_closure() {
    let (_, h) = unperturbed(1.0);
    let chart = &h.chart;
    let mk = |a: f64, ph: f64| {
        let mut p = AffineCanonical::identity(h.spec);
        p.b = vec![chart.sample(|x, q| a * (0.4 * x).cos() * (q[0] + ph).sin()), chart.sample(|x, q| a * (0.3 * x).sin() * (q[0] - ph).cos())];
        p.s_hat = chart.sample(|x, q| a * (0.2 * x).cos() * (q[0] + ph).cos());
        p.xi = vec![a];
        p
    };
    let (p1, p2) = (mk(1e-3, 0.1), mk(2e-3, 0.7));
    let c = p1.compose(&p2).unwrap();
    assert_eq!(c.xi, vec![3e-3]);
    assert!(symplectic_check(&c, 4, 5) < 1e-7);
    let id = AffineCanonical::identity(h.spec);
    let left = id.compose(&p1).unwrap();
    assert!(left.s_hat.sub(&p1.s_hat).max_abs() < 1e-15);
    assert!(left.b[0].sub(&p1.b[0]).max_abs() < 1e-15);
}

#[test]
fn unknown_jets_are_rejected() {
    let m = arnold(1.0, 0.0);
    let mut et = m.red.h_theta.clone();
    et.energy_time = true;
    assert!(ChartJet::from_jet(&et, m.spec(16, 2), 1.0, &m.omega).is_err());
    let bad = Frequency::new(vec![GOLDEN * 2.0], 1.0, 4).unwrap();
    let h = m.chart_jet(16, 2);
    assert!(kam_step(&h, &m.red.sep, &bad).is_err());
}

#[test]
fn slope_of_exact_quadratic_sequence() {
    let mus = [1e-2, 3e-4, 2.7e-7];
    let s = convergence_slope(&mus);
    assert!((s - 2.0).abs() < 0.05, "{s}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn random_small_maps_are_canonical(a in 1e-4f64..1e-2, ph in 0.0f64..6.0, seed in 0u64..100) {
        let (_, h) = unperturbed(1.0);
        let chart = &h.chart;
        let mut p = AffineCanonical::identity(h.spec);
        p.b = vec![chart.sample(|x, q| a * (0.5 * x).sin() * (q[0] + ph).cos()), chart.sample(|x, q| a * (0.2 * x).cos() * (q[0] - ph).sin())];
        p.s_hat = chart.sample(|x, q| a * (0.3 * x).sin() * (2.0 * q[0] + ph).cos());
        prop_assert!(symplectic_check(&p, 3, seed) < 1e-7);
    }
}
