mod common;

use std::f64::consts::PI;

use common::{cyl_random, d_omega, random_table};
use hkam::chart::Chart;
use hkam::homological::*;
use hkam::separatrix::{analyze_potential, separatrix_function, SeparatrixMap};
use hkam::series::FourierTable;
use hkam::Error;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: f64 = 0.618_033_988_749_894_8;

fn pendulum() -> SeparatrixMap {
    separatrix_function(&analyze_potential(&FourierTable::cosine(1, &[1], &[1], 1.0)).unwrap()).unwrap()
}

fn pendulum_chart(sep: &SeparatrixMap, n: usize, kcut: usize) -> Chart {
    let (lo, hi) = sep.chart_bounds(1.5);
    Chart::new(lo, hi, 64, n, kcut)
}

#[test]
fn domega_single_mode_and_obstruction() {
    let freq = Frequency::new(vec![1.0], 0.0, 4).unwrap();
    let v = FourierTable::cosine(1, &[2], &[1], 1.0);
    let u = solve_domega(&v, &freq).unwrap();
    let sine = FourierTable::sine(1, &[2], &[1], 1.0);
    assert!(u.sub(&sine).unwrap().max_abs() < 1e-15);
    let one = FourierTable::constant(1, &[2], 1.0);
    assert!(matches!(solve_domega(&one, &freq), Err(Error::MeanObstruction(_))));
}

#[test]
fn domega_random_residual() {
    let freq = Frequency::new(vec![1.0, GOLDEN], 1.0, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let mut v = random_table(&mut rng, &[6, 6]);
        v.set(&[0, 0], Complex64::new(0.0, 0.0));
        let u = solve_domega(&v, &freq).unwrap();
        let r = d_omega(&u, &freq.omega).sub(&v).unwrap().max_abs();
        assert!(r < 1e-11 * v.max_abs().max(1.0), "residual {r:e}");
        assert!(u.average().abs() < 1e-15);
    }
}

#[test]
fn frequency_floor_rejects_small_divisors() {
    let f = Frequency::new(vec![1.0, GOLDEN], 1.0, 8).unwrap();
    assert!(f.gamma_floor > 0.0);
    assert!(matches!(Frequency::new(vec![1.0, 0.5], 1.0, 4), Err(Error::SmallDivisor(_))));
    let strict = Frequency { omega: vec![1.0, GOLDEN], tau: 1.0, gamma_floor: 10.0, kmax: 8 };
    let v = FourierTable::cosine(2, &[2, 2], &[1, -2], 1.0);
    assert!(matches!(solve_domega(&v, &strict), Err(Error::SmallDivisor(_))));
}

#[test]
fn shifted_examples() {
    let freq = Frequency::new(vec![3.0], 0.0, 4).unwrap();
    let u = solve_shifted(&FourierTable::constant(1, &[1], 1.0), 2.0, &freq).unwrap();
    assert!((u.average() + 0.5).abs() < 1e-15);
    // e^{iφ} as the pair (cos, sin): coefficient 1 at k = 1 before symmetrization.
    let mut v = FourierTable::zeros(1, &[1]);
    v.set(&[1], Complex64::new(1.0, 0.0));
    let u = solve_shifted(&v, 1.0, &freq).unwrap();
    let expect = Complex64::new(1.0, 0.0) / Complex64::new(-1.0, 3.0);
    assert!((u.get(&[1]) - expect).norm() < 1e-15);
    assert!(matches!(solve_shifted(&v, 0.0, &freq), Err(Error::Domain(_))));
    let f2 = Frequency::new(vec![1.0, GOLDEN], 1.0, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = random_table(&mut rng, &[5, 5]);
    let u = solve_shifted(&v, 0.7, &f2).unwrap();
    let r = d_omega(&u, &f2.omega).sub(&u.scale(0.7)).unwrap().sub(&v).unwrap().max_abs();
    assert!(r < 1e-12, "{r:e}");
}

#[test]
fn transport_of_chi_gives_position() {
    let sep = pendulum();
    let chart = pendulum_chart(&sep, 0, 0);
    let freq = Frequency::new(vec![], 0.0, 0).unwrap();
    // v = χ is ψ as a (x)-table with no rotator.
    let sol = solve_transport(&sep.psi, 1.0, &freq, &sep, &chart).unwrap();
    assert!(sol.c.abs() < 1e-14);
    for (i, x) in chart.cheb.nodes.iter().enumerate() {
        assert!((sol.u.vals[i] - x).abs() < 1e-9, "x = {x}: {}", sol.u.vals[i]);
    }
    assert!(transport_residual(&chart, &sep, 1.0, &freq, &sol, &sep.psi) < 1e-9);
}

#[test]
fn transport_trivial_cases() {
    let sep = pendulum();
    let chart = pendulum_chart(&sep, 1, 4);
    let freq = Frequency::new(vec![1.7], 0.0, 4).unwrap();
    let v = FourierTable::cosine(2, &[0, 2], &[0, 1], 1.0);
    let sol = solve_transport(&v, 1.0, &freq, &sep, &chart).unwrap();
    assert!(sol.c.abs() < 1e-14);
    for (g, val) in sol.u.vals.iter().enumerate() {
        let phi = chart.phi(g % chart.nphi())[0];
        assert!((val - phi.sin() / 1.7).abs() < 1e-12);
    }
    let kappa = FourierTable::constant(2, &[0, 0], 0.3);
    let sol = solve_transport(&kappa, 1.0, &freq, &sep, &chart).unwrap();
    assert!((sol.c - 0.3).abs() < 1e-15);
    assert!(sol.u.max_abs() < 1e-14);
}

#[test]
fn transport_random_residual_and_collocation_agree() {
    let sep = pendulum();
    let chart = pendulum_chart(&sep, 1, 6);
    let freq = Frequency::new(vec![GOLDEN * 3.0], 0.0, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let psi = |x: f64| (sep.psi_at(x), sep.dpsi_at(x));
    for _ in 0..3 {
        let v = random_table(&mut rng, &[4, 4]);
        let sol = solve_transport(&v, 1.0, &freq, &sep, &chart).unwrap();
        let r = transport_residual(&chart, &sep, 1.0, &freq, &sol, &v);
        assert!(r < 1e-8, "quadrature residual {r:e}");
        let vf = chart.sample_table(&v, 0.0, &[], &[]);
        let col = chart_transport(&chart, &psi, sep.psi_pp0(), 1.0, &freq, &vf, TransportKind::Plain).unwrap();
        assert!((col.c - sol.c).abs() < 1e-10);
        let diff = col.u.sub(&sol.u).max_abs();
        assert!(diff < 1e-9 * sol.u.max_abs(), "collocation vs quadrature {diff:e}");
    }
}

#[test]
fn minus_pendulum_constant_vanishes() {
    let sep = pendulum();
    let chart = pendulum_chart(&sep, 1, 4);
    let freq = Frequency::new(vec![1.3], 0.0, 4).unwrap();
    let v0 = FourierTable::constant(1, &[0], 1.0);
    let v1 = FourierTable::zeros(2, &[0, 0]);
    let sol = solve_transport_minus(&v0, &v1, 1.0, &freq, &sep, &chart).unwrap();
    assert!(sol.c.abs() < 1e-12);
    assert!((sol.u0.average() + 1.0).abs() < 1e-15);
    assert!(minus_residual(&chart, &sep, 1.0, &freq, &sol, &v0, &v1, 0.5) < 1e-8);
}

#[test]
fn minus_constant_sign_for_asymmetric_separatrix() {
    // ψ''(0) ≠ 0 for an asymmetric potential; the constant is ⟨v1⟩ − ψ''(0)⟨v0⟩.
    let u = FourierTable::cosine(1, &[2], &[1], 1.0).add(&FourierTable::sine(1, &[2], &[2], 0.15)).unwrap();
    let sep = separatrix_function(&analyze_potential(&u).unwrap()).unwrap();
    assert!(sep.psi_pp0().abs() > 1e-3);
    let (lo, hi) = sep.chart_bounds(1.5);
    let chart = Chart::new(lo, hi, 80, 1, 3);
    let freq = Frequency::new(vec![1.3], 0.0, 3).unwrap();
    let v0 = FourierTable::constant(1, &[1], 0.7).add(&FourierTable::cosine(1, &[1], &[1], 0.2)).unwrap();
    let v1 = FourierTable::cosine(2, &[1, 1], &[1, 1], 0.3);
    let sol = solve_transport_minus(&v0, &v1, 1.0, &freq, &sep, &chart).unwrap();
    assert!((sol.c - (v1.average_at_infinity() - sep.psi_pp0() * 0.7)).abs() < 1e-14);
    let r = minus_residual(&chart, &sep, 1.0, &freq, &sol, &v0, &v1, 0.5);
    assert!(r < 1e-8, "{r:e}");
    // Collocation form of the same equation, written for w = ψ·u:
    // λψ w_x + ω·w_φ − λψ' w = ψ(v − c) = v0 + ψ v1 − cψ.
    let psi = |x: f64| (sep.psi_at(x), sep.dpsi_at(x));
    let rhs = chart.sample(|x, phi| v0.eval(phi) + sep.psi_at(x) * v1.eval_x(x, phi));
    let col = chart_transport(&chart, &psi, sep.psi_pp0(), 1.0, &freq, &rhs, TransportKind::Minus).unwrap();
    assert!((col.c - sol.c).abs() < 1e-9, "{} vs {}", col.c, sol.c);
    let res = chart_residual(&chart, &psi, 1.0, &freq, &col, &rhs, TransportKind::Minus);
    assert!(res < 1e-9, "{res:e}");
}

#[test]
fn vector_solver_constants() {
    let sep = pendulum();
    let chart = pendulum_chart(&sep, 1, 2);
    let freq = Frequency::new(vec![1.3], 0.0, 2).unwrap();
    let zero2 = FourierTable::zeros(2, &[0, 0]);
    let zero1 = FourierTable::zeros(1, &[0]);
    let sol = solve_transport_vec(
        &[VecComponent::Minus(zero1.clone(), zero2.clone()), VecComponent::Plain(zero2.clone())],
        1.0,
        &freq,
        &sep,
        &chart,
        true,
    )
    .unwrap();
    assert_eq!(sol.c, vec![0.0, 0.0]);
    assert!(sol.first.u1.max_abs() == 0.0 && sol.rest[0].u.max_abs() == 0.0);
    let v1 = FourierTable::constant(2, &[0, 0], 0.25);
    let ang = FourierTable::cosine(2, &[1, 1], &[1, 1], 1.0);
    let sol = solve_transport_vec(
        &[VecComponent::Minus(zero1.clone(), v1), VecComponent::Plain(ang.clone())],
        1.0,
        &freq,
        &sep,
        &chart,
        true,
    )
    .unwrap();
    assert!((sol.c[0] - 0.25).abs() < 1e-14 && sol.c[1].abs() < 1e-14);
    let biased = ang.add(&FourierTable::constant(2, &[1, 1], 0.1)).unwrap();
    let err = solve_transport_vec(&[VecComponent::Plain(zero2), VecComponent::Plain(biased)], 1.0, &freq, &sep, &chart, true);
    assert!(matches!(err, Err(Error::ResidualMean(_))));
}

#[test]
fn cauchy_trivial_cases() {
    let t = 1.5;
    let zero = CylinderField::from_mode_fns(t, 20, &[vec![1], vec![-1]], |_, _| Complex64::new(0.0, 0.0));
    let u = solve_cauchy(&zero, 1.0, &[2.0], 0.5).unwrap();
    assert!(u.norm(0.0) == 0.0);
    let kappa = CylinderField::from_mode_fns(t, 20, &[vec![0]], |_, _| Complex64::new(0.4, 0.0));
    let u = solve_cauchy(&kappa, 2.0, &[2.0], 0.5).unwrap();
    for j in 0..=10 {
        let s = -t + 0.3 * j as f64;
        assert!((u.modes[0].eval(Complex64::new(s, 0.0), t) - 0.4 * s / 2.0).norm() < 1e-13);
    }
    assert!(matches!(solve_cauchy(&kappa, 0.0, &[2.0], 0.5), Err(Error::Domain(_))));
}

/// Composite Simpson along the vertical-then-horizontal path.
fn path_integral(f: impl Fn(Complex64) -> Complex64, rho: f64, s: f64) -> Complex64 {
    let simpson = |a: Complex64, b: Complex64, n: usize| {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for j in 1..n {
            acc += f(a + h * j as f64) * if j % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    simpson(Complex64::new(0.0, rho), Complex64::new(0.0, 0.0), 4000) + simpson(Complex64::new(0.0, 0.0), Complex64::new(s, 0.0), 4000)
}

#[test]
fn cauchy_single_mode_matches_path_quadrature() {
    let (t, rho) = (1.5, 0.6);
    let v = CylinderField::from_mode_fns(t, 30, &[vec![1], vec![-1]], |_, _| Complex64::new(1.0, 0.0));
    let u = solve_cauchy(&v, 1.0, &[2.0], rho).unwrap();
    let i = Complex64::new(0.0, 1.0);
    for j in 0..=12 {
        let s = -t + 0.25 * j as f64;
        let closed = (1.0 - (i * 2.0 * (i * rho - s)).exp()) / (2.0 * i);
        let got = u.modes[0].eval(Complex64::new(s, 0.0), t);
        assert!((got - closed).norm() < 1e-12, "s = {s}");
    }
    // Non-constant data: v(t) = cos(1.3 t) + 0.5 i, against quadrature; ω large
    // enough to trigger the oscillator representation.
    for omega in [2.0, 40.0] {
        let vf = |s: Complex64| (s * 1.3).cos() + Complex64::new(0.0, 0.5);
        let v = CylinderField::from_mode_fns(t, 40, &[vec![1], vec![-1]], |m, s| {
            let z = vf(Complex64::new(s, 0.0));
            if m == 0 {
                z
            } else {
                z.conj()
            }
        });
        let u = solve_cauchy(&v, 1.0, &[omega], rho).unwrap();
        for s in [-1.2, -0.3, 0.0, 0.7, 1.4] {
            let oracle = path_integral(|z| vf(z) * (i * omega * (z - s)).exp(), rho, s);
            let got = u.modes[0].eval(Complex64::new(s, 0.0), t);
            assert!((got - oracle).norm() < 1e-10, "ω = {omega}, s = {s}: {got} vs {oracle}");
        }
        assert!(cauchy_residual(&u, &v, 1.0, &[omega]) < 1e-10);
    }
}

#[test]
fn cauchy_uniform_in_omega() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let v = cyl_random(&mut rng, 1.5, 2, 3);
    let c0 = cauchy_reference_constant(&v, 1.0, 0.5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mag = rng.random_range(0.5..50.0);
        let th = rng.random_range(0.0..2.0 * PI);
        let omega = [mag * th.cos(), mag * th.sin()];
        let u = solve_cauchy(&v, 1.0, &omega, 0.5).unwrap();
        assert!(cauchy_residual(&u, &v, 1.0, &omega) < 1e-8);
        worst = worst.max(cauchy_constant(&v, 1.0, &omega, 0.5).unwrap() / c0);
    }
    assert!(worst < 3.0, "ratio {worst}");
}

#[test]
fn cauchy_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = cyl_random(&mut rng, 1.5, 1, 4);
    let a = solve_cauchy(&v, 0.8, &[3.3], 0.4).unwrap();
    let b = solve_cauchy(&v, 0.8, &[3.3], 0.4).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn domega_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let freq = Frequency::new(vec![1.0, GOLDEN], 1.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v1 = random_table(&mut rng, &[4, 4]);
        let mut v2 = random_table(&mut rng, &[4, 4]);
        v1.set(&[0, 0], Complex64::new(0.0, 0.0));
        v2.set(&[0, 0], Complex64::new(0.0, 0.0));
        let lhs = solve_domega(&v1.scale(a).add(&v2.scale(b)).unwrap(), &freq).unwrap();
        let rhs = solve_domega(&v1, &freq).unwrap().scale(a).add(&solve_domega(&v2, &freq).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn collocation_is_linear(seed in 0u64..1000, a in -2.0f64..2.0) {
        let sep = pendulum();
        let chart = pendulum_chart(&sep, 1, 3);
        let freq = Frequency::new(vec![1.9], 0.0, 3).unwrap();
        let psi = |x: f64| (sep.psi_at(x), sep.dpsi_at(x));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v1 = chart.sample_table(&random_table(&mut rng, &[3, 3]), 0.0, &[], &[]);
        let v2 = chart.sample_table(&random_table(&mut rng, &[3, 3]), 0.0, &[], &[]);
        for kind in [TransportKind::Plain, TransportKind::Minus] {
            let s1 = chart_transport(&chart, &psi, 0.0, -1.0, &freq, &v1, kind).unwrap();
            let s2 = chart_transport(&chart, &psi, 0.0, -1.0, &freq, &v2, kind).unwrap();
            let s12 = chart_transport(&chart, &psi, 0.0, -1.0, &freq, &v1.scale(a).add(&v2), kind).unwrap();
            let d = s12.u.sub(&s1.u.scale(a).add(&s2.u)).max_abs();
            prop_assert!(d < 1e-10 * (1.0 + s12.u.max_abs()));
            prop_assert!((s12.c - (a * s1.c + s2.c)).abs() < 1e-10);
            prop_assert!(chart_residual(&chart, &psi, -1.0, &freq, &s12, &v1.scale(a).add(&v2), kind) < 1e-9);
        }
    }
}
