use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbm_core::model::{validate_system, KernelSpec};
use rbm_core::scenarios::preset;
use rbm_core::Severity;

fn builtin_kernels() -> Vec<(&'static str, KernelSpec, f64)> {
    // (label, kernel, sampling radius)
    vec![
        ("cauchy", KernelSpec::scaled_cauchy(-1.0, 2.0), 10.0),
        ("cauchy_strong", KernelSpec::scaled_cauchy(2.0, -2.0), 10.0),
        ("bump", KernelSpec::bump_gradient(355.0, 2.0), 2.5),
        ("repulsive_bump", KernelSpec::repulsive_bump(25.0, 0.7), 1.0),
        ("opinion", KernelSpec::opinion(5.0, 1.0), 1.3),
        ("opinion_wide", KernelSpec::opinion(10.0, 2.5), 3.0),
        ("zero", KernelSpec::zero(), 5.0),
    ]
}

#[test]
fn kernels_stay_below_declared_sup_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, k, radius) in builtin_kernels() {
        let bound = k.sup_norm.unwrap();
        for d in 1..=3 {
            let mut worst = 0.0f64;
            let samples = if d == 1 { 1_000_000 } else { 200_000 };
            for _ in 0..samples {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-radius..radius)).collect();
                let v = k.eval(&x);
                worst = worst.max(v.iter().map(|c| c * c).sum::<f64>().sqrt());
            }
            assert!(worst <= bound, "{name} d={d}: {worst} > {bound}");
            if bound > 0.0 && d == 1 {
                // The declared constant is a tight bound, not a loose one.
                assert!(worst >= 0.99 * bound, "{name}: sup {worst} far below declared {bound}");
            }
        }
    }
}

proptest! {
    #[test]
    fn kernels_are_odd(x in proptest::collection::vec(-4.0f64..4.0, 1..4)) {
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        for (_, k, _) in builtin_kernels() {
            let a = k.eval(&x);
            let b = k.eval(&neg);
            for (p, q) in a.iter().zip(&b) {
                prop_assert_eq!(*p, -*q);
            }
        }
    }
}

/// `B^eta(x) = (D / eta) exp(1 - 1 / (1 - (x / eta)^2))` on `|x| < eta`.
fn bump_potential(d: f64, eta: f64, x: f64) -> f64 {
    let y = x / eta;
    if y.abs() >= 1.0 {
        0.0
    } else {
        d / eta * (1.0 - 1.0 / (1.0 - y * y)).exp()
    }
}

#[test]
fn bump_gradient_matches_finite_differences() {
    let (d, eta) = (355.0, 2.0);
    let k = KernelSpec::bump_gradient(d, eta);
    let h = 1e-5;
    for m in -95i32..=95 {
        let x = eta * f64::from(m) / 100.0;
        if m.abs() < 2 {
            continue; // the gradient vanishes at the origin; relative error undefined
        }
        let fd = (bump_potential(d, eta, x + h) - bump_potential(d, eta, x - h)) / (2.0 * h);
        let v = k.eval(&[x])[0];
        assert!((v - fd).abs() <= 1e-6 * fd.abs(), "x={x}: kernel {v}, finite difference {fd}");
    }
}

/// Largest singular value of the Jacobian of `x / (1 + |x|^2)` in 2-d,
/// computed from finite differences.
fn cauchy_jacobian_norm(x: [f64; 2]) -> f64 {
    let f = |p: [f64; 2]| {
        let s = 1.0 + p[0] * p[0] + p[1] * p[1];
        [p[0] / s, p[1] / s]
    };
    let h = 1e-6;
    let mut j = [[0.0; 2]; 2];
    for c in 0..2 {
        let mut a = x;
        let mut b = x;
        a[c] += h;
        b[c] -= h;
        let (fa, fb) = (f(a), f(b));
        for r in 0..2 {
            j[r][c] = (fa[r] - fb[r]) / (2.0 * h);
        }
    }
    // singular values of a 2x2 matrix
    let (a, b, c, d) = (j[0][0], j[0][1], j[1][0], j[1][1]);
    let s1 = a * a + b * b + c * c + d * d;
    let s2 = ((a * a + b * b - c * c - d * d).powi(2) + 4.0 * (a * c + b * d).powi(2)).sqrt();
    ((s1 + s2) / 2.0).sqrt()
}

#[test]
fn cauchy_lipschitz_constant_is_the_jacobian_sup() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20_000 {
        let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        worst = worst.max(cauchy_jacobian_norm(x));
    }
    assert!(worst <= 1.0 + 1e-9);
    assert!((cauchy_jacobian_norm([0.0, 0.0]) - 1.0).abs() < 1e-9);
    let k = KernelSpec::scaled_cauchy(-1.0, 2.0);
    assert_eq!(k.lipschitz, Some(2.0));
}

#[test]
fn test3_preset_warns_on_convexity() {
    // L_ij = |Q_i Q_j| with Q = (-1, 2, -2); 2 sum_j max(L_1j, L_j1) = 2 (1 + 2 + 2) = 10 > r_1 = 1.
    let spec = preset("test3").unwrap().system;
    let diags = validate_system(&spec);
    assert!(diags.iter().all(|d| d.severity == Severity::Warning));
    for (i, bound) in [(1, 10.0), (2, 20.0), (3, 20.0)] {
        let path = format!("species.{i}.convexity");
        let d = diags.iter().find(|d| d.path == path).expect("warning per species");
        assert!(d.message.contains(&format!("{bound}")), "{}", d.message);
    }
}
