mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use ofo_core::feeder::FeederModel;
use ofo_core::plant::{linearize, perturb_admittance, AcPlant, Plant};
use ofo_core::OfoError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Bus admittance matrix assembled directly from the line list.
fn ybus(f: &FeederModel) -> DMatrix<Complex64> {
    let n = f.n_buses();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for l in f.lines() {
        let a = f.bus_index(l.from).unwrap();
        let b = f.bus_index(l.to).unwrap();
        let g = Complex64::new(1.0, 0.0) / Complex64::new(l.r, l.x);
        y[(a, a)] += g;
        y[(b, b)] += g;
        y[(a, b)] -= g;
        y[(b, a)] -= g;
    }
    y
}

/// Worst complex power mismatch at the non-slack buses.
fn mismatch(f: &FeederModel, u: &DVector<f64>, d: &DVector<f64>, v: &DVector<Complex64>) -> f64 {
    let y = ybus(f);
    let current = &y * v;
    let n = f.n_y();
    let n_der = f.n_der();
    let mut worst: f64 = 0.0;
    for (k, &i) in f.non_slack().iter().enumerate() {
        let mut s = Complex64::new(d[k], d[n + k]);
        if let Some(j) = f.der_positions().iter().position(|&p| p == k) {
            s += Complex64::new(u[1 + j], u[1 + n_der + j]);
        }
        worst = worst.max((s - v[i] * current[i].conj()).norm());
    }
    worst
}

#[test]
fn power_flow_residual_on_bundled_feeders() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for name in FEEDERS {
        let f = feeder(name);
        let plant = AcPlant::new(f.clone()).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let (u, d) = random_point(&mut rng, &f);
            let sol = plant.solve(&u, &d).unwrap();
            assert!((sol.voltages[f.slack_index()] - Complex64::new(u[0], 0.0)).norm() < 1e-15);
            worst = worst.max(mismatch(&f, &u, &d, &sol.voltages));
        }
        assert!(worst <= 1e-9, "{name}: residual {worst:e}");
    }
}

#[test]
fn two_bus_matches_closed_form() {
    let f = feeder("two_bus");
    let plant = AcPlant::new(f.clone()).unwrap();
    let (r, x) = (f.lines()[0].r, f.lines()[0].x);
    // Load s = 0.1 + 0.1j at the far end, slack at v0:
    // |V|⁴ + (2(rP + xQ) − v0²)|V|² + |z|²|s|² = 0, upper root.
    for (v0, p, q) in [
        (1.0, 0.1, 0.1),
        (1.03, 0.4, -0.2),
        (0.97, -0.3, 0.05),
        (1.0, 0.0, 0.0),
    ] {
        let u = DVector::from_vec(vec![v0, 0.0, 0.0]);
        let d = DVector::from_vec(vec![-p, -q]);
        let b = 2.0 * (r * p + x * q) - v0 * v0;
        let c = (r * r + x * x) * (p * p + q * q);
        let expected = ((-b + (b * b - 4.0 * c).sqrt()) / 2.0).sqrt();
        let y = plant.output(&u, &d).unwrap();
        assert!(
            (y[0] - expected).abs() < 1e-9,
            "v0={v0} s={p}+{q}j: {} vs {expected}",
            y[0]
        );
    }
    let y = plant
        .output(
            &DVector::from_vec(vec![1.0, 0.0, 0.0]),
            &DVector::from_vec(vec![-0.1, -0.1]),
        )
        .unwrap();
    assert!((y[0] - 0.9980).abs() < 5e-5);
}

#[test]
fn sensitivity_matches_forward_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in FEEDERS {
        let f = feeder(name);
        let plant = AcPlant::new(f.clone()).unwrap();
        for _ in 0..10 {
            let (u, d) = random_point(&mut rng, &f);
            let h = plant.sensitivity(&u, &d).unwrap();
            let y = plant.output(&u, &d).unwrap();
            let step = 1e-6;
            let mut fd = DMatrix::zeros(f.n_y(), f.n_u());
            for j in 0..f.n_u() {
                let mut up = u.clone();
                up[j] += step;
                fd.set_column(j, &((plant.output(&up, &d).unwrap() - &y) / step));
            }
            let rel = (&h - &fd).norm() / fd.norm();
            assert!(rel < 1e-4, "{name}: relative FD mismatch {rel:e}");
        }
    }
}

#[test]
fn linearization_error_is_second_order() {
    let f = feeder("radial15");
    let plant = AcPlant::new(f.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (u, d) = random_point(&mut rng, &f);
    let h = plant.sensitivity(&u, &d).unwrap();
    let y = plant.output(&u, &d).unwrap();
    let dir = DVector::from_fn(f.n_u(), |i, _| {
        if i == 0 {
            0.0
        } else {
            ((i * 7 % 5) as f64 - 2.0) / 2.0
        }
    });
    let err = |s: f64| {
        let du = &dir * s;
        (plant.output(&(&u + &du), &d).unwrap() - &y - &h * du).norm()
    };
    let (e1, e2) = (err(0.04), err(0.02));
    let ratio = e1 / e2;
    assert!(
        (3.5..4.5).contains(&ratio),
        "error ratio under halving {ratio}"
    );
}

#[test]
fn linear_model_reproduces_anchor() {
    let f = feeder("chain6");
    let plant = AcPlant::new(f.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (u, d) = random_point(&mut rng, &f);
    let lin = linearize(&plant, &u, &d).unwrap();
    let y = plant.output(&u, &d).unwrap();
    assert!((lin.predict(&u, &d) - &y).amax() < 1e-12);
    assert!((lin.sensitivity(&u, &d).unwrap() - plant.sensitivity(&u, &d).unwrap()).amax() < 1e-12);
}

#[test]
fn heavy_load_fails_to_converge_cleanly() {
    let f = feeder("two_bus");
    let plant = AcPlant::new(f).unwrap();
    let err = plant
        .output(
            &DVector::from_vec(vec![1.0, 0.0, 0.0]),
            &DVector::from_vec(vec![-40.0, -40.0]),
        )
        .unwrap_err();
    assert!(matches!(err, OfoError::NonConvergence { .. }), "{err}");
}

#[test]
fn perturbation_changes_the_model_sensitivity() {
    let f = feeder("radial15");
    let all: Vec<usize> = (0..f.lines().len()).collect();
    let g = perturb_admittance(&f, &all, 0.2, 1).unwrap();
    for (a, b) in f.lines().iter().zip(g.lines()) {
        let k = b.r / a.r;
        assert!((0.8..=1.2).contains(&k));
        assert!((b.x / a.x - k).abs() < 1e-12, "r and x scale together");
    }
    let (u, d) = ofo_core::plant::zero_injection_point(&f, 1.0);
    let h = AcPlant::new(f).unwrap().sensitivity(&u, &d).unwrap();
    let hp = AcPlant::new(g).unwrap().sensitivity(&u, &d).unwrap();
    assert!((&h - &hp).norm() > 1e-3 * h.norm());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// More load at a bus never raises its voltage.
    #[test]
    fn voltage_falls_with_load(bus in 0usize..14, base in 0.0f64..0.04, extra in 0.001f64..0.05, seed in 0u64..1000) {
        let f = feeder("radial15");
        let plant = AcPlant::new(f.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, mut d) = random_point(&mut rng, &f);
        d[bus] = -base;
        let y0 = plant.output(&u, &d).unwrap();
        d[bus] -= extra;
        let y1 = plant.output(&u, &d).unwrap();
        prop_assert!(y1[bus] < y0[bus]);
    }

    /// Raising the slack voltage shifts every bus voltage up.
    #[test]
    fn slack_voltage_lifts_all_buses(v0 in 0.95f64..1.04, dv in 0.001f64..0.01, seed in 0u64..1000) {
        let f = feeder("chain6");
        let plant = AcPlant::new(f.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut u, d) = random_point(&mut rng, &f);
        u[0] = v0;
        let y0 = plant.output(&u, &d).unwrap();
        u[0] = v0 + dv;
        let y1 = plant.output(&u, &d).unwrap();
        prop_assert!(y1.iter().zip(y0.iter()).all(|(a, b)| a > b));
    }
}
