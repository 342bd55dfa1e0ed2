mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use ofo_core::controller::{
    composite_operator, cost_f, estimate_monotone_lipschitz, excitation_sample, ofo_step,
    penalty_g, project_box, InputBox, MonotonicityEstimate,
};
use ofo_core::oracle::{solve_acopf, OracleOptions};
use ofo_core::plant::{zero_injection_point, AcPlant, Plant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Iterate the noiseless loop on `plant` and return the per-step error ratios
/// `‖u_{k+1} − u*‖ / ‖u_k − u*‖`.
fn contraction_ratios(
    plant: &dyn Plant,
    bounds: &InputBox,
    alpha: f64,
    rho: f64,
    u_ref: DVector<f64>,
    start: DVector<f64>,
) -> Vec<f64> {
    let mut cfg = config(alpha, u_ref);
    cfg.rho = rho;
    let d = DVector::zeros(plant.n_d());
    let star = solve_acopf(
        plant,
        &d,
        bounds,
        &cfg,
        &OracleOptions::with_alpha(alpha.min(0.1)),
        None,
    )
    .unwrap()
    .u_star;
    let mut u = start;
    let mut ratios = Vec::new();
    for _ in 0..30 {
        let e = (&u - &star).norm();
        if e < 1e-10 {
            break;
        }
        let y = plant.output(&u, &d).unwrap();
        let h = plant.sensitivity(&u, &d).unwrap();
        u = ofo_step(&u, &y, &h, bounds, &cfg, &DVector::zeros(u.len())).unwrap();
        ratios.push((&u - &star).norm() / e);
    }
    ratios
}

#[test]
fn unit_operator_contracts_at_predicted_rate() {
    // Outputs never leave the band, so F(u) = u − u_ref: η = L = 1.
    let plant = linear_plant(
        DMatrix::from_row_slice(2, 3, &[0.01, 0.0, 0.02, 0.0, 0.01, -0.01]),
        DVector::from_element(2, 1.0),
    );
    let bounds = unit_box(3, -1.0, 1.0);
    let est = estimate_monotone_lipschitz(
        |u| {
            composite_operator(
                &plant,
                u,
                &DVector::zeros(1),
                &config(0.5, DVector::zeros(3)),
            )
        },
        &bounds,
        &config(0.5, DVector::zeros(3)),
        200,
        1,
    )
    .unwrap();
    assert!((est.eta_hat - 1.0).abs() < 1e-12 && (est.l_hat - 1.0).abs() < 1e-12);
    let eps = MonotonicityEstimate::from_constants(1.0, 1.0, 0.5).epsilon;
    let ratios = contraction_ratios(
        &plant,
        &bounds,
        0.5,
        100.0,
        DVector::from_vec(vec![0.3, -0.2, 0.5]),
        DVector::from_vec(vec![-0.9, 0.8, -0.7]),
    );
    assert!(!ratios.is_empty());
    for r in ratios {
        assert!(r <= eps + 0.01, "ratio {r} vs ε {eps}");
    }
}

#[test]
fn active_penalty_contracts_within_sampled_bound() {
    // A plant pushed over v_max everywhere in the box: F is affine with
    // Jacobian I + ρ HᵀH.
    let h = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.05, 0.2]);
    let plant = linear_plant(h.clone(), DVector::from_element(2, 1.2));
    let bounds = unit_box(2, 0.0, 1.0);
    let cfg = config(0.1, DVector::from_element(2, 1.0));
    let est = estimate_monotone_lipschitz(
        |u| composite_operator(&plant, u, &DVector::zeros(1), &cfg),
        &bounds,
        &cfg,
        500,
        2,
    )
    .unwrap();
    let jac = DMatrix::identity(2, 2) + h.transpose() * &h * cfg.rho;
    let eig = jac.symmetric_eigenvalues();
    assert!(est.eta_hat >= eig.min() - 1e-9 && est.l_hat <= eig.max() + 1e-9);
    let alpha = est.eta_hat / (est.l_hat * est.l_hat);
    let eps = est.epsilon_at(alpha);
    for r in contraction_ratios(
        &plant,
        &bounds,
        alpha,
        cfg.rho,
        cfg.u_ref.clone(),
        DVector::zeros(2),
    ) {
        assert!(r <= eps + 1e-9, "ratio {r} vs ε {eps}");
    }
}

#[test]
fn two_bus_constants_inside_the_band() {
    let f = feeder("two_bus");
    let plant = AcPlant::new(f.clone()).unwrap();
    let (u_ref, d) = zero_injection_point(&f, 1.0);
    let cfg = config(0.5, u_ref);
    let bounds = InputBox::new(
        DVector::from_vec(vec![0.99, 0.0, -0.1]),
        DVector::from_vec(vec![1.01, 0.2, 0.1]),
    )
    .unwrap();
    let est = estimate_monotone_lipschitz(
        |u| composite_operator(&plant, u, &d, &cfg),
        &bounds,
        &cfg,
        200,
        3,
    )
    .unwrap();
    assert!((est.eta_hat - 1.0).abs() < 1e-9, "{}", est.eta_hat);
    assert!((est.l_hat - 1.0).abs() < 1e-9, "{}", est.l_hat);
    assert!((est.alpha_max - 2.0).abs() < 1e-8);
}

#[test]
fn zero_sensitivity_reduces_to_reference_pull() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(1..6);
        let u = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let u_ref = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(3, |_, _| rng.random_range(0.8..1.2));
        let alpha = rng.random_range(0.01..1.0);
        let cfg = config(alpha, u_ref.clone());
        let bounds = unit_box(n, -1.0, 1.0);
        let next = ofo_step(
            &u,
            &y,
            &DMatrix::zeros(3, n),
            &bounds,
            &cfg,
            &DVector::zeros(n),
        )
        .unwrap();
        let expected = project_box(&(&u - (&u - &u_ref) * alpha), &bounds);
        assert_eq!(next, expected);
    }
}

#[test]
fn small_steps_descend_the_objective() {
    let f = feeder("chain6");
    let plant = AcPlant::new(f.clone()).unwrap();
    let n_der = f.n_der();
    let mut u_ref = DVector::zeros(f.n_u());
    u_ref[0] = 1.0;
    for k in 0..n_der {
        u_ref[1 + k] = 2.0;
    }
    let cfg = config(0.002, u_ref);
    let lower = DVector::from_fn(f.n_u(), |i, _| {
        if i == 0 {
            0.95
        } else if i <= n_der {
            0.0
        } else {
            -0.3
        }
    });
    let upper = DVector::from_fn(f.n_u(), |i, _| {
        if i == 0 {
            1.05
        } else if i <= n_der {
            2.0
        } else {
            0.3
        }
    });
    let bounds = InputBox::new(lower, upper).unwrap();
    let d = DVector::from_fn(f.n_d(), |i, _| if i < f.n_y() { -0.01 } else { 0.0 });
    let objective =
        |u: &DVector<f64>| cost_f(&cfg, u) + penalty_g(&cfg, &plant.output(u, &d).unwrap());
    let mut u = project_box(&cfg.u_ref, &bounds);
    let mut last = objective(&u);
    for _ in 0..200 {
        let y = plant.output(&u, &d).unwrap();
        let h = plant.sensitivity(&u, &d).unwrap();
        u = ofo_step(&u, &y, &h, &bounds, &cfg, &DVector::zeros(f.n_u())).unwrap();
        let now = objective(&u);
        assert!(now <= last + 1e-12, "{now} > {last}");
        last = now;
    }
}

#[test]
fn excitation_statistics() {
    let mut cfg = config(0.1, DVector::zeros(4));
    cfg.sigma_u = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 50_000;
    let samples: Vec<f64> = (0..n)
        .flat_map(|_| {
            excitation_sample(&mut rng, &cfg, 4)
                .iter()
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    let m = mean(samples.iter().copied());
    let var = mean(samples.iter().map(|v| (v - m) * (v - m)));
    // Standard normal truncated to ±3: variance 1 − 6φ(3)/(2Φ(3) − 1).
    let phi3 = (-4.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let truncated = 1.0 - 6.0 * phi3 / 0.997_300_203_936_740;
    let se = cfg.sigma_u / (samples.len() as f64).sqrt();
    assert!(m.abs() < 5.0 * se, "mean {m:e}");
    assert!((var.sqrt() / cfg.sigma_u - truncated.sqrt()).abs() < 0.01);
    assert!(samples.iter().all(|v| v.abs() <= 3.0 * cfg.sigma_u));

    cfg.sigma_u = 0.0;
    assert_eq!(excitation_sample(&mut rng, &cfg, 4), DVector::zeros(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn step_stays_in_box(
        seed in any::<u64>(),
        n_u in 1usize..6,
        n_y in 1usize..6,
        alpha in 1e-4f64..10.0,
        sigma in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lower = DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..0.5));
        let upper = DVector::from_fn(n_u, |i, _| lower[i] + rng.random_range(0.0..1.0));
        let bounds = InputBox::new(lower, upper).unwrap();
        let mut cfg = config(alpha, DVector::from_fn(n_u, |_, _| rng.random_range(-3.0..3.0)));
        cfg.sigma_u = sigma;
        let u = DVector::from_fn(n_u, |_, _| rng.random_range(-3.0..3.0));
        let y = DVector::from_fn(n_y, |_, _| rng.random_range(0.5..1.5));
        let h = DMatrix::from_fn(n_y, n_u, |_, _| rng.random_range(-2.0..2.0));
        let omega = excitation_sample(&mut rng, &cfg, n_u);
        let next = ofo_step(&u, &y, &h, &bounds, &cfg, &omega).unwrap();
        prop_assert!(bounds.contains(&next));
    }

    /// A point already optimal for a penalty-free problem is a fixed point.
    #[test]
    fn reference_inside_box_is_fixed(seed in any::<u64>(), n_u in 1usize..6, alpha in 1e-3f64..1.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u_ref = DVector::from_fn(n_u, |_, _| rng.random_range(-0.9..0.9));
        let cfg = config(alpha, u_ref.clone());
        let y = DVector::from_element(2, 1.0);
        let h = DMatrix::from_fn(2, n_u, |_, _| rng.random_range(-1.0..1.0));
        let next = ofo_step(&u_ref, &y, &h, &unit_box(n_u, -1.0, 1.0), &cfg, &DVector::zeros(n_u)).unwrap();
        prop_assert_eq!(next, u_ref);
    }
}
