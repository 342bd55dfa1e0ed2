mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use ofo_core::controller::InputBox;
use ofo_core::oracle::{
    fixed_point_residual, solve_acopf, solve_linear_opf, OracleMethod, OracleOptions, TOL_OPF,
};
use ofo_core::plant::{linearize, AcPlant, Plant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn agrees_with_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..20 {
        let (plant, d, bounds, cfg) = two_bus_instance(&mut rng);
        let opts = OracleOptions::with_alpha(1.0 / (1.0 + cfg.rho * 2e-4));
        let sol = solve_acopf(&plant, &d, &bounds, &cfg, &opts, None).unwrap();
        assert!(
            sol.residual <= TOL_OPF,
            "trial {trial}: residual {:e}",
            sol.residual
        );
        let grid = grid_search(&plant, &d, &bounds, &cfg);
        let gap = (&sol.u_star - &grid).amax();
        assert!(
            gap <= 2e-3,
            "trial {trial}: oracle {} vs grid {}",
            sol.u_star,
            grid
        );
    }
}

#[test]
fn certificate_holds_on_the_plant() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..10 {
        let (plant, d, bounds, cfg) = two_bus_instance(&mut rng);
        let alpha = 0.5 / (1.0 + cfg.rho * 2e-4);
        let sol = solve_acopf(
            &plant,
            &d,
            &bounds,
            &cfg,
            &OracleOptions::with_alpha(alpha),
            None,
        )
        .unwrap();
        let independent =
            fixed_point_residual(&plant, &sol.u_star, &d, &bounds, &cfg, alpha).unwrap();
        assert!(independent <= TOL_OPF);
        assert!((independent - sol.residual).abs() < 1e-15);
        assert_eq!(sol.y_star, plant.output(&sol.u_star, &d).unwrap());
    }
}

#[test]
fn methods_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..5 {
        let (plant, d, bounds, mut cfg) = two_bus_instance(&mut rng);
        cfg.rho = 100.0;
        let alpha = 0.9 / (1.0 + cfg.rho * 2e-4);
        let lin = solve_acopf(
            &plant,
            &d,
            &bounds,
            &cfg,
            &OracleOptions::with_alpha(alpha),
            None,
        )
        .unwrap();
        let pg_opts = OracleOptions {
            method: OracleMethod::ProjectedGradient,
            ..OracleOptions::with_alpha(alpha)
        };
        let pg = solve_acopf(&plant, &d, &bounds, &cfg, &pg_opts, None).unwrap();
        assert!(
            (&lin.u_star - &pg.u_star).amax() < 1e-6,
            "{} vs {}",
            lin.u_star,
            pg.u_star
        );
    }
}

#[test]
fn linear_plant_matches_linear_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..10 {
        let h = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-0.1..0.1));
        let plant = linear_plant(h, DVector::from_fn(3, |_, _| rng.random_range(0.9..1.1)));
        let cfg = config(0.1, DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)));
        let bounds = unit_box(4, -0.8, 0.8);
        let d = DVector::zeros(1);
        let opts = OracleOptions::with_alpha(0.1);
        let ac = solve_acopf(&plant, &d, &bounds, &cfg, &opts, None).unwrap();
        let lin = solve_linear_opf(&plant, &d, &bounds, &cfg, &opts).unwrap();
        assert!((&ac.u_star - &lin).amax() < 1e-8);
    }
}

#[test]
fn two_bus_undervoltage_uses_reactive_support() {
    let f = feeder("two_bus");
    let plant = AcPlant::new(f).unwrap();
    // Heavy load, no active-power headroom: only q can lift the voltage.
    let d = DVector::from_vec(vec![-4.0, -3.0]);
    let bounds = InputBox::new(
        DVector::from_vec(vec![1.0, 0.0, -1.0]),
        DVector::from_vec(vec![1.0, 0.0, 1.0]),
    )
    .unwrap();
    let cfg = config(0.1, DVector::from_vec(vec![1.0, 0.0, 0.0]));
    assert!(plant.output(&cfg.u_ref, &d).unwrap()[0] < cfg.v_min);
    let sol = solve_acopf(
        &plant,
        &d,
        &bounds,
        &cfg,
        &OracleOptions::with_alpha(0.5),
        None,
    )
    .unwrap();
    assert!(sol.u_star[2] > 0.0, "q* = {}", sol.u_star[2]);
    assert!(sol.y_star[0] > plant.output(&cfg.u_ref, &d).unwrap()[0]);
}

#[test]
fn warm_start_does_not_change_the_answer() {
    let sc = scenario("radial15_nominal");
    let plant = AcPlant::new(sc.feeder.clone()).unwrap();
    let opts = OracleOptions::with_alpha(1e-3);
    let cold = solve_acopf(
        &plant,
        &sc.disturbances[10],
        &sc.boxes[10],
        &sc.controller,
        &opts,
        None,
    )
    .unwrap();
    let prev = solve_acopf(
        &plant,
        &sc.disturbances[0],
        &sc.boxes[0],
        &sc.controller,
        &opts,
        None,
    )
    .unwrap();
    let warm = solve_acopf(
        &plant,
        &sc.disturbances[10],
        &sc.boxes[10],
        &sc.controller,
        &opts,
        Some(&prev.u_star),
    )
    .unwrap();
    assert!((&cold.u_star - &warm.u_star).amax() < 1e-7);
    assert!(warm.residual <= TOL_OPF && cold.residual <= TOL_OPF);
}

#[test]
fn linearized_model_optimum_differs_from_ac_optimum_on_nonlinear_feeder() {
    // Sanity check that the nominal scenario really exercises the nonlinearity.
    let sc = scenario("radial15_nominal");
    let plant = AcPlant::new(sc.feeder.clone()).unwrap();
    let (u0, d0) = ofo_core::plant::zero_injection_point(&sc.feeder, sc.slack_ref);
    let lin = linearize(&plant, &u0, &d0).unwrap();
    let opts = OracleOptions::with_alpha(1e-3);
    let ac = solve_acopf(
        &plant,
        &sc.disturbances[0],
        &sc.boxes[0],
        &sc.controller,
        &opts,
        None,
    )
    .unwrap();
    let ff = solve_linear_opf(
        &lin,
        &sc.disturbances[0],
        &sc.boxes[0],
        &sc.controller,
        &opts,
    )
    .unwrap();
    assert!((&ac.u_star - &ff).norm() > 1e-2);
}
