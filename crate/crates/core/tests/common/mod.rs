#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use ofo_core::controller::{cost_f, penalty_g, ControllerConfig, InputBox};
use ofo_core::feeder::FeederModel;
use ofo_core::plant::{AcPlant, LinearModel, Plant};
use ofo_core::scenario::{load_scenario, parse_scenario, Scenario};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FEEDERS: [&str; 3] = ["two_bus", "chain6", "radial15"];

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

pub fn feeder(name: &str) -> FeederModel {
    FeederModel::load(repo_path(&format!("data/feeders/{name}.json"))).unwrap()
}

pub fn scenario(name: &str) -> Scenario {
    load_scenario(repo_path(&format!("scenarios/{name}.toml"))).unwrap()
}

/// Parse scenario text whose relative paths resolve against `scenarios/`.
pub fn scenario_from(text: &str) -> Scenario {
    parse_scenario(text, &repo_path("scenarios"), "inline").unwrap()
}

/// A random operating point well inside the solvable region of the bundled
/// feeders: moderate loads, DER output up to 0.8 p.u.
pub fn random_point<R: Rng>(rng: &mut R, f: &FeederModel) -> (DVector<f64>, DVector<f64>) {
    let n_der = f.n_der();
    let mut u = DVector::zeros(f.n_u());
    u[0] = rng.random_range(0.95..=1.05);
    for k in 0..n_der {
        u[1 + k] = rng.random_range(0.0..=0.8);
        u[1 + n_der + k] = rng.random_range(-0.1..=0.1);
    }
    let n = f.n_y();
    let d = DVector::from_fn(2 * n, |i, _| {
        if i < n {
            -rng.random_range(0.0..=0.05)
        } else {
            -rng.random_range(0.0..=0.02)
        }
    });
    (u, d)
}

pub fn config(alpha: f64, u_ref: DVector<f64>) -> ControllerConfig {
    ControllerConfig {
        alpha,
        u_ref,
        rho: 100.0,
        v_min: 0.94,
        v_max: 1.06,
        sigma_u: 0.0,
        excitation_bound: 3.0,
    }
}

pub fn unit_box(n: usize, lo: f64, hi: f64) -> InputBox {
    InputBox::new(DVector::from_element(n, lo), DVector::from_element(n, hi)).unwrap()
}

/// `y = H u + y0` with no disturbance channel.
pub fn linear_plant(h: DMatrix<f64>, y0: DVector<f64>) -> LinearModel {
    let n_y = h.nrows();
    LinearModel::new(h, DMatrix::zeros(n_y, 1), y0).unwrap()
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Exhaustive search over the two free inputs (DER p and q, slack pinned)
/// with two rounds of local refinement.
pub fn grid_search(
    plant: &dyn Plant,
    d: &DVector<f64>,
    bounds: &InputBox,
    cfg: &ControllerConfig,
) -> DVector<f64> {
    let objective =
        |u: &DVector<f64>| cost_f(cfg, u) + penalty_g(cfg, &plant.output(u, d).unwrap());
    let (mut lo, mut hi) = (
        [bounds.lower[1], bounds.lower[2]],
        [bounds.upper[1], bounds.upper[2]],
    );
    let mut best = bounds.lower.clone();
    for _ in 0..3 {
        let n = 100;
        let mut best_val = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let mut u = bounds.lower.clone();
                u[1] = lo[0] + (hi[0] - lo[0]) * i as f64 / n as f64;
                u[2] = lo[1] + (hi[1] - lo[1]) * j as f64 / n as f64;
                let v = objective(&u);
                if v < best_val {
                    best_val = v;
                    best = u;
                }
            }
        }
        for k in 0..2 {
            let w = (hi[k] - lo[k]) / 10.0;
            lo[k] = (best[k + 1] - w).max(bounds.lower[k + 1]);
            hi[k] = (best[k + 1] + w).min(bounds.upper[k + 1]);
        }
    }
    best
}

/// Two-bus instance whose voltage band is placed so the penalty binds.
pub fn two_bus_instance(
    rng: &mut ChaCha8Rng,
) -> (AcPlant, DVector<f64>, InputBox, ControllerConfig) {
    let plant = AcPlant::new(feeder("two_bus")).unwrap();
    let v0 = rng.random_range(0.98..1.02);
    let p_max = rng.random_range(0.5..3.0);
    let q_max = rng.random_range(0.2..1.5);
    let bounds = InputBox::new(
        DVector::from_vec(vec![v0, 0.0, -q_max]),
        DVector::from_vec(vec![v0, p_max, q_max]),
    )
    .unwrap();
    let d = DVector::from_vec(vec![
        -rng.random_range(0.0..1.0),
        -rng.random_range(0.0..0.5),
    ]);
    let u_ref = DVector::from_vec(vec![v0, rng.random_range(0.0..p_max), 0.0]);
    let mut cfg = config(0.1, u_ref.clone());
    let y_ref = plant.output(&u_ref, &d).unwrap()[0];
    // Put one limit just across y_ref so the optimum trades cost against penalty.
    if rng.random_bool(0.5) {
        cfg.v_max = y_ref - rng.random_range(0.001..0.01);
        cfg.v_min = cfg.v_max - 0.1;
    } else {
        cfg.v_min = y_ref + rng.random_range(0.001..0.01);
        cfg.v_max = cfg.v_min + 0.1;
    }
    cfg.rho = rng.random_range(100.0..3000.0);
    (plant, d, bounds, cfg)
}
