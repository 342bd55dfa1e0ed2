//! Projected-gradient feedback step with box projection, quadratic tracking
//! cost, quadratic-hinge voltage penalty and excitation noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{check_dim, check_finite, OfoError, Result};
use crate::plant::Plant;

/// Default truncation of the excitation noise, in multiples of `sigma_u`.
pub const DEFAULT_EXCITATION_BOUND: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub alpha: f64,
    pub u_ref: DVector<f64>,
    pub rho: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub sigma_u: f64,
    pub excitation_bound: f64,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OfoError::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be non-negative, got {}", self.rho));
        }
        if !(self.v_min < self.v_max) {
            return bad(format!(
                "v_min {} must be below v_max {}",
                self.v_min, self.v_max
            ));
        }
        if !(self.sigma_u >= 0.0 && self.sigma_u.is_finite()) {
            return bad(format!(
                "sigma_u must be non-negative, got {}",
                self.sigma_u
            ));
        }
        if !(self.excitation_bound > 0.0) {
            return bad(format!(
                "excitation_bound must be positive, got {}",
                self.excitation_bound
            ));
        }
        check_finite("u_ref", self.u_ref.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl InputBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim("box upper bound", lower.len(), upper.len())?;
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(OfoError::InvalidConfig(format!(
                "box lower bound exceeds upper bound at entry {i} ({} > {})",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.len() == self.len()
            && (0..u.len()).all(|i| self.lower[i] <= u[i] && u[i] <= self.upper[i])
    }

    /// Largest edge length.
    pub fn diameter(&self) -> f64 {
        (&self.upper - &self.lower).amax()
    }
}

/// `∇f(u) = u − u_ref` for `f(u) = ½‖u − u_ref‖²`.
pub fn grad_f(cfg: &ControllerConfig, u: &DVector<f64>) -> DVector<f64> {
    u - &cfg.u_ref
}

pub fn cost_f(cfg: &ControllerConfig, u: &DVector<f64>) -> f64 {
    0.5 * (u - &cfg.u_ref).norm_squared()
}

/// Gradient of `g(y) = ρ/2 Σ (max(y − v_max, 0)² + max(v_min − y, 0)²)`.
pub fn grad_g(cfg: &ControllerConfig, y: &DVector<f64>) -> DVector<f64> {
    y.map(|v| cfg.rho * ((v - cfg.v_max).max(0.0) - (cfg.v_min - v).max(0.0)))
}

pub fn penalty_g(cfg: &ControllerConfig, y: &DVector<f64>) -> f64 {
    0.5 * cfg.rho
        * y.iter()
            .map(|&v| (v - cfg.v_max).max(0.0).powi(2) + (cfg.v_min - v).max(0.0).powi(2))
            .sum::<f64>()
}

pub fn project_box(u: &DVector<f64>, bounds: &InputBox) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| u[i].clamp(bounds.lower[i], bounds.upper[i]))
}

/// I.i.d. zero-mean Gaussian entries with std `sigma_u`, resampled until they
/// fall within `±excitation_bound·sigma_u`.
pub fn excitation_sample<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &ControllerConfig,
    n: usize,
) -> DVector<f64> {
    if cfg.sigma_u == 0.0 {
        return DVector::zeros(n);
    }
    DVector::from_fn(n, |_, _| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= cfg.excitation_bound {
            break z * cfg.sigma_u;
        }
    })
}

/// `u⁺ = Π_box[u − α(∇f(u) + Hᵀ∇g(y)) + ω_u]`.
pub fn ofo_step(
    u: &DVector<f64>,
    y: &DVector<f64>,
    sensitivity: &DMatrix<f64>,
    bounds: &InputBox,
    cfg: &ControllerConfig,
    omega_u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n_u = u.len();
    check_dim("u_ref", n_u, cfg.u_ref.len())?;
    check_dim("sensitivity columns", n_u, sensitivity.ncols())?;
    check_dim("sensitivity rows", y.len(), sensitivity.nrows())?;
    check_dim("box", n_u, bounds.len())?;
    check_dim("excitation", n_u, omega_u.len())?;
    check_finite("u", u.as_slice())?;
    check_finite("y", y.as_slice())?;
    check_finite("sensitivity", sensitivity.as_slice())?;
    check_finite("excitation", omega_u.as_slice())?;
    let gradient = grad_f(cfg, u) + sensitivity.tr_mul(&grad_g(cfg, y));
    Ok(project_box(&(u - gradient * cfg.alpha + omega_u), bounds))
}

/// `F(u) = ∇f(u) + H(u)ᵀ ∇g(h(u, d))` evaluated on a plant.
pub fn composite_operator(
    plant: &dyn Plant,
    u: &DVector<f64>,
    d: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<DVector<f64>> {
    let y = plant.output(u, d)?;
    let h = plant.sensitivity(u, d)?;
    Ok(grad_f(cfg, u) + h.tr_mul(&grad_g(cfg, &y)))
}

/// Sampled strong-monotonicity and Lipschitz constants of an operator on a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityEstimate {
    pub eta_hat: f64,
    pub l_hat: f64,
    /// `2 η / L²`
    pub alpha_max: f64,
    /// `√(1 − 2ηα + L²α²)` for the configured `α`.
    pub epsilon: f64,
}

impl MonotonicityEstimate {
    pub fn from_constants(eta_hat: f64, l_hat: f64, alpha: f64) -> Self {
        let alpha_max = 2.0 * eta_hat / (l_hat * l_hat);
        let epsilon = (1.0 - 2.0 * eta_hat * alpha + l_hat * l_hat * alpha * alpha)
            .max(0.0)
            .sqrt();
        Self {
            eta_hat,
            l_hat,
            alpha_max,
            epsilon,
        }
    }

    /// Contraction factor for another step size.
    pub fn epsilon_at(&self, alpha: f64) -> f64 {
        (1.0 - 2.0 * self.eta_hat * alpha + self.l_hat * self.l_hat * alpha * alpha)
            .max(0.0)
            .sqrt()
    }
}

/// Sample `n_samples` random pairs in the box and take the worst-case
/// monotonicity ratio and the largest Lipschitz ratio of `operator`.
pub fn estimate_monotone_lipschitz<F>(
    operator: F,
    bounds: &InputBox,
    cfg: &ControllerConfig,
    n_samples: usize,
    seed: u64,
) -> Result<MonotonicityEstimate>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if n_samples == 0 {
        return Err(OfoError::InvalidConfig("n_samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = bounds.len();
    let draw = |rng: &mut ChaCha8Rng| {
        DVector::from_fn(n, |i, _| {
            let (lo, hi) = (bounds.lower[i], bounds.upper[i]);
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        })
    };
    let mut eta = f64::INFINITY;
    let mut lip: f64 = 0.0;
    let mut used = 0;
    for _ in 0..n_samples {
        let u1 = draw(&mut rng);
        let u2 = draw(&mut rng);
        let du = &u1 - &u2;
        let dist2 = du.norm_squared();
        if dist2 == 0.0 {
            continue;
        }
        let df = operator(&u1)? - operator(&u2)?;
        eta = eta.min(du.dot(&df) / dist2);
        lip = lip.max(df.norm() / dist2.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(OfoError::InvalidConfig(
            "box is a single point; nothing to sample".into(),
        ));
    }
    if eta <= 0.0 {
        return Err(OfoError::NotMonotoneInRegion(eta));
    }
    Ok(MonotonicityEstimate::from_constants(eta, lip, cfg.alpha))
}
