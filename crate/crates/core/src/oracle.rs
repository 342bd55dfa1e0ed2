//! Ground truth for evaluation: the penalized AC-OPF optimum `u*` and the
//! feedforward optimum of the linearized problem.

use nalgebra::{DMatrix, DVector};

use crate::controller::{
    composite_operator, grad_f, grad_g, project_box, ControllerConfig, InputBox,
};
use crate::error::{check_dim, OfoError, Result};
use crate::plant::{LinearModel, Plant};

pub const TOL_OPF: f64 = 1e-8;
pub const MAX_OPF_ITER: usize = 100_000;
/// Iteration cap of the accelerated solver for box-constrained affine-output problems.
pub const MAX_INNER_ITER: usize = 200_000;

/// How `solve_acopf` searches for the fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OracleMethod {
    /// Re-linearize the plant at the iterate and solve the linearized problem
    /// exactly; repeat until the iterate stops moving.
    #[default]
    Linearized,
    /// Plain projected-gradient iteration `u ← Π[u − α F(u)]`.
    ProjectedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Step size of the fixed-point certificate (and of the projected-gradient method).
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub method: OracleMethod,
}

impl OracleOptions {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            tol: TOL_OPF,
            max_iter: MAX_OPF_ITER,
            method: OracleMethod::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub u_star: DVector<f64>,
    pub y_star: DVector<f64>,
    pub iterations: usize,
    /// `‖u* − Π[u* − α F(u*)]‖∞`
    pub residual: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(OfoError::InvalidConfig(format!(
            "oracle step size must be positive, got {alpha}"
        )));
    }
    Ok(())
}

fn fixed_point<F>(
    start: DVector<f64>,
    bounds: &InputBox,
    opts: &OracleOptions,
    operator: F,
) -> Result<(DVector<f64>, usize, f64)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    check_alpha(opts.alpha)?;
    let mut u = project_box(&start, bounds);
    let mut residual = f64::INFINITY;
    for k in 0..opts.max_iter {
        let next = project_box(&(&u - operator(&u)? * opts.alpha), bounds);
        residual = (&next - &u).amax();
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            return Ok((u, k, residual));
        }
        u = next;
    }
    Err(OfoError::MaxIterations {
        iterations: opts.max_iter,
        residual,
    })
}

/// Minimize `f(u) + g(c + H u)` over the box with accelerated projected
/// gradient. The objective is 1-strongly convex and `(1 + ρ‖H‖²)`-smooth.
/// Stops once the gradient-mapping step falls below `tol`.
fn minimize_affine(
    sensitivity: &DMatrix<f64>,
    offset: &DVector<f64>,
    bounds: &InputBox,
    cfg: &ControllerConfig,
    start: &DVector<f64>,
    tol: f64,
) -> Result<(DVector<f64>, usize)> {
    let smooth = 1.0 + cfg.rho * sensitivity.norm_squared();
    let step = 1.0 / smooth;
    let root = smooth.sqrt();
    let momentum = (root - 1.0) / (root + 1.0);
    let gradient = |u: &DVector<f64>| {
        grad_f(cfg, u) + sensitivity.tr_mul(&grad_g(cfg, &(offset + sensitivity * u)))
    };

    let mut x = project_box(start, bounds);
    let mut z = x.clone();
    let mut change = f64::INFINITY;
    for k in 0..MAX_INNER_ITER {
        let next = project_box(&(&z - gradient(&z) * step), bounds);
        change = (&next - &z).amax();
        if !change.is_finite() {
            break;
        }
        if change <= tol {
            return Ok((next, k));
        }
        z = &next + (&next - &x) * momentum;
        x = next;
    }
    Err(OfoError::MaxIterations {
        iterations: MAX_INNER_ITER,
        residual: change,
    })
}

fn linearized<P>(
    start: DVector<f64>,
    bounds: &InputBox,
    cfg: &ControllerConfig,
    opts: &OracleOptions,
    probe: P,
) -> Result<(DVector<f64>, usize, f64)>
where
    P: Fn(&DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    check_alpha(opts.alpha)?;
    let mut u = project_box(&start, bounds);
    let mut change = f64::INFINITY;
    for k in 0..opts.max_iter {
        let (y, h) = probe(&u)?;
        let operator = grad_f(cfg, &u) + h.tr_mul(&grad_g(cfg, &y));
        let residual = (&u - project_box(&(&u - operator * opts.alpha), bounds)).amax();
        if change <= opts.tol && residual <= opts.tol {
            return Ok((u, k, residual));
        }
        let offset = &y - &h * &u;
        let (next, _) = minimize_affine(&h, &offset, bounds, cfg, &u, opts.tol * 1e-3)?;
        change = (&next - &u).amax();
        if !change.is_finite() {
            break;
        }
        u = next;
    }
    Err(OfoError::MaxIterations {
        iterations: opts.max_iter,
        residual: change,
    })
}

/// Minimize `f(u) + g(h(u, d))` over the box, with the sensitivity
/// re-evaluated on the plant at every iterate. The returned point satisfies
/// the projected-gradient fixed-point condition at `opts.alpha` to `opts.tol`.
pub fn solve_acopf(
    plant: &dyn Plant,
    d: &DVector<f64>,
    bounds: &InputBox,
    cfg: &ControllerConfig,
    opts: &OracleOptions,
    warm_start: Option<&DVector<f64>>,
) -> Result<OracleSolution> {
    check_dim("box", plant.n_u(), bounds.len())?;
    check_dim("u_ref", plant.n_u(), cfg.u_ref.len())?;
    let start = warm_start.cloned().unwrap_or_else(|| cfg.u_ref.clone());
    let (u_star, iterations, residual) = match opts.method {
        OracleMethod::ProjectedGradient => fixed_point(start, bounds, opts, |u| {
            composite_operator(plant, u, d, cfg)
        })?,
        OracleMethod::Linearized => linearized(start, bounds, cfg, opts, |u| {
            Ok((plant.output(u, d)?, plant.sensitivity(u, d)?))
        })?,
    };
    let y_star = plant.output(&u_star, d)?;
    Ok(OracleSolution {
        u_star,
        y_star,
        iterations,
        residual,
    })
}

/// Feedforward optimum of `f(u) + g(H0 u + D0 d + y0)`; never touches the plant.
pub fn solve_linear_opf(
    lin: &LinearModel,
    d: &DVector<f64>,
    bounds: &InputBox,
    cfg: &ControllerConfig,
    opts: &OracleOptions,
) -> Result<DVector<f64>> {
    check_dim("box", lin.h0.ncols(), bounds.len())?;
    check_dim("disturbance vector", lin.d0.ncols(), d.len())?;
    check_dim("u_ref", lin.h0.ncols(), cfg.u_ref.len())?;
    let offset = &lin.d0 * d + &lin.y0;
    let (u, _) = match opts.method {
        OracleMethod::ProjectedGradient => {
            let (u, k, _) = fixed_point(cfg.u_ref.clone(), bounds, opts, |u| {
                Ok(grad_f(cfg, u) + lin.h0.tr_mul(&grad_g(cfg, &(&offset + &lin.h0 * u))))
            })?;
            (u, k)
        }
        OracleMethod::Linearized => {
            minimize_affine(&lin.h0, &offset, bounds, cfg, &cfg.u_ref, opts.tol * 1e-3)?
        }
    };
    Ok(u)
}

/// `‖u − Π[u − α F(u)]‖∞` on the plant.
pub fn fixed_point_residual(
    plant: &dyn Plant,
    u: &DVector<f64>,
    d: &DVector<f64>,
    bounds: &InputBox,
    cfg: &ControllerConfig,
    alpha: f64,
) -> Result<f64> {
    let f = composite_operator(plant, u, d, cfg)?;
    Ok((u - project_box(&(u - f * alpha), bounds)).amax())
}
