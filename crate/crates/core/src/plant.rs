//! The physical grid: admittance matrix, nonlinear power flow `y = h(u, d)`,
//! its finite-difference sensitivities and constant linearizations.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, check_finite, OfoError, Result};
use crate::feeder::{FeederModel, Line};

/// Convergence tolerance on the max voltage update, p.u.
pub const TOL_PF: f64 = 1e-9;
/// Iteration cap of the fixed-point power flow.
pub const MAX_PF_ITER: usize = 200;
/// Probe step of the central finite differences, p.u.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance used for the probe solves inside finite differences.
pub const FD_SOLVE_TOL: f64 = 1e-12;

/// Anything that maps inputs and disturbances to measured outputs.
///
/// The AC feeder is the usual implementation; [`LinearModel`] also implements
/// it so the closed loop can be exercised on an exactly linear plant.
pub trait Plant: Send + Sync {
    fn n_u(&self) -> usize;
    fn n_y(&self) -> usize;
    fn n_d(&self) -> usize;
    fn output(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>>;
    /// `∇_u h(u, d)`, `n_y × n_u`.
    fn sensitivity(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<DMatrix<f64>>;
    /// `∇_d h(u, d)`, `n_y × n_d`.
    fn disturbance_sensitivity(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tol: TOL_PF,
            max_iter: MAX_PF_ITER,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Complex voltages at every bus, in feeder bus order.
    pub voltages: DVector<Complex64>,
    pub iterations: usize,
}

/// Complex bus admittance matrix. Lines are series impedances without shunts.
pub fn build_admittance(feeder: &FeederModel) -> DMatrix<Complex64> {
    let n = feeder.n_buses();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for line in feeder.lines() {
        let a = feeder.bus_index(line.from).expect("validated feeder");
        let b = feeder.bus_index(line.to).expect("validated feeder");
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(line.r, line.x);
        y[(a, b)] -= ys;
        y[(b, a)] -= ys;
        y[(a, a)] += ys;
        y[(b, b)] += ys;
    }
    y
}

/// The nonlinear feeder plant with its factorized network.
#[derive(Debug, Clone)]
pub struct AcPlant {
    feeder: FeederModel,
    ybus: DMatrix<Complex64>,
    /// `Y_LL⁻¹`
    z_ll: DMatrix<Complex64>,
    /// `-Y_LL⁻¹ Y_L0`, the no-load voltage profile for unit slack voltage.
    w: DVector<Complex64>,
    options: PowerFlowOptions,
    fd_step: f64,
}

impl AcPlant {
    pub fn new(feeder: FeederModel) -> Result<Self> {
        Self::with_options(feeder, PowerFlowOptions::default())
    }

    pub fn with_options(feeder: FeederModel, options: PowerFlowOptions) -> Result<Self> {
        let ybus = build_admittance(&feeder);
        let others = feeder.non_slack();
        let slack = feeder.slack_index();
        let m = others.len();
        let y_ll = DMatrix::from_fn(m, m, |i, j| ybus[(others[i], others[j])]);
        let y_l0 = DVector::from_fn(m, |i, _| ybus[(others[i], slack)]);
        let z_ll = y_ll.try_inverse().ok_or_else(|| {
            OfoError::InvalidFeeder("reduced admittance matrix is singular".into())
        })?;
        let w = -(&z_ll * y_l0);
        Ok(Self {
            feeder,
            ybus,
            z_ll,
            w,
            options,
            fd_step: FD_STEP,
        })
    }

    pub fn feeder(&self) -> &FeederModel {
        &self.feeder
    }

    pub fn admittance(&self) -> &DMatrix<Complex64> {
        &self.ybus
    }

    pub fn options(&self) -> PowerFlowOptions {
        self.options
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    fn check_inputs(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<()> {
        check_dim("input vector", self.feeder.n_u(), u.len())?;
        check_dim("disturbance vector", self.feeder.n_d(), d.len())?;
        check_finite("input vector", u.as_slice())?;
        check_finite("disturbance vector", d.as_slice())?;
        if u[0] <= 0.0 {
            return Err(OfoError::InvalidConfig(format!(
                "slack voltage must be positive, got {}",
                u[0]
            )));
        }
        Ok(())
    }

    /// Net complex injection at each non-slack bus.
    pub fn injections(&self, u: &DVector<f64>, d: &DVector<f64>) -> DVector<Complex64> {
        let m = self.feeder.n_y();
        let n_der = self.feeder.n_der();
        let mut s = DVector::from_fn(m, |i, _| Complex64::new(d[i], d[m + i]));
        for (k, &pos) in self.feeder.der_positions().iter().enumerate() {
            s[pos] += Complex64::new(u[1 + k], u[1 + n_der + k]);
        }
        s
    }

    /// Z-bus fixed point `v_L ← Y_LL⁻¹ (conj(s_L / v_L) − Y_L0 v_0)`.
    fn iterate(
        &self,
        v0: f64,
        s: &DVector<Complex64>,
        start: Option<&DVector<Complex64>>,
        options: PowerFlowOptions,
    ) -> Result<(DVector<Complex64>, usize)> {
        let mut v = match start {
            Some(v) => v.clone(),
            None => self.w.scale(v0),
        };
        let mut rhs = DVector::from_element(s.len(), Complex64::new(0.0, 0.0));
        let mut last_change = f64::INFINITY;
        for it in 1..=options.max_iter {
            for i in 0..s.len() {
                rhs[i] = (s[i] / v[i]).conj();
            }
            let mut next = &self.z_ll * &rhs;
            next.axpy(Complex64::new(v0, 0.0), &self.w, Complex64::new(1.0, 0.0));
            last_change = next
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            v = next;
            if !last_change.is_finite() {
                break;
            }
            if last_change <= options.tol {
                return Ok((v, it));
            }
        }
        Err(OfoError::NonConvergence {
            iterations: options.max_iter,
            last_change,
        })
    }

    fn assemble(&self, v0: f64, v_l: &DVector<Complex64>) -> DVector<Complex64> {
        let mut v = DVector::from_element(self.feeder.n_buses(), Complex64::new(v0, 0.0));
        for (k, &i) in self.feeder.non_slack().iter().enumerate() {
            v[i] = v_l[k];
        }
        v
    }

    pub fn solve(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<PowerFlowSolution> {
        self.check_inputs(u, d)?;
        let s = self.injections(u, d);
        let (v_l, iterations) = self.iterate(u[0], &s, None, self.options)?;
        Ok(PowerFlowSolution {
            voltages: self.assemble(u[0], &v_l),
            iterations,
        })
    }

    /// Largest complex power mismatch `|s_i − v_i conj((Y v)_i)|` over the non-slack buses.
    pub fn residual(
        &self,
        u: &DVector<f64>,
        d: &DVector<f64>,
        voltages: &DVector<Complex64>,
    ) -> f64 {
        let s = self.injections(u, d);
        let current = &self.ybus * voltages;
        self.feeder
            .non_slack()
            .iter()
            .enumerate()
            .map(|(k, &i)| (s[k] - voltages[i] * current[i].conj()).norm())
            .fold(0.0, f64::max)
    }

    fn magnitudes(v_l: &DVector<Complex64>) -> DVector<f64> {
        v_l.map(|v| v.norm())
    }

    /// Central differences of the output along each coordinate of `x`, where
    /// `probe(x)` returns the voltage magnitudes.
    fn central_jacobian<F>(&self, x: &DVector<f64>, n_y: usize, probe: F) -> Result<DMatrix<f64>>
    where
        F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    {
        let step = self.fd_step;
        let mut jac = DMatrix::zeros(n_y, x.len());
        let mut xp = x.clone();
        for j in 0..x.len() {
            xp[j] = x[j] + step;
            let plus = probe(&xp)?;
            xp[j] = x[j] - step;
            let minus = probe(&xp)?;
            xp[j] = x[j];
            jac.set_column(j, &((plus - minus) / (2.0 * step)));
        }
        Ok(jac)
    }

    fn probe_solve(
        &self,
        u: &DVector<f64>,
        d: &DVector<f64>,
        start: &DVector<Complex64>,
    ) -> Result<DVector<f64>> {
        let s = self.injections(u, d);
        let options = PowerFlowOptions {
            tol: FD_SOLVE_TOL,
            max_iter: self.options.max_iter,
        };
        let (v_l, _) = self.iterate(u[0], &s, Some(start), options)?;
        Ok(Self::magnitudes(&v_l))
    }

    fn base_point(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<Complex64>> {
        self.check_inputs(u, d)?;
        let s = self.injections(u, d);
        let options = PowerFlowOptions {
            tol: FD_SOLVE_TOL,
            max_iter: self.options.max_iter,
        };
        Ok(self.iterate(u[0], &s, None, options)?.0)
    }
}

impl Plant for AcPlant {
    fn n_u(&self) -> usize {
        self.feeder.n_u()
    }

    fn n_y(&self) -> usize {
        self.feeder.n_y()
    }

    fn n_d(&self) -> usize {
        self.feeder.n_d()
    }

    fn output(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_inputs(u, d)?;
        let s = self.injections(u, d);
        let (v_l, _) = self.iterate(u[0], &s, None, self.options)?;
        Ok(Self::magnitudes(&v_l))
    }

    fn sensitivity(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<DMatrix<f64>> {
        let base = self.base_point(u, d)?;
        self.central_jacobian(u, self.n_y(), |up| self.probe_solve(up, d, &base))
    }

    fn disturbance_sensitivity(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<DMatrix<f64>> {
        let base = self.base_point(u, d)?;
        self.central_jacobian(d, self.n_y(), |dp| self.probe_solve(u, dp, &base))
    }
}

/// Constant affine model `y = H0 u + D0 d + y0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub h0: DMatrix<f64>,
    pub d0: DMatrix<f64>,
    pub y0: DVector<f64>,
}

impl LinearModel {
    pub fn new(h0: DMatrix<f64>, d0: DMatrix<f64>, y0: DVector<f64>) -> Result<Self> {
        check_dim("D0 rows", h0.nrows(), d0.nrows())?;
        check_dim("y0 length", h0.nrows(), y0.len())?;
        check_finite("H0", h0.as_slice())?;
        check_finite("D0", d0.as_slice())?;
        check_finite("y0", y0.as_slice())?;
        Ok(Self { h0, d0, y0 })
    }

    pub fn predict(&self, u: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        &self.h0 * u + &self.d0 * d + &self.y0
    }
}

impl Plant for LinearModel {
    fn n_u(&self) -> usize {
        self.h0.ncols()
    }

    fn n_y(&self) -> usize {
        self.h0.nrows()
    }

    fn n_d(&self) -> usize {
        self.d0.ncols()
    }

    fn output(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("input vector", self.n_u(), u.len())?;
        check_dim("disturbance vector", self.n_d(), d.len())?;
        Ok(self.predict(u, d))
    }

    fn sensitivity(&self, u: &DVector<f64>, _d: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("input vector", self.n_u(), u.len())?;
        Ok(self.h0.clone())
    }

    fn disturbance_sensitivity(&self, _u: &DVector<f64>, d: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("disturbance vector", self.n_d(), d.len())?;
        Ok(self.d0.clone())
    }
}

/// Linearize any plant at an operating point; `y0` anchors the model so that
/// `predict(u_op, d_op) == h(u_op, d_op)`.
pub fn linearize(
    plant: &dyn Plant,
    u_op: &DVector<f64>,
    d_op: &DVector<f64>,
) -> Result<LinearModel> {
    let h0 = plant.sensitivity(u_op, d_op)?;
    let d0 = plant.disturbance_sensitivity(u_op, d_op)?;
    let y = plant.output(u_op, d_op)?;
    let y0 = y - &h0 * u_op - &d0 * d_op;
    LinearModel::new(h0, d0, y0)
}

pub fn solve_power_flow(
    feeder: &FeederModel,
    u: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<DVector<f64>> {
    AcPlant::new(feeder.clone())?.output(u, d)
}

pub fn true_sensitivity(
    feeder: &FeederModel,
    u: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    AcPlant::new(feeder.clone())?.sensitivity(u, d)
}

pub fn linearize_at(
    feeder: &FeederModel,
    u_op: &DVector<f64>,
    d_op: &DVector<f64>,
) -> Result<LinearModel> {
    linearize(&AcPlant::new(feeder.clone())?, u_op, d_op)
}

/// Zero-injection operating point: nominal slack voltage, no DER output, no load.
pub fn zero_injection_point(
    feeder: &FeederModel,
    slack_voltage: f64,
) -> (DVector<f64>, DVector<f64>) {
    let mut u = DVector::zeros(feeder.n_u());
    u[0] = slack_voltage;
    (u, DVector::zeros(feeder.n_d()))
}

/// Scale `(r, x)` of each selected line (indices into `feeder.lines()`) by an
/// independent factor drawn uniformly from `[1 - max_fraction, 1 + max_fraction]`.
pub fn perturb_admittance(
    feeder: &FeederModel,
    line_ids: &[usize],
    max_fraction: f64,
    seed: u64,
) -> Result<FeederModel> {
    if !(0.0..1.0).contains(&max_fraction) {
        return Err(OfoError::InvalidConfig(format!(
            "max_fraction must lie in [0, 1), got {max_fraction}"
        )));
    }
    let mut lines: Vec<Line> = feeder.lines().to_vec();
    if let Some(&bad) = line_ids.iter().find(|&&i| i >= lines.len()) {
        return Err(OfoError::UnknownLine(bad));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &i in line_ids {
        let factor = if max_fraction == 0.0 {
            1.0
        } else {
            rng.random_range(1.0 - max_fraction..=1.0 + max_fraction)
        };
        lines[i].r *= factor;
        lines[i].x *= factor;
    }
    Ok(feeder.with_lines(lines))
}
