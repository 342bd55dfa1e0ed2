//! Recursive (Kalman) estimation of the input-output sensitivity from
//! measured increments `(Δu, Δy)`.
//!
//! The sensitivity `H` (`n_y × n_u`) is tracked as `h = vec(H)`, stacked
//! column by column, under a random-walk model with covariance
//! `Σ_p = (σ_p1 + σ_p2‖Δu‖²) I` and measurements `Δy = (Δuᵀ ⊗ I) h + ω_m`
//! with `Σ_m = (σ_m1 + σ_m2‖Δu‖² + σ_m3‖Δu‖⁴) I`.
//!
//! Because every noise term is isotropic and the regressor is `Δuᵀ ⊗ I`, a
//! covariance of the form `A ⊗ I_{n_y}` stays in that form after each update.
//! [`Covariance::KroneckerIso`] exploits this and only stores the `n_u × n_u`
//! factor `A`; [`Covariance::Full`] keeps the dense matrix and serves as a
//! reference.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, OfoError, Result};

/// Default prior standard deviation of each sensitivity entry, p.u./p.u.
pub const DEFAULT_SIGMA0: f64 = 0.01;
/// Relative singular-value threshold for the persistency rank.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub sigma_p1: f64,
    pub sigma_p2: f64,
    pub sigma_m1: f64,
    pub sigma_m2: f64,
    pub sigma_m3: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_p1: 0.0,
            sigma_p2: 1e-4,
            sigma_m1: 0.0,
            sigma_m2: 0.0,
            sigma_m3: 1e-2,
        }
    }
}

impl NoiseModel {
    pub fn new(
        sigma_p1: f64,
        sigma_p2: f64,
        sigma_m1: f64,
        sigma_m2: f64,
        sigma_m3: f64,
    ) -> Result<Self> {
        let model = Self {
            sigma_p1,
            sigma_p2,
            sigma_m1,
            sigma_m2,
            sigma_m3,
        };
        model.validate()?;
        Ok(model)
    }

    /// Coefficients must be finite and non-negative, with at least one
    /// measurement coefficient positive. Zero process noise is accepted
    /// (a static-parameter estimator).
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_p1,
            self.sigma_p2,
            self.sigma_m1,
            self.sigma_m2,
            self.sigma_m3,
        ];
        if all.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(OfoError::InvalidNoise(
                "noise coefficients must be finite and non-negative".into(),
            ));
        }
        if self.sigma_m1 == 0.0 && self.sigma_m2 == 0.0 && self.sigma_m3 == 0.0 {
            return Err(OfoError::InvalidNoise(
                "at least one measurement-noise coefficient must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Scalar `σ` such that `Σ_p = σ I`.
    pub fn process_noise_cov(&self, du: &DVector<f64>) -> f64 {
        self.sigma_p1 + self.sigma_p2 * du.norm_squared()
    }

    /// Scalar `σ` such that `Σ_m = σ I`.
    pub fn measurement_noise_cov(&self, du: &DVector<f64>) -> f64 {
        let n2 = du.norm_squared();
        self.sigma_m1 + self.sigma_m2 * n2 + self.sigma_m3 * n2 * n2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceBackend {
    Full,
    #[default]
    Kronecker,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// Dense covariance of `vec(H)`, side `n_y·n_u`.
    Full(DMatrix<f64>),
    /// Factor `A` (side `n_u`) of `Σ = A ⊗ I_{n_y}`.
    KroneckerIso(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityEstimate {
    n_y: usize,
    n_u: usize,
    h_hat: DVector<f64>,
    covariance: Covariance,
    noise: NoiseModel,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

impl SensitivityEstimate {
    /// Prior `Ĥ = h0`, `Σ₀ = sigma0² I`.
    pub fn new(
        h0: &DMatrix<f64>,
        sigma0: f64,
        noise: NoiseModel,
        backend: CovarianceBackend,
    ) -> Result<Self> {
        noise.validate()?;
        check_finite("initial sensitivity", h0.as_slice())?;
        if !(sigma0.is_finite() && sigma0 >= 0.0) {
            return Err(OfoError::InvalidNoise(format!(
                "sigma0 must be non-negative, got {sigma0}"
            )));
        }
        let (n_y, n_u) = h0.shape();
        let var = sigma0 * sigma0;
        let covariance = match backend {
            CovarianceBackend::Full => {
                Covariance::Full(DMatrix::identity(n_y * n_u, n_y * n_u) * var)
            }
            CovarianceBackend::Kronecker => {
                Covariance::KroneckerIso(DMatrix::identity(n_u, n_u) * var)
            }
        };
        Ok(Self {
            n_y,
            n_u,
            h_hat: DVector::from_column_slice(h0.as_slice()),
            covariance,
            noise,
        })
    }

    /// Build from explicit parts; the covariance must be symmetric and match the dimensions.
    pub fn from_parts(
        n_y: usize,
        n_u: usize,
        h_hat: DVector<f64>,
        covariance: Covariance,
        noise: NoiseModel,
    ) -> Result<Self> {
        noise.validate()?;
        check_dim("h_hat length", n_y * n_u, h_hat.len())?;
        let side = match &covariance {
            Covariance::Full(m) => {
                check_dim("full covariance side", n_y * n_u, m.nrows())?;
                m
            }
            Covariance::KroneckerIso(a) => {
                check_dim("kronecker factor side", n_u, a.nrows())?;
                a
            }
        };
        check_dim("covariance columns", side.nrows(), side.ncols())?;
        if (side - side.transpose()).amax() > 1e-12 {
            return Err(OfoError::InvalidNoise("covariance is not symmetric".into()));
        }
        Ok(Self {
            n_y,
            n_u,
            h_hat,
            covariance,
            noise,
        })
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    /// Column-wise vectorization `vec(Ĥ)`.
    pub fn h_hat(&self) -> &DVector<f64> {
        &self.h_hat
    }

    /// `Ĥ` as an `n_y × n_u` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n_y, self.n_u, self.h_hat.as_slice())
    }

    /// The dense covariance of `vec(Ĥ)` regardless of backend.
    pub fn full_covariance(&self) -> DMatrix<f64> {
        match &self.covariance {
            Covariance::Full(m) => m.clone(),
            Covariance::KroneckerIso(a) => a.kronecker(&DMatrix::identity(self.n_y, self.n_y)),
        }
    }

    pub fn covariance_trace(&self) -> f64 {
        match &self.covariance {
            Covariance::Full(m) => m.trace(),
            Covariance::KroneckerIso(a) => a.trace() * self.n_y as f64,
        }
    }

    /// `Ĥ Δu`.
    pub fn predict_dy(&self, du: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("Δu", self.n_u, du.len())?;
        Ok(self.matrix() * du)
    }

    /// One Kalman step with the pair `(Δu, Δy)`.
    ///
    /// A zero `Δu` carries no information: the gain is zero and only the
    /// process noise is added.
    pub fn update(&mut self, du: &DVector<f64>, dy: &DVector<f64>) -> Result<()> {
        check_dim("Δu", self.n_u, du.len())?;
        check_dim("Δy", self.n_y, dy.len())?;
        check_finite("Δu", du.as_slice())?;
        check_finite("Δy", dy.as_slice())?;

        let sigma_p = self.noise.process_noise_cov(du);
        let sigma_m = self.noise.measurement_noise_cov(du);
        let informative = du.iter().any(|v| *v != 0.0);

        match &mut self.covariance {
            Covariance::KroneckerIso(a) => {
                if informative {
                    let a_du = &*a * du;
                    let denom = sigma_m + du.dot(&a_du);
                    if !(denom > 0.0) {
                        return Err(OfoError::SingularInnovation);
                    }
                    let h = DMatrix::from_column_slice(self.n_y, self.n_u, self.h_hat.as_slice());
                    let innovation = dy - &h * du;
                    // Ĥ ← Ĥ + r (AΔu)ᵀ / c
                    let updated = h + (&innovation * a_du.transpose()) / denom;
                    self.h_hat.copy_from_slice(updated.as_slice());
                    // A ← A − (AΔu)(AΔu)ᵀ / c
                    a.ger(-1.0 / denom, &a_du, &a_du, 1.0);
                }
                for i in 0..self.n_u {
                    a[(i, i)] += sigma_p;
                }
                symmetrize(a);
            }
            Covariance::Full(sigma) => {
                let n = self.n_y * self.n_u;
                if informative {
                    // U = Δuᵀ ⊗ I, n_y × n
                    let regressor = du
                        .transpose()
                        .kronecker(&DMatrix::<f64>::identity(self.n_y, self.n_y));
                    let sigma_ut = &*sigma * regressor.transpose();
                    let mut s = &regressor * &sigma_ut;
                    for i in 0..self.n_y {
                        s[(i, i)] += sigma_m;
                    }
                    symmetrize(&mut s);
                    let chol = s.cholesky().ok_or(OfoError::SingularInnovation)?;
                    // K = Σ Uᵀ S⁻¹, computed as (S⁻¹ U Σ)ᵀ
                    let gain = chol.solve(&sigma_ut.transpose()).transpose();
                    let innovation = dy - &regressor * &self.h_hat;
                    self.h_hat += &gain * innovation;
                    let ku = &gain * &regressor;
                    let next = (DMatrix::identity(n, n) - ku) * &*sigma;
                    *sigma = next;
                }
                for i in 0..n {
                    sigma[(i, i)] += sigma_p;
                }
                symmetrize(sigma);
            }
        }
        Ok(())
    }
}

/// Ring buffer of the most recent input increments, newest first.
#[derive(Debug, Clone)]
pub struct ExcitationWindow {
    capacity: usize,
    n_u: usize,
    steps: VecDeque<DVector<f64>>,
}

impl ExcitationWindow {
    pub fn new(n_u: usize, capacity: usize) -> Result<Self> {
        if capacity < n_u || n_u == 0 {
            return Err(OfoError::InvalidConfig(format!(
                "excitation window capacity {capacity} must be at least n_u = {n_u}"
            )));
        }
        Ok(Self {
            capacity,
            n_u,
            steps: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, du: DVector<f64>) -> Result<()> {
        check_dim("Δu", self.n_u, du.len())?;
        if self.steps.len() == self.capacity {
            self.steps.pop_back();
        }
        self.steps.push_front(du);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.steps.iter()
    }

    /// Stacked increments as columns, newest first.
    pub fn matrix(&self) -> DMatrix<f64> {
        let cols: Vec<_> = self.steps.iter().cloned().collect();
        if cols.is_empty() {
            DMatrix::zeros(self.n_u, 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PersistencyStatus {
    pub rank: usize,
    pub excited: bool,
}

/// Numerical rank of the stacked increments, counting singular values above
/// `RANK_TOL` times the largest one.
pub fn persistency_rank(window: &ExcitationWindow) -> PersistencyStatus {
    let m = window.matrix();
    if m.ncols() == 0 {
        return PersistencyStatus {
            rank: 0,
            excited: false,
        };
    }
    let singular = m.singular_values();
    let largest = singular.iter().copied().fold(0.0, f64::max);
    let rank = if largest > 0.0 {
        singular.iter().filter(|s| **s > RANK_TOL * largest).count()
    } else {
        0
    };
    PersistencyStatus {
        rank,
        excited: rank == window.n_u(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_noise(p: f64, m: f64) -> NoiseModel {
        NoiseModel::new(p, 0.0, m, 0.0, 0.0).unwrap()
    }

    #[test]
    fn noise_covariances() {
        let n = NoiseModel::new(0.0, 1e-4, 0.0, 0.0, 1.0).unwrap();
        let du = DVector::from_vec(vec![0.1, 0.0]);
        assert_relative_eq!(n.process_noise_cov(&du), 1e-6, epsilon = 1e-18);
        assert_relative_eq!(n.measurement_noise_cov(&du), 1e-4, epsilon = 1e-16);
        let zero = DVector::zeros(2);
        let n = NoiseModel::new(3e-3, 1.0, 1e-6, 1.0, 1.0).unwrap();
        assert_eq!(n.process_noise_cov(&zero), 3e-3);
        assert_eq!(n.measurement_noise_cov(&zero), 1e-6);
        let n = NoiseModel::new(1e-8, 0.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(
            n.process_noise_cov(&du),
            n.process_noise_cov(&(du.clone() * 10.0))
        );
        let n = NoiseModel::new(0.0, 0.0, 0.0, 2.0, 0.0).unwrap();
        let mut last = -1.0;
        for k in 0..10 {
            let s = n.measurement_noise_cov(&DVector::from_element(2, k as f64 * 0.1));
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn noise_validation() {
        assert!(NoiseModel::new(0.0, 1e-4, 0.0, 0.0, 0.0).is_err());
        assert!(NoiseModel::new(-1.0, 1e-4, 0.0, 0.0, 1.0).is_err());
        assert!(NoiseModel::new(f64::NAN, 1e-4, 0.0, 0.0, 1.0).is_err());
        assert!(NoiseModel::new(0.0, 0.0, 1.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn scalar_kalman_step() {
        for backend in [CovarianceBackend::Full, CovarianceBackend::Kronecker] {
            let mut est = SensitivityEstimate::new(
                &DMatrix::zeros(1, 1),
                1.0,
                scalar_noise(0.0, 1.0),
                backend,
            )
            .unwrap();
            est.update(
                &DVector::from_element(1, 1.0),
                &DVector::from_element(1, 2.0),
            )
            .unwrap();
            assert_relative_eq!(est.h_hat()[0], 1.0, epsilon = 1e-15);
            assert_relative_eq!(est.covariance_trace(), 0.5, epsilon = 1e-15);
            let dy = est.predict_dy(&DVector::from_element(1, 2.0)).unwrap();
            assert_relative_eq!(dy[0], 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_step_only_adds_process_noise() {
        let h0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        for backend in [CovarianceBackend::Full, CovarianceBackend::Kronecker] {
            let noise = NoiseModel::new(0.25, 1.0, 0.0, 0.0, 1.0).unwrap();
            let mut est = SensitivityEstimate::new(&h0, 1.0, noise, backend).unwrap();
            let before = est.covariance_trace();
            est.update(&DVector::zeros(2), &DVector::from_vec(vec![5.0, 5.0]))
                .unwrap();
            assert_eq!(est.matrix(), h0);
            assert_relative_eq!(est.covariance_trace(), before + 0.25 * 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn vectorization_is_column_major() {
        let h0 = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let est = SensitivityEstimate::new(
            &h0,
            0.1,
            NoiseModel::default(),
            CovarianceBackend::Kronecker,
        )
        .unwrap();
        assert_eq!(est.h_hat().as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(est.matrix(), h0);
    }

    #[test]
    fn dimension_errors() {
        let mut est = SensitivityEstimate::new(
            &DMatrix::zeros(2, 3),
            0.1,
            NoiseModel::default(),
            CovarianceBackend::Kronecker,
        )
        .unwrap();
        assert!(matches!(
            est.update(&DVector::zeros(2), &DVector::zeros(2)),
            Err(OfoError::DimensionMismatch { .. })
        ));
        assert!(est.predict_dy(&DVector::zeros(4)).is_err());
    }

    #[test]
    fn singular_innovation_detected() {
        // zero prior and pure ‖Δu‖⁴ noise is fine; a zero-covariance prior with
        // a Δu-free measurement noise that vanishes cannot happen by validation,
        // so build the degenerate case directly.
        let noise = NoiseModel::new(0.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        let mut est = SensitivityEstimate::new(
            &DMatrix::zeros(1, 1),
            0.0,
            noise,
            CovarianceBackend::Kronecker,
        )
        .unwrap();
        // ‖Δu‖⁴ underflows to zero
        let err = est.update(
            &DVector::from_element(1, 1e-90),
            &DVector::from_element(1, 0.0),
        );
        assert!(matches!(err, Err(OfoError::SingularInnovation)));
    }

    #[test]
    fn window_rank() {
        let mut w = ExcitationWindow::new(3, 3).unwrap();
        for i in 0..3 {
            let mut e = DVector::zeros(3);
            e[i] = 1.0;
            w.push(e).unwrap();
        }
        assert_eq!(
            persistency_rank(&w),
            PersistencyStatus {
                rank: 3,
                excited: true
            }
        );

        let mut w = ExcitationWindow::new(3, 5).unwrap();
        for _ in 0..5 {
            w.push(DVector::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        }
        assert_eq!(persistency_rank(&w).rank, 1);
        assert!(!persistency_rank(&w).excited);

        let mut w = ExcitationWindow::new(2, 2).unwrap();
        w.push(DVector::zeros(2)).unwrap();
        assert_eq!(persistency_rank(&w).rank, 0);
        assert!(ExcitationWindow::new(3, 2).is_err());
    }

    #[test]
    fn window_keeps_newest_first() {
        let mut w = ExcitationWindow::new(1, 2).unwrap();
        for v in [1.0, 2.0, 3.0] {
            w.push(DVector::from_element(1, v)).unwrap();
        }
        let got: Vec<f64> = w.iter().map(|d| d[0]).collect();
        assert_eq!(got, vec![3.0, 2.0]);
    }
}
