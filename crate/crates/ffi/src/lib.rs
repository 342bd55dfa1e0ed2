//! C ABI over `ofo-core`.
//!
//! Conventions:
//! - every fallible function returns an [`OfoStatus`]; `OFO_STATUS_OK` is 0;
//! - objects are opaque handles created by `*_new`/`*_load` and released by
//!   the matching `*_free` (which accepts NULL);
//! - vectors are `(pointer, length)` pairs and lengths are checked against
//!   the handle's dimensions;
//! - matrices are dense row-major `n_rows × n_cols` arrays;
//! - the message of the last failure on the calling thread is available
//!   through [`ofo_last_error_message`].
//!
//! Input layout is `[slack |v|, DER p…, DER q…]`; disturbances are net bus
//! injections (loads negative) at the non-slack buses; outputs are `|v|` at
//! the non-slack buses.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ofo_core::controller::{ofo_step, ControllerConfig, InputBox, DEFAULT_EXCITATION_BOUND};
use ofo_core::estimator::{CovarianceBackend, NoiseModel, SensitivityEstimate};
use ofo_core::feeder::FeederModel;
use ofo_core::plant::{AcPlant, Plant};
use ofo_core::scenario::load_scenario;
use ofo_core::sim::{prepare, RunOptions, VariantSpec, VariantSummary};
use ofo_core::OfoError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfoStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument, dimension mismatch or invalid model/scenario.
    InvalidArgument = 2,
    NonConvergence = 3,
    NotMonotone = 4,
    /// NaN/inf encountered or a singular update.
    Numerical = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfoBackend {
    Kronecker = 0,
    Full = 1,
}

/// Opaque feeder with its power-flow solver.
pub struct OfoPlant {
    plant: AcPlant,
}

/// Opaque online sensitivity estimator.
pub struct OfoEstimator {
    inner: SensitivityEstimate,
}

/// Noise coefficients of the estimator's random-walk model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OfoNoise {
    pub sigma_p1: f64,
    pub sigma_p2: f64,
    pub sigma_m1: f64,
    pub sigma_m2: f64,
    pub sigma_m3: f64,
}

/// Controller parameters for [`ofo_controller_step`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OfoControllerParams {
    pub alpha: f64,
    pub rho: f64,
    pub v_min: f64,
    pub v_max: f64,
}

/// Per-variant result of [`ofo_run_scenario`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct OfoRunSummary {
    pub steps: usize,
    pub alpha: f64,
    pub mean_tracking_error: f64,
    pub final_third_tracking_error: f64,
    pub final_third_rel_error: f64,
    pub total_violations: usize,
    pub diverged: bool,
    pub nonconverged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &OfoError) -> OfoStatus {
    match e {
        OfoError::NonConvergence { .. } | OfoError::MaxIterations { .. } => {
            OfoStatus::NonConvergence
        }
        OfoError::NotMonotoneInRegion(_) => OfoStatus::NotMonotone,
        OfoError::NonFinite(_) | OfoError::SingularInnovation => OfoStatus::Numerical,
        OfoError::Io { .. } => OfoStatus::Io,
        _ => OfoStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Core(OfoError),
}

impl From<OfoError> for Failure {
    fn from(e: OfoError) -> Self {
        Failure::Core(e)
    }
}

type FfiResult = Result<(), Failure>;

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> FfiResult) -> OfoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OfoStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            OfoStatus::NullPointer
        }
        Ok(Err(Failure::Arg(m))) => {
            set_error(m);
            OfoStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            OfoStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(
    ptr: *mut f64,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn vector(
    ptr: *const f64,
    len: usize,
    expected: usize,
    what: &'static str,
) -> Result<DVector<f64>, Failure> {
    if len != expected {
        return Err(Failure::Arg(format!(
            "{what}: expected length {expected}, got {len}"
        )));
    }
    Ok(DVector::from_column_slice(slice(ptr, len, what)?))
}

unsafe fn text<'a>(ptr: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or(Failure::Null(what))
}

fn write_row_major(m: &DMatrix<f64>, dst: &mut [f64]) {
    for (i, row) in m.row_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            dst[i * m.ncols() + j] = *v;
        }
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length, 0 if none.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ofo_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a feeder JSON file and builds its power-flow solver.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ofo_plant_load(
    path: *const c_char,
    out_plant: *mut *mut OfoPlant,
) -> OfoStatus {
    guard(|| {
        let out_plant = out(out_plant, "out_plant")?;
        let feeder = FeederModel::load(Path::new(text(path, "path")?))?;
        *out_plant = Box::into_raw(Box::new(OfoPlant {
            plant: AcPlant::new(feeder)?,
        }));
        Ok(())
    })
}

/// Like [`ofo_plant_load`] but from an in-memory JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ofo_plant_from_json(
    json: *const c_char,
    out_plant: *mut *mut OfoPlant,
) -> OfoStatus {
    guard(|| {
        let out_plant = out(out_plant, "out_plant")?;
        let feeder = FeederModel::from_json_str(text(json, "json")?)?;
        *out_plant = Box::into_raw(Box::new(OfoPlant {
            plant: AcPlant::new(feeder)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `plant` must be NULL or a handle from `ofo_plant_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ofo_plant_free(plant: *mut OfoPlant) {
    if !plant.is_null() {
        drop(Box::from_raw(plant));
    }
}

/// Input, output and disturbance dimensions. Any out pointer may be NULL.
///
/// # Safety
/// `plant` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ofo_plant_dims(
    plant: *const OfoPlant,
    n_u: *mut usize,
    n_y: *mut usize,
    n_d: *mut usize,
) -> OfoStatus {
    guard(|| {
        let feeder = plant.as_ref().ok_or(Failure::Null("plant"))?.plant.feeder();
        for (ptr, v) in [
            (n_u, feeder.n_u()),
            (n_y, feeder.n_y()),
            (n_d, feeder.n_d()),
        ] {
            if let Some(p) = ptr.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Solves the power flow and writes the voltage magnitudes to `y`.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ofo_power_flow(
    plant: *const OfoPlant,
    u: *const f64,
    n_u: usize,
    d: *const f64,
    n_d: usize,
    y: *mut f64,
    n_y: usize,
) -> OfoStatus {
    guard(|| {
        let p = &plant.as_ref().ok_or(Failure::Null("plant"))?.plant;
        let f = p.feeder();
        let u = vector(u, n_u, f.n_u(), "u")?;
        let d = vector(d, n_d, f.n_d(), "d")?;
        if n_y != f.n_y() {
            return Err(Failure::Arg(format!(
                "y: expected length {}, got {n_y}",
                f.n_y()
            )));
        }
        let out = p.output(&u, &d)?;
        slice_mut(y, n_y, "y")?.copy_from_slice(out.as_slice());
        Ok(())
    })
}

/// Finite-difference sensitivity `∂y/∂u`, row-major `n_y × n_u`, into `h`
/// (length `n_y·n_u`).
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ofo_sensitivity(
    plant: *const OfoPlant,
    u: *const f64,
    n_u: usize,
    d: *const f64,
    n_d: usize,
    h: *mut f64,
    h_len: usize,
) -> OfoStatus {
    guard(|| {
        let p = &plant.as_ref().ok_or(Failure::Null("plant"))?.plant;
        let f = p.feeder();
        let u = vector(u, n_u, f.n_u(), "u")?;
        let d = vector(d, n_d, f.n_d(), "d")?;
        if h_len != f.n_u() * f.n_y() {
            return Err(Failure::Arg(format!(
                "h: expected length {}, got {h_len}",
                f.n_u() * f.n_y()
            )));
        }
        let m = p.sensitivity(&u, &d)?;
        write_row_major(&m, slice_mut(h, h_len, "h")?);
        Ok(())
    })
}

/// Creates an estimator with prior mean `h0` (row-major `n_y × n_u`) and
/// prior covariance `sigma0²·I`.
///
/// # Safety
/// `h0` must reference `n_y·n_u` values; `noise` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ofo_estimator_new(
    h0: *const f64,
    n_y: usize,
    n_u: usize,
    sigma0: f64,
    noise: *const OfoNoise,
    backend: OfoBackend,
    out_estimator: *mut *mut OfoEstimator,
) -> OfoStatus {
    guard(|| {
        let out_estimator = out(out_estimator, "out_estimator")?;
        let n = noise.as_ref().ok_or(Failure::Null("noise"))?;
        let noise = NoiseModel::new(n.sigma_p1, n.sigma_p2, n.sigma_m1, n.sigma_m2, n.sigma_m3)?;
        let h0 = DMatrix::from_row_slice(n_y, n_u, slice(h0, n_y * n_u, "h0")?);
        let backend = match backend {
            OfoBackend::Kronecker => CovarianceBackend::Kronecker,
            OfoBackend::Full => CovarianceBackend::Full,
        };
        let inner = SensitivityEstimate::new(&h0, sigma0, noise, backend)?;
        *out_estimator = Box::into_raw(Box::new(OfoEstimator { inner }));
        Ok(())
    })
}

/// # Safety
/// `estimator` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ofo_estimator_free(estimator: *mut OfoEstimator) {
    if !estimator.is_null() {
        drop(Box::from_raw(estimator));
    }
}

/// One Kalman update with the increment pair `(du, dy)`.
///
/// # Safety
/// `du`/`dy` must reference `n_u`/`n_y` values.
#[no_mangle]
pub unsafe extern "C" fn ofo_estimator_update(
    estimator: *mut OfoEstimator,
    du: *const f64,
    n_u: usize,
    dy: *const f64,
    n_y: usize,
) -> OfoStatus {
    guard(|| {
        let est = &mut estimator.as_mut().ok_or(Failure::Null("estimator"))?.inner;
        let du = vector(du, n_u, est.n_u(), "du")?;
        let dy = vector(dy, n_y, est.n_y(), "dy")?;
        est.update(&du, &dy)?;
        Ok(())
    })
}

/// Current estimate, row-major `n_y × n_u`.
///
/// # Safety
/// `h` must reference `h_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ofo_estimator_matrix(
    estimator: *const OfoEstimator,
    h: *mut f64,
    h_len: usize,
) -> OfoStatus {
    guard(|| {
        let est = &estimator.as_ref().ok_or(Failure::Null("estimator"))?.inner;
        if h_len != est.n_y() * est.n_u() {
            return Err(Failure::Arg(format!(
                "h: expected length {}, got {h_len}",
                est.n_y() * est.n_u()
            )));
        }
        write_row_major(&est.matrix(), slice_mut(h, h_len, "h")?);
        Ok(())
    })
}

/// `trace(Σ)` of the estimator covariance, NaN for a NULL handle.
///
/// # Safety
/// `estimator` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ofo_estimator_covariance_trace(estimator: *const OfoEstimator) -> f64 {
    estimator
        .as_ref()
        .map_or(f64::NAN, |e| e.inner.covariance_trace())
}

/// One projected feedback step
/// `u⁺ = Π[u − α((u − u_ref) + Hᵀ∇g(y)) + ω]` into `u_next`, with
/// `g(y) = ρ/2·‖(y − v_max)₊‖² + ρ/2·‖(v_min − y)₊‖²`.
/// `sensitivity` is row-major `n_y × n_u`; `omega` may be NULL for no
/// excitation.
///
/// # Safety
/// Array pointers must reference the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ofo_controller_step(
    params: *const OfoControllerParams,
    u: *const f64,
    u_ref: *const f64,
    lower: *const f64,
    upper: *const f64,
    omega: *const f64,
    n_u: usize,
    y: *const f64,
    n_y: usize,
    sensitivity: *const f64,
    u_next: *mut f64,
) -> OfoStatus {
    guard(|| {
        let p = params.as_ref().ok_or(Failure::Null("params"))?;
        let cfg = ControllerConfig {
            alpha: p.alpha,
            u_ref: DVector::from_column_slice(slice(u_ref, n_u, "u_ref")?),
            rho: p.rho,
            v_min: p.v_min,
            v_max: p.v_max,
            sigma_u: 0.0,
            excitation_bound: DEFAULT_EXCITATION_BOUND,
        };
        cfg.validate()?;
        let bounds = InputBox::new(
            DVector::from_column_slice(slice(lower, n_u, "lower")?),
            DVector::from_column_slice(slice(upper, n_u, "upper")?),
        )?;
        let omega = if omega.is_null() {
            DVector::zeros(n_u)
        } else {
            DVector::from_column_slice(slice(omega, n_u, "omega")?)
        };
        let h = DMatrix::from_row_slice(n_y, n_u, slice(sensitivity, n_y * n_u, "sensitivity")?);
        let next = ofo_step(
            &DVector::from_column_slice(slice(u, n_u, "u")?),
            &DVector::from_column_slice(slice(y, n_y, "y")?),
            &h,
            &bounds,
            &cfg,
            &omega,
        )?;
        slice_mut(u_next, n_u, "u_next")?.copy_from_slice(next.as_slice());
        Ok(())
    })
}

/// Runs a scenario file's closed loop and fills `summary`. `variant` may be
/// NULL to use the scenario's own, or a name such as `"constant_h0@0.1"`.
/// Divergence and power-flow failure are reported in the summary, not as
/// errors.
///
/// # Safety
/// `path` (and `variant` if given) must be NUL-terminated; `summary` writable.
#[no_mangle]
pub unsafe extern "C" fn ofo_run_scenario(
    path: *const c_char,
    variant: *const c_char,
    no_oracle: bool,
    summary: *mut OfoRunSummary,
) -> OfoStatus {
    guard(|| {
        let summary = out(summary, "summary")?;
        let scenario = load_scenario(text(path, "path")?)?;
        let spec = if variant.is_null() {
            VariantSpec::new(scenario.variant)
        } else {
            VariantSpec::parse(text(variant, "variant")?)?
        };
        let options = RunOptions {
            no_oracle,
            ..RunOptions::default()
        };
        let trace = prepare(&scenario, &options)?.simulate(&spec)?;
        let s = VariantSummary::from_trace(&trace, scenario.horizon);
        *summary = OfoRunSummary {
            steps: trace.steps.len(),
            alpha: s.alpha,
            mean_tracking_error: s.mean_tracking_error,
            final_third_tracking_error: s.final_third_tracking_error,
            final_third_rel_error: s.final_third_rel_error,
            total_violations: s.total_violations,
            diverged: s.diverged,
            nonconverged: s.nonconverged,
        };
        Ok(())
    })
}
