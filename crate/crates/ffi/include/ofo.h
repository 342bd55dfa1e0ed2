#ifndef OFO_H
#define OFO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OfoStatus {
  OFO_STATUS_OK = 0,
  OFO_STATUS_NULL_POINTER = 1,
  // Bad argument, dimension mismatch or invalid model/scenario.
  OFO_STATUS_INVALID_ARGUMENT = 2,
  OFO_STATUS_NON_CONVERGENCE = 3,
  OFO_STATUS_NOT_MONOTONE = 4,
  // NaN/inf encountered or a singular update.
  OFO_STATUS_NUMERICAL = 5,
  OFO_STATUS_IO = 6,
  OFO_STATUS_PANIC = 7,
} OfoStatus;

typedef enum OfoBackend {
  OFO_BACKEND_KRONECKER = 0,
  OFO_BACKEND_FULL = 1,
} OfoBackend;

// Opaque online sensitivity estimator.
typedef struct OfoEstimator OfoEstimator;

// Opaque feeder with its power-flow solver.
typedef struct OfoPlant OfoPlant;

// Noise coefficients of the estimator's random-walk model.
typedef struct OfoNoise {
  double sigma_p1;
  double sigma_p2;
  double sigma_m1;
  double sigma_m2;
  double sigma_m3;
} OfoNoise;

// Controller parameters for [`ofo_controller_step`].
typedef struct OfoControllerParams {
  double alpha;
  double rho;
  double v_min;
  double v_max;
} OfoControllerParams;

// Per-variant result of [`ofo_run_scenario`].
typedef struct OfoRunSummary {
  size_t steps;
  double alpha;
  double mean_tracking_error;
  double final_third_tracking_error;
  double final_third_rel_error;
  size_t total_violations;
  bool diverged;
  bool nonconverged;
} OfoRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length, 0 if none.
//
// # Safety
// `buf` must be NULL or point to `len` writable bytes.
size_t ofo_last_error_message(char *buf, size_t len);

// Loads a feeder JSON file and builds its power-flow solver.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum OfoStatus ofo_plant_load(const char *path, struct OfoPlant **out_plant);

// Like [`ofo_plant_load`] but from an in-memory JSON document.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum OfoStatus ofo_plant_from_json(const char *json, struct OfoPlant **out_plant);

// # Safety
// `plant` must be NULL or a handle from `ofo_plant_*` not yet freed.
void ofo_plant_free(struct OfoPlant *plant);

// Input, output and disturbance dimensions. Any out pointer may be NULL.
//
// # Safety
// `plant` must be a live handle.
enum OfoStatus ofo_plant_dims(const struct OfoPlant *plant, size_t *n_u, size_t *n_y, size_t *n_d);

// Solves the power flow and writes the voltage magnitudes to `y`.
//
// # Safety
// Pointers must reference arrays of the stated lengths.
enum OfoStatus ofo_power_flow(const struct OfoPlant *plant,
                              const double *u,
                              size_t n_u,
                              const double *d,
                              size_t n_d,
                              double *y,
                              size_t n_y);

// Finite-difference sensitivity `∂y/∂u`, row-major `n_y × n_u`, into `h`
// (length `n_y·n_u`).
//
// # Safety
// Pointers must reference arrays of the stated lengths.
enum OfoStatus ofo_sensitivity(const struct OfoPlant *plant,
                               const double *u,
                               size_t n_u,
                               const double *d,
                               size_t n_d,
                               double *h,
                               size_t h_len);

// Creates an estimator with prior mean `h0` (row-major `n_y × n_u`) and
// prior covariance `sigma0²·I`.
//
// # Safety
// `h0` must reference `n_y·n_u` values; `noise` and `out` must be valid.
enum OfoStatus ofo_estimator_new(const double *h0,
                                 size_t n_y,
                                 size_t n_u,
                                 double sigma0,
                                 const struct OfoNoise *noise,
                                 enum OfoBackend backend,
                                 struct OfoEstimator **out_estimator);

// # Safety
// `estimator` must be NULL or a live handle.
void ofo_estimator_free(struct OfoEstimator *estimator);

// One Kalman update with the increment pair `(du, dy)`.
//
// # Safety
// `du`/`dy` must reference `n_u`/`n_y` values.
enum OfoStatus ofo_estimator_update(struct OfoEstimator *estimator,
                                    const double *du,
                                    size_t n_u,
                                    const double *dy,
                                    size_t n_y);

// Current estimate, row-major `n_y × n_u`.
//
// # Safety
// `h` must reference `h_len` writable values.
enum OfoStatus ofo_estimator_matrix(const struct OfoEstimator *estimator, double *h, size_t h_len);

// `trace(Σ)` of the estimator covariance, NaN for a NULL handle.
//
// # Safety
// `estimator` must be NULL or a live handle.
double ofo_estimator_covariance_trace(const struct OfoEstimator *estimator);

// One projected feedback step
// `u⁺ = Π[u − α((u − u_ref) + Hᵀ∇g(y)) + ω]` into `u_next`, with
// `g(y) = ρ/2·‖(y − v_max)₊‖² + ρ/2·‖(v_min − y)₊‖²`.
// `sensitivity` is row-major `n_y × n_u`; `omega` may be NULL for no
// excitation.
//
// # Safety
// Array pointers must reference the stated lengths.
enum OfoStatus ofo_controller_step(const struct OfoControllerParams *params,
                                   const double *u,
                                   const double *u_ref,
                                   const double *lower,
                                   const double *upper,
                                   const double *omega,
                                   size_t n_u,
                                   const double *y,
                                   size_t n_y,
                                   const double *sensitivity,
                                   double *u_next);

// Runs a scenario file's closed loop and fills `summary`. `variant` may be
// NULL to use the scenario's own, or a name such as `"constant_h0@0.1"`.
// Divergence and power-flow failure are reported in the summary, not as
// errors.
//
// # Safety
// `path` (and `variant` if given) must be NUL-terminated; `summary` writable.
enum OfoStatus ofo_run_scenario(const char *path,
                                const char *variant,
                                bool no_oracle,
                                struct OfoRunSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OFO_H */
