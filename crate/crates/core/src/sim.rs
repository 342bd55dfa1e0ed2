//! The closed loop: plant measurement, sensitivity update, feedback step and
//! bookkeeping, plus side-by-side comparison of sensitivity variants.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::controller::{
    composite_operator, estimate_monotone_lipschitz, excitation_sample, ofo_step, project_box,
    ControllerConfig, MonotonicityEstimate,
};
use crate::error::{OfoError, Result};
use crate::estimator::{persistency_rank, ExcitationWindow, SensitivityEstimate};
use crate::oracle::{solve_acopf, solve_linear_opf, OracleOptions, OracleSolution};
use crate::plant::{
    linearize, perturb_admittance, zero_injection_point, AcPlant, LinearModel, Plant,
};
use crate::scenario::{InitPolicy, Scenario, StepSize, Variant};

/// Steps above the divergence threshold before a run is flagged.
pub const DIVERGENCE_PATIENCE: usize = 50;
/// Moving-average window for the relative linearization error, steps.
pub const MOVING_AVERAGE_WINDOW: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Applied input.
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub u_star: Option<DVector<f64>>,
    /// `‖u_t − u*_t‖₂`, NaN without oracle.
    pub tracking_error: f64,
    /// `‖Δy − HΔu‖₂ / ‖Δy‖₂` for the increment ending at this step, using the
    /// sensitivity the controller held before the increment. NaN at `t = 0`.
    pub rel_lin_error: f64,
    /// Outputs outside `[v_min, v_max]`.
    pub violations: usize,
    /// `‖H_used − ∇_u h(u_t, d_t)‖_F`, NaN unless requested.
    pub h_error: f64,
    /// `trace(Σ_t)` of the estimator, NaN for other variants.
    pub cov_trace: f64,
    /// Persistency of the last `window` increments.
    pub excited: bool,
    pub oracle_residual: f64,
    pub oracle_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub variant: Variant,
    pub label: String,
    pub alpha: f64,
    pub n_u: usize,
    pub n_y: usize,
    pub steps: Vec<StepRecord>,
    /// First step of a run of `DIVERGENCE_PATIENCE` steps above the threshold.
    pub diverged_at: Option<usize>,
    /// Step at which the plant failed to solve; the trace stops there.
    pub nonconvergence_at: Option<usize>,
    /// Sensitivity used by the controller at selected steps.
    pub checkpoints: Vec<(usize, DMatrix<f64>)>,
}

impl SimulationTrace {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Skip the oracle even when the scenario enables it.
    pub no_oracle: bool,
    /// Compute `‖H_used − H_true‖` each step (one extra sensitivity solve).
    pub record_sensitivity_error: bool,
    /// Record the controller's sensitivity every `n` steps.
    pub checkpoint_every: Option<usize>,
}

/// A variant to run, with an optional step-size scaling (e.g. a slowed-down
/// constant-sensitivity controller).
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub variant: Variant,
    pub alpha_scale: f64,
    pub label: String,
}

impl VariantSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            alpha_scale: 1.0,
            label: variant.name().to_string(),
        }
    }

    pub fn scaled(variant: Variant, alpha_scale: f64) -> Self {
        Self {
            variant,
            alpha_scale,
            label: format!("{}@{}", variant.name(), alpha_scale),
        }
    }

    /// `name` or `name@scale`, e.g. `constant_h0@0.1`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once('@') {
            None => Ok(Self::new(Variant::parse(s.trim())?)),
            Some((name, scale)) => {
                let scale: f64 = scale
                    .trim()
                    .parse()
                    .map_err(|_| OfoError::Scenario(format!("bad step-size scale in `{s}`")))?;
                if !(scale > 0.0) {
                    return Err(OfoError::Scenario(format!(
                        "step-size scale must be positive in `{s}`"
                    )));
                }
                Ok(Self::scaled(Variant::parse(name.trim())?, scale))
            }
        }
    }
}

/// Everything shared by the variants of one scenario: plants, the constant
/// linear model, resolved step sizes and the oracle series.
pub struct PreparedScenario<'a> {
    pub scenario: &'a Scenario,
    pub plant: AcPlant,
    /// Linearization of the (possibly perturbed) model feeder at zero injection.
    pub linear_model: LinearModel,
    pub alpha: f64,
    pub oracle_alpha: f64,
    pub tuning: Option<MonotonicityEstimate>,
    pub oracle: Option<Vec<OracleSolution>>,
    /// First commanded input.
    pub u_start: DVector<f64>,
    pub record_sensitivity_error: bool,
    pub checkpoint_every: Option<usize>,
}

/// Sample monotonicity and Lipschitz constants of the true closed-loop
/// operator at the scenario's first step.
pub fn tune(scenario: &Scenario, plant: &dyn Plant) -> Result<MonotonicityEstimate> {
    let d0 = &scenario.disturbances[0];
    let cfg = &scenario.controller;
    estimate_monotone_lipschitz(
        |u| composite_operator(plant, u, d0, cfg),
        &scenario.boxes[0],
        cfg,
        scenario.tune_samples,
        scenario.tune_seed,
    )
}

/// Oracle solutions for every step, warm-started from the previous one.
pub fn oracle_series(
    scenario: &Scenario,
    plant: &dyn Plant,
    cfg: &ControllerConfig,
    opts: &OracleOptions,
) -> Result<Vec<OracleSolution>> {
    let mut out: Vec<OracleSolution> = Vec::with_capacity(scenario.horizon);
    for t in 0..scenario.horizon {
        let warm = if scenario.oracle.warm_start {
            out.last().map(|s| s.u_star.clone())
        } else {
            None
        };
        out.push(solve_acopf(
            plant,
            &scenario.disturbances[t],
            &scenario.boxes[t],
            cfg,
            opts,
            warm.as_ref(),
        )?);
    }
    Ok(out)
}

pub fn prepare<'a>(scenario: &'a Scenario, options: &RunOptions) -> Result<PreparedScenario<'a>> {
    let plant = AcPlant::new(scenario.feeder.clone())?;
    let model_feeder = match &scenario.perturbation {
        Some(p) => perturb_admittance(
            &scenario.feeder,
            &p.lines,
            p.max_fraction,
            scenario.seeds.perturbation,
        )?,
        None => scenario.feeder.clone(),
    };
    let model_plant = AcPlant::new(model_feeder)?;
    let (u_op, d_op) = zero_injection_point(&scenario.feeder, scenario.slack_ref);
    let linear_model = linearize(&model_plant, &u_op, &d_op)?;

    let use_oracle = scenario.oracle.enabled && !options.no_oracle;
    let need_tuning = matches!(scenario.step_size, StepSize::Auto { .. })
        || (use_oracle && scenario.oracle.alpha.is_none());
    let tuning = if need_tuning {
        Some(tune(scenario, &plant)?)
    } else {
        None
    };
    let alpha = match (scenario.step_size, &tuning) {
        (StepSize::Fixed(a), _) => a,
        (StepSize::Auto { fraction }, Some(t)) => fraction * t.alpha_max,
        (StepSize::Auto { .. }, None) => unreachable!("tuning runs for automatic step sizes"),
    };
    let oracle_alpha = match (scenario.oracle.alpha, &tuning) {
        (Some(a), _) => a,
        (None, Some(t)) => t.eta_hat / (t.l_hat * t.l_hat),
        (None, None) => alpha,
    };
    let mut cfg = scenario.controller.clone();
    cfg.alpha = alpha;
    cfg.validate()?;
    let u_start = match scenario.init {
        InitPolicy::Reference => scenario.u_init.clone(),
        InitPolicy::Feedforward => solve_linear_opf(
            &linear_model,
            &scenario.disturbances[0],
            &scenario.boxes[0],
            &cfg,
            &OracleOptions::with_alpha(oracle_alpha),
        )?,
    };
    let oracle = if use_oracle {
        Some(oracle_series(
            scenario,
            &plant,
            &cfg,
            &OracleOptions::with_alpha(oracle_alpha),
        )?)
    } else {
        None
    };
    Ok(PreparedScenario {
        scenario,
        plant,
        linear_model,
        alpha,
        oracle_alpha,
        tuning: tuning.map(|t| MonotonicityEstimate::from_constants(t.eta_hat, t.l_hat, alpha)),
        oracle,
        u_start,
        record_sensitivity_error: options.record_sensitivity_error,
        checkpoint_every: options.checkpoint_every,
    })
}

fn violations(cfg: &ControllerConfig, y: &DVector<f64>) -> usize {
    y.iter()
        .filter(|&&v| v < cfg.v_min || v > cfg.v_max)
        .count()
}

impl PreparedScenario<'_> {
    /// Run one variant on an arbitrary plant; the AC plant is the default.
    pub fn simulate(&self, spec: &VariantSpec) -> Result<SimulationTrace> {
        self.simulate_on(&self.plant, spec)
    }

    pub fn simulate_on(&self, plant: &dyn Plant, spec: &VariantSpec) -> Result<SimulationTrace> {
        let sc = self.scenario;
        let mut cfg = sc.controller.clone();
        cfg.alpha = self.alpha * spec.alpha_scale;
        cfg.validate()?;
        let n_u = plant.n_u();
        let n_y = plant.n_y();
        let h0 = &self.linear_model.h0;

        let mut estimate = match spec.variant {
            Variant::EstimatedH => Some(SensitivityEstimate::new(
                h0,
                sc.estimator.sigma0,
                sc.estimator.noise,
                sc.estimator.backend,
            )?),
            _ => None,
        };
        let mut window = ExcitationWindow::new(n_u, sc.estimator.window)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seeds.excitation);
        let linear_opts = OracleOptions::with_alpha(self.oracle_alpha);

        let mut trace = SimulationTrace {
            variant: spec.variant,
            label: spec.label.clone(),
            alpha: cfg.alpha,
            n_u,
            n_y,
            steps: Vec::with_capacity(sc.horizon),
            diverged_at: None,
            nonconvergence_at: None,
            checkpoints: Vec::new(),
        };

        let mut command = self.u_start.clone();
        let mut previous: Option<(DVector<f64>, DVector<f64>, DMatrix<f64>)> = None;
        let mut above = 0usize;

        for t in 0..sc.horizon {
            let d = &sc.disturbances[t];
            let bounds = &sc.boxes[t];
            // DER setpoints saturate at the current availability
            let u = project_box(&command, bounds);
            let y = match plant.output(&u, d) {
                Ok(y) => y,
                Err(OfoError::NonConvergence { .. }) => {
                    trace.nonconvergence_at = Some(t);
                    break;
                }
                Err(e) => return Err(e),
            };

            let mut rel_lin_error = f64::NAN;
            if let Some((u_prev, y_prev, h_prev)) = &previous {
                let du = &u - u_prev;
                let dy = &y - y_prev;
                let dy_norm = dy.norm();
                if dy_norm > 0.0 {
                    rel_lin_error = (&dy - h_prev * &du).norm() / dy_norm;
                }
                if let Some(est) = estimate.as_mut() {
                    est.update(&du, &dy)?;
                }
                window.push(du)?;
            }

            let true_h = if spec.variant == Variant::TrueH || self.record_sensitivity_error {
                match plant.sensitivity(&u, d) {
                    Ok(h) => Some(h),
                    Err(OfoError::NonConvergence { .. }) => {
                        trace.nonconvergence_at = Some(t);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let h_used = match spec.variant {
                Variant::TrueH => true_h.clone().expect("computed for TrueH"),
                Variant::EstimatedH => estimate.as_ref().expect("estimator").matrix(),
                Variant::ConstantH0 | Variant::LinearFeedforward => h0.clone(),
            };

            let (u_star, tracking_error, oracle_residual, oracle_iters) = match &self.oracle {
                Some(series) => {
                    let s = &series[t];
                    (
                        Some(s.u_star.clone()),
                        (&u - &s.u_star).norm(),
                        s.residual,
                        s.iterations,
                    )
                }
                None => (None, f64::NAN, f64::NAN, 0),
            };
            if tracking_error > sc.divergence_threshold
                || (u_star.is_some() && !tracking_error.is_finite())
            {
                above += 1;
                if above >= DIVERGENCE_PATIENCE && trace.diverged_at.is_none() {
                    trace.diverged_at = Some(t + 1 - DIVERGENCE_PATIENCE);
                }
            } else {
                above = 0;
            }

            if let Some(every) = self.checkpoint_every {
                if every > 0 && t % every == 0 {
                    trace.checkpoints.push((t, h_used.clone()));
                }
            }

            trace.steps.push(StepRecord {
                t,
                u: u.clone(),
                y: y.clone(),
                u_star,
                tracking_error,
                rel_lin_error,
                violations: violations(&cfg, &y),
                h_error: true_h.as_ref().map_or(f64::NAN, |h| (&h_used - h).norm()),
                cov_trace: estimate.as_ref().map_or(f64::NAN, |e| e.covariance_trace()),
                excited: window.len() >= n_u && persistency_rank(&window).excited,
                oracle_residual,
                oracle_iters,
            });

            command = match spec.variant {
                Variant::LinearFeedforward => {
                    solve_linear_opf(&self.linear_model, d, bounds, &cfg, &linear_opts)?
                }
                _ => {
                    let omega = excitation_sample(&mut rng, &cfg, n_u);
                    match ofo_step(&u, &y, &h_used, bounds, &cfg, &omega) {
                        Ok(next) => next,
                        Err(OfoError::NonFinite(_)) => {
                            trace.diverged_at.get_or_insert(t);
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
            };
            previous = Some((u, y, h_used));
        }
        Ok(trace)
    }
}

/// Run the scenario's own variant.
pub fn run_simulation(scenario: &Scenario) -> Result<SimulationTrace> {
    run_simulation_with(scenario, &RunOptions::default())
}

pub fn run_simulation_with(scenario: &Scenario, options: &RunOptions) -> Result<SimulationTrace> {
    prepare(scenario, options)?.simulate(&VariantSpec::new(scenario.variant))
}

/// Trailing moving average over finite entries; NaN where the window has none.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..values.len() {
        if values[i].is_finite() {
            sum += values[i];
            count += 1;
        }
        if i >= window && values[i - window].is_finite() {
            sum -= values[i - window];
            count -= 1;
        }
        out.push(if count > 0 {
            sum / count as f64
        } else {
            f64::NAN
        });
    }
    out
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub label: String,
    pub variant: Variant,
    pub alpha: f64,
    pub mean_tracking_error: f64,
    /// Mean `‖u_t − u*_t‖` over the last third of the horizon.
    pub final_third_tracking_error: f64,
    /// Mean of the moving-average relative linearization error over the last third.
    pub final_third_rel_error: f64,
    pub total_violations: usize,
    pub diverged: bool,
    pub nonconverged: bool,
}

impl VariantSummary {
    pub fn from_trace(trace: &SimulationTrace, horizon: usize) -> Self {
        let start = 2 * horizon / 3;
        let ma = moving_average(
            &trace
                .steps
                .iter()
                .map(|s| s.rel_lin_error)
                .collect::<Vec<_>>(),
            MOVING_AVERAGE_WINDOW,
        );
        Self {
            label: trace.label.clone(),
            variant: trace.variant,
            alpha: trace.alpha,
            mean_tracking_error: finite_mean(trace.steps.iter().map(|s| s.tracking_error)),
            final_third_tracking_error: finite_mean(
                trace.steps.iter().skip(start).map(|s| s.tracking_error),
            ),
            final_third_rel_error: finite_mean(ma.iter().skip(start).copied()),
            total_violations: trace.steps.iter().map(|s| s.violations).sum(),
            diverged: trace.diverged(),
            nonconverged: trace.nonconvergence_at.is_some(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub scenario: String,
    pub alpha: f64,
    pub tuning: Option<MonotonicityEstimate>,
    pub summaries: Vec<VariantSummary>,
    pub traces: Vec<SimulationTrace>,
}

impl ComparisonReport {
    pub fn summary(&self, label: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.label == label)
    }

    pub fn trace(&self, label: &str) -> Option<&SimulationTrace> {
        self.traces.iter().find(|t| t.label == label)
    }
}

/// Run several variants against the same oracle series and excitation seed.
/// Variants run on separate threads; each owns its own generator.
pub fn compare_variants(
    scenario: &Scenario,
    specs: &[VariantSpec],
    options: &RunOptions,
) -> Result<ComparisonReport> {
    if specs.len() < 2 {
        return Err(OfoError::Scenario(
            "compare needs at least two variants".into(),
        ));
    }
    let prepared = prepare(scenario, options)?;
    let traces: Vec<Result<SimulationTrace>> = std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .iter()
            .map(|spec| s.spawn(|| prepared.simulate(spec)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("variant thread panicked"))
            .collect()
    });
    let traces = traces.into_iter().collect::<Result<Vec<_>>>()?;
    let summaries = traces
        .iter()
        .map(|t| VariantSummary::from_trace(t, scenario.horizon))
        .collect();
    Ok(ComparisonReport {
        scenario: scenario.name.clone(),
        alpha: prepared.alpha,
        tuning: prepared.tuning,
        summaries,
        traces,
    })
}

/// Replay recorded inputs and outputs through an estimator. Returns, for each
/// increment, the prior relative prediction error `‖Δy − ĤΔu‖ / ‖Δy‖`.
pub fn replay_increments(
    estimate: &mut SensitivityEstimate,
    inputs: &[DVector<f64>],
    outputs: &[DVector<f64>],
) -> Result<Vec<f64>> {
    if inputs.len() != outputs.len() {
        return Err(OfoError::DimensionMismatch {
            what: "recorded outputs",
            expected: inputs.len(),
            got: outputs.len(),
        });
    }
    let mut errors = Vec::with_capacity(inputs.len().saturating_sub(1));
    for k in 1..inputs.len() {
        let du = &inputs[k] - &inputs[k - 1];
        let dy = &outputs[k] - &outputs[k - 1];
        let predicted = estimate.predict_dy(&du)?;
        let n = dy.norm();
        errors.push(if n > 0.0 {
            (&dy - predicted).norm() / n
        } else {
            f64::NAN
        });
        estimate.update(&du, &dy)?;
    }
    Ok(errors)
}
