//! Scenario files: a TOML document with a strict schema.
//!
//! ```toml
//! name = "two_bus_step"
//! feeder = "../feeders/two_bus.json"   # relative to this file
//! horizon = 600
//! dt = 1.0
//! variant = "estimated_h"               # true_h | estimated_h | constant_h0 | linear_feedforward
//! profiles = "loads.csv"               # or a [synthetic] table
//!
//! [controller]
//! alpha = 0.05          # omit to use alpha_fraction * alpha_max
//! rho = 100.0
//! sigma_u = 1e-4
//!
//! [der]
//! p_max = [0.5]
//! q_max = [0.3]
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, InputBox, DEFAULT_EXCITATION_BOUND};
use crate::error::{OfoError, Result};
use crate::estimator::{CovarianceBackend, NoiseModel, DEFAULT_SIGMA0};
use crate::feeder::FeederModel;
use crate::profiles::{read_profile_table, InputLimits, ProfileTable, SyntheticProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TrueH,
    EstimatedH,
    ConstantH0,
    LinearFeedforward,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::TrueH,
        Variant::EstimatedH,
        Variant::ConstantH0,
        Variant::LinearFeedforward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TrueH => "true_h",
            Variant::EstimatedH => "estimated_h",
            Variant::ConstantH0 => "constant_h0",
            Variant::LinearFeedforward => "linear_feedforward",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| OfoError::Scenario(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    name: Option<String>,
    feeder: PathBuf,
    horizon: usize,
    #[serde(default = "one")]
    dt: f64,
    variant: Variant,
    #[serde(default)]
    profiles: Option<PathBuf>,
    #[serde(default)]
    synthetic: Option<SyntheticProfile>,
    #[serde(default)]
    controller: ControllerSection,
    der: DerSection,
    #[serde(default)]
    slack: SlackSection,
    #[serde(default)]
    estimator: EstimatorSection,
    #[serde(default)]
    seeds: Seeds,
    #[serde(default)]
    perturbation: Option<Perturbation>,
    #[serde(default)]
    oracle: OracleSection,
    #[serde(default = "default_divergence")]
    divergence_threshold: f64,
}

fn one() -> f64 {
    1.0
}

fn default_divergence() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ControllerSection {
    alpha: Option<f64>,
    alpha_fraction: f64,
    rho: f64,
    v_min: f64,
    v_max: f64,
    sigma_u: f64,
    excitation_bound: f64,
    u_ref: Option<Vec<f64>>,
    init: InitPolicy,
    tune_samples: usize,
    tune_seed: u64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            alpha: None,
            alpha_fraction: 0.3,
            rho: 100.0,
            v_min: 0.94,
            v_max: 1.06,
            sigma_u: 1e-4,
            excitation_bound: DEFAULT_EXCITATION_BOUND,
            u_ref: None,
            init: InitPolicy::Reference,
            tune_samples: 200,
            tune_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DerSection {
    p_max: Vec<f64>,
    q_max: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SlackSection {
    v_ref: f64,
    v_min: f64,
    v_max: f64,
    /// Initial slack voltage; defaults to `v_ref`.
    v_init: Option<f64>,
}

impl Default for SlackSection {
    fn default() -> Self {
        Self {
            v_ref: 1.0,
            v_min: 0.95,
            v_max: 1.05,
            v_init: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EstimatorSection {
    sigma_p1: f64,
    sigma_p2: f64,
    sigma_m1: f64,
    sigma_m2: f64,
    sigma_m3: f64,
    sigma0: f64,
    backend: CovarianceBackend,
    window: Option<usize>,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let n = NoiseModel::default();
        Self {
            sigma_p1: n.sigma_p1,
            sigma_p2: n.sigma_p2,
            sigma_m1: n.sigma_m1,
            sigma_m2: n.sigma_m2,
            sigma_m3: n.sigma_m3,
            sigma0: DEFAULT_SIGMA0,
            backend: CovarianceBackend::Kronecker,
            window: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub excitation: u64,
    pub perturbation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// Indices into the feeder's line list.
    pub lines: Vec<usize>,
    pub max_fraction: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct OracleSection {
    enabled: bool,
    alpha: Option<f64>,
    warm_start: bool,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: None,
            warm_start: true,
        }
    }
}

/// Where the closed loop starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// `u_ref` with the slack at `slack.v_init`, saturated into the first box.
    #[default]
    Reference,
    /// Optimum of the constant linear model for the first step's disturbance.
    Feedforward,
}

/// How the controller step size is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Fixed(f64),
    /// `fraction · alpha_max` from sampled monotonicity constants.
    Auto {
        fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSettings {
    pub noise: NoiseModel,
    pub sigma0: f64,
    pub backend: CovarianceBackend,
    /// Length of the persistency window; defaults to `n_u`.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSettings {
    pub enabled: bool,
    /// `None` picks `η̂ / L̂²` from the sampled constants.
    pub alpha: Option<f64>,
    pub warm_start: bool,
}

/// A validated, fully materialized scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub feeder_path: PathBuf,
    pub feeder: FeederModel,
    pub horizon: usize,
    pub dt: f64,
    pub variant: Variant,
    /// Injection vectors, one per step.
    pub disturbances: Vec<DVector<f64>>,
    pub boxes: Vec<InputBox>,
    /// Controller settings; `alpha` holds a placeholder until resolved.
    pub controller: ControllerConfig,
    pub step_size: StepSize,
    pub tune_samples: usize,
    pub tune_seed: u64,
    pub u_init: DVector<f64>,
    pub init: InitPolicy,
    pub estimator: EstimatorSettings,
    pub seeds: Seeds,
    pub perturbation: Option<Perturbation>,
    pub oracle: OracleSettings,
    pub divergence_threshold: f64,
    pub slack_ref: f64,
    /// Generator settings when profiles are synthetic.
    pub synthetic: Option<SyntheticProfile>,
    /// DER active-power capacity, p.u.
    pub p_max: Vec<f64>,
}

impl Scenario {
    /// Regenerate the synthetic profiles under a different seed and horizon.
    pub fn synthetic_table(
        &self,
        seed: Option<u64>,
        horizon: Option<usize>,
    ) -> Result<ProfileTable> {
        let mut syn = self.synthetic.clone().ok_or_else(|| {
            scenario_err(format!(
                "scenario `{}` has no [synthetic] section",
                self.name
            ))
        })?;
        if let Some(seed) = seed {
            syn.seed = seed;
        }
        Ok(syn.generate(horizon.unwrap_or(self.horizon), &self.p_max))
    }
}

fn scenario_err(msg: impl Into<String>) -> OfoError {
    OfoError::Scenario(msg.into())
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| OfoError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    parse_scenario(&text, base, &default_name)
}

/// Parse scenario text; relative paths resolve against `base_dir`.
pub fn parse_scenario(text: &str, base_dir: &Path, default_name: &str) -> Result<Scenario> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| scenario_err(e.to_string()))?;
    let feeder_path = base_dir.join(&file.feeder);
    let feeder = FeederModel::load(&feeder_path)?;
    let n_der = feeder.n_der();

    if file.horizon < 1 {
        return Err(scenario_err("horizon must be at least 1"));
    }
    if !(file.dt > 0.0 && file.dt.is_finite()) {
        return Err(scenario_err("dt must be positive"));
    }
    if file.der.p_max.len() != n_der || file.der.q_max.len() != n_der {
        return Err(scenario_err(format!(
            "der.p_max and der.q_max need {n_der} entries (DER buses {:?})",
            feeder.der_bus_ids()
        )));
    }
    if file
        .der
        .p_max
        .iter()
        .chain(&file.der.q_max)
        .any(|v| !(*v >= 0.0))
    {
        return Err(scenario_err("der.p_max and der.q_max must be non-negative"));
    }
    let slack = &file.slack;
    if !(slack.v_min > 0.0 && slack.v_min <= slack.v_max) {
        return Err(scenario_err(
            "slack.v_min must be positive and not above slack.v_max",
        ));
    }

    let limits = InputLimits {
        slack_min: slack.v_min,
        slack_max: slack.v_max,
        q_max: file.der.q_max.clone(),
    };
    let mut table = match (&file.profiles, &file.synthetic) {
        (Some(_), Some(_)) => {
            return Err(scenario_err(
                "give either `profiles` or `[synthetic]`, not both",
            ))
        }
        (None, None) => return Err(scenario_err("missing `profiles` or `[synthetic]`")),
        (Some(csv), None) => {
            let table = read_profile_table(base_dir.join(csv), &feeder)?;
            if table.len() < file.horizon {
                return Err(scenario_err(format!(
                    "profile `{}` has {} rows, shorter than horizon {}",
                    csv.display(),
                    table.len(),
                    file.horizon
                )));
            }
            table
        }
        (None, Some(syn)) => {
            syn.validate(&feeder)?;
            syn.generate(file.horizon, &file.der.p_max)
        }
    };
    table.truncate(file.horizon);
    let (disturbances, boxes) = table.into_series(&limits)?;

    let c = &file.controller;
    let u_ref = match &c.u_ref {
        Some(v) => {
            if v.len() != feeder.n_u() {
                return Err(scenario_err(format!(
                    "controller.u_ref needs {} entries",
                    feeder.n_u()
                )));
            }
            DVector::from_vec(v.clone())
        }
        None => {
            let mut u = DVector::zeros(feeder.n_u());
            u[0] = slack.v_ref;
            for k in 0..n_der {
                u[1 + k] = file.der.p_max[k];
            }
            u
        }
    };
    let step_size = match c.alpha {
        Some(a) => StepSize::Fixed(a),
        None => {
            if !(c.alpha_fraction > 0.0 && c.alpha_fraction < 1.0) {
                return Err(scenario_err("controller.alpha_fraction must lie in (0, 1)"));
            }
            StepSize::Auto {
                fraction: c.alpha_fraction,
            }
        }
    };
    let controller = ControllerConfig {
        alpha: c.alpha.unwrap_or(1.0),
        u_ref,
        rho: c.rho,
        v_min: c.v_min,
        v_max: c.v_max,
        sigma_u: c.sigma_u,
        excitation_bound: c.excitation_bound,
    };
    controller.validate()?;
    if c.tune_samples == 0 {
        return Err(scenario_err("controller.tune_samples must be positive"));
    }

    let e = &file.estimator;
    let noise = NoiseModel::new(e.sigma_p1, e.sigma_p2, e.sigma_m1, e.sigma_m2, e.sigma_m3)?;
    if !(e.sigma0 >= 0.0) {
        return Err(scenario_err("estimator.sigma0 must be non-negative"));
    }
    let window = e.window.unwrap_or(feeder.n_u());
    if window < feeder.n_u() {
        return Err(scenario_err(format!(
            "estimator.window must be at least n_u = {}",
            feeder.n_u()
        )));
    }

    if let Some(p) = &file.perturbation {
        if let Some(&bad) = p.lines.iter().find(|&&i| i >= feeder.lines().len()) {
            return Err(scenario_err(format!(
                "perturbation line {bad} does not exist (feeder has {} lines)",
                feeder.lines().len()
            )));
        }
        if !(0.0..1.0).contains(&p.max_fraction) {
            return Err(scenario_err("perturbation.max_fraction must lie in [0, 1)"));
        }
    }
    if !(file.divergence_threshold > 0.0) {
        return Err(scenario_err("divergence_threshold must be positive"));
    }

    // start from the reference, saturated into the first box
    let v_init = slack.v_init.unwrap_or(slack.v_ref);
    let mut u_init = controller.u_ref.clone();
    u_init[0] = v_init;
    let u_init = crate::controller::project_box(&u_init, &boxes[0]);

    Ok(Scenario {
        name: file.name.unwrap_or_else(|| default_name.to_string()),
        feeder_path,
        feeder,
        horizon: file.horizon,
        dt: file.dt,
        variant: file.variant,
        disturbances,
        boxes,
        controller,
        step_size,
        tune_samples: c.tune_samples,
        tune_seed: c.tune_seed,
        u_init,
        init: c.init,
        estimator: EstimatorSettings {
            noise,
            sigma0: e.sigma0,
            backend: e.backend,
            window,
        },
        seeds: file.seeds,
        perturbation: file.perturbation,
        oracle: OracleSettings {
            enabled: file.oracle.enabled,
            alpha: file.oracle.alpha,
            warm_start: file.oracle.warm_start,
        },
        divergence_threshold: file.divergence_threshold,
        slack_ref: slack.v_ref,
        synthetic: file.synthetic,
        p_max: file.der.p_max,
    })
}
