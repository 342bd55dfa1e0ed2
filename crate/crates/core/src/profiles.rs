//! Time series of loads and renewable availability.
//!
//! CSV layout, one row per step:
//!
//! | column            | meaning                                           |
//! |-------------------|---------------------------------------------------|
//! | `t` (optional)    | step index, ignored                               |
//! | `load_p_<bus>`    | active consumption at each non-slack bus, p.u.    |
//! | `load_q_<bus>`    | reactive consumption at each non-slack bus, p.u.  |
//! | `avail_p_<bus>`   | available active generation at each DER bus, p.u. |
//!
//! Consumption is positive in the file and negated into injections on load.
//! Availability becomes the upper bound of the DER active-power input; its
//! lower bound is zero.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::controller::InputBox;
use crate::error::{OfoError, Result};
use crate::feeder::FeederModel;

/// Static limits that complete the time-varying box.
#[derive(Debug, Clone, PartialEq)]
pub struct InputLimits {
    pub slack_min: f64,
    pub slack_max: f64,
    /// Reactive capability per DER, symmetric `[-q_max, q_max]`.
    pub q_max: Vec<f64>,
}

impl InputLimits {
    pub fn input_box(&self, availability: &[f64]) -> Result<InputBox> {
        let n = availability.len();
        let mut lower = DVector::zeros(1 + 2 * n);
        let mut upper = DVector::zeros(1 + 2 * n);
        lower[0] = self.slack_min;
        upper[0] = self.slack_max;
        for k in 0..n {
            upper[1 + k] = availability[k];
            lower[1 + n + k] = -self.q_max[k];
            upper[1 + n + k] = self.q_max[k];
        }
        InputBox::new(lower, upper)
    }
}

/// Per-step consumption and availability, as stored in the CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileTable {
    pub load_p: Vec<Vec<f64>>,
    pub load_q: Vec<Vec<f64>>,
    pub availability: Vec<Vec<f64>>,
}

impl ProfileTable {
    pub fn len(&self) -> usize {
        self.load_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.load_p.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.load_p.truncate(n);
        self.load_q.truncate(n);
        self.availability.truncate(n);
    }

    /// Disturbance (injection) vector at a step.
    pub fn disturbance(&self, step: usize) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.load_p[step].len(),
            self.load_p[step]
                .iter()
                .chain(&self.load_q[step])
                .map(|v| -v),
        )
    }

    pub fn into_series(self, limits: &InputLimits) -> Result<(Vec<DVector<f64>>, Vec<InputBox>)> {
        let d = (0..self.len()).map(|t| self.disturbance(t)).collect();
        let boxes = self
            .availability
            .iter()
            .map(|a| limits.input_box(a))
            .collect::<Result<Vec<_>>>()?;
        Ok((d, boxes))
    }

    pub fn write_csv(&self, feeder: &FeederModel, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| wrap_csv(path, e))?;
        let loads = feeder.load_bus_ids();
        let ders = feeder.der_bus_ids();
        let mut header = vec!["t".to_string()];
        header.extend(loads.iter().map(|id| format!("load_p_{id}")));
        header.extend(loads.iter().map(|id| format!("load_q_{id}")));
        header.extend(ders.iter().map(|id| format!("avail_p_{id}")));
        w.write_record(&header).map_err(|e| wrap_csv(path, e))?;
        for t in 0..self.len() {
            let mut row = vec![t.to_string()];
            row.extend(self.load_p[t].iter().map(|v| v.to_string()));
            row.extend(self.load_q[t].iter().map(|v| v.to_string()));
            row.extend(self.availability[t].iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| wrap_csv(path, e))?;
        }
        w.flush().map_err(|e| OfoError::io(path, e))?;
        Ok(())
    }
}

fn wrap_csv(path: &Path, e: csv::Error) -> OfoError {
    OfoError::Profile {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Read a profile CSV whose header must cover the feeder's buses.
pub fn read_profile_table(path: impl AsRef<Path>, feeder: &FeederModel) -> Result<ProfileTable> {
    let path = path.as_ref();
    let err = |message: String| OfoError::Profile {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| wrap_csv(path, e))?;
    let header: HashMap<String, usize> = reader
        .headers()
        .map_err(|e| wrap_csv(path, e))?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let column = |name: String| {
        header
            .get(&name)
            .copied()
            .ok_or_else(|| err(format!("missing column `{name}`")))
    };
    let loads = feeder.load_bus_ids();
    let ders = feeder.der_bus_ids();
    let p_cols = loads
        .iter()
        .map(|id| column(format!("load_p_{id}")))
        .collect::<Result<Vec<_>>>()?;
    let q_cols = loads
        .iter()
        .map(|id| column(format!("load_q_{id}")))
        .collect::<Result<Vec<_>>>()?;
    let a_cols = ders
        .iter()
        .map(|id| column(format!("avail_p_{id}")))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = {
        let mut by_index: Vec<(usize, String)> =
            header.iter().map(|(k, v)| (*v, k.clone())).collect();
        by_index.sort();
        by_index.into_iter().map(|(_, k)| k).collect()
    };

    let mut table = ProfileTable::default();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| wrap_csv(path, e))?;
        let row = row_idx + 1;
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    err(format!(
                        "non-numeric value `{raw}` at row {row}, column `{}`",
                        names[col]
                    ))
                })
        };
        table
            .load_p
            .push(p_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?);
        table
            .load_q
            .push(q_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?);
        let avail: Vec<f64> = a_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?;
        if let Some(k) = avail.iter().position(|a| *a < 0.0) {
            return Err(err(format!(
                "negative availability at row {row}, column `avail_p_{}`",
                ders[k]
            )));
        }
        table.availability.push(avail);
    }
    Ok(table)
}

/// Read a profile CSV and turn it into disturbance and box series.
pub fn load_profiles(
    path: impl AsRef<Path>,
    feeder: &FeederModel,
    limits: &InputLimits,
) -> Result<(Vec<DVector<f64>>, Vec<InputBox>)> {
    read_profile_table(path, feeder)?.into_series(limits)
}

/// A one-off change applied from step `at` onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEvent {
    pub at: usize,
    /// Multiplies every base load.
    #[serde(default)]
    pub load_scale: Option<f64>,
    /// Overrides availability levels (fraction of capacity) per DER.
    #[serde(default)]
    pub availability: Option<Vec<f64>>,
}

/// Parameters of the synthetic profile generator.
///
/// Loads follow a smoothed, mean-reverting random walk around their base
/// values; availability is piecewise constant, re-drawn every `avail_hold`
/// steps by a bounded random jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    pub seed: u64,
    /// Base active consumption per non-slack bus, p.u.
    pub load_p: Vec<f64>,
    /// Base reactive consumption per non-slack bus, p.u.
    pub load_q: Vec<f64>,
    /// Stationary relative standard deviation of the load walk.
    #[serde(default = "default_load_walk")]
    pub load_walk: f64,
    /// Correlation time of the load walk, steps.
    #[serde(default = "default_load_tau")]
    pub load_tau: f64,
    /// Initial availability per DER as a fraction of `p_max`.
    pub availability: Vec<f64>,
    /// Hold period per DER, steps.
    pub avail_hold: Vec<usize>,
    /// Largest jump of the availability fraction at each hold boundary.
    #[serde(default)]
    pub avail_jump: f64,
    #[serde(default)]
    pub events: Vec<ProfileEvent>,
}

fn default_load_walk() -> f64 {
    0.0
}

fn default_load_tau() -> f64 {
    300.0
}

impl SyntheticProfile {
    pub fn validate(&self, feeder: &FeederModel) -> Result<()> {
        let bad = |m: String| Err(OfoError::Scenario(format!("synthetic: {m}")));
        if self.load_p.len() != feeder.n_y() || self.load_q.len() != feeder.n_y() {
            return bad(format!(
                "load_p/load_q need {} entries (one per non-slack bus)",
                feeder.n_y()
            ));
        }
        if self.availability.len() != feeder.n_der() || self.avail_hold.len() != feeder.n_der() {
            return bad(format!(
                "availability/avail_hold need {} entries (one per DER)",
                feeder.n_der()
            ));
        }
        if self.avail_hold.contains(&0) {
            return bad("avail_hold entries must be positive".into());
        }
        if !(self.load_tau >= 1.0) || !(self.load_walk >= 0.0) || !(self.avail_jump >= 0.0) {
            return bad("load_tau >= 1, load_walk >= 0 and avail_jump >= 0 required".into());
        }
        for e in &self.events {
            if let Some(a) = &e.availability {
                if a.len() != feeder.n_der() {
                    return bad(format!(
                        "event at {} overrides {} availabilities, expected {}",
                        e.at,
                        a.len(),
                        feeder.n_der()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Deterministic in `seed`.
    pub fn generate(&self, horizon: usize, p_max: &[f64]) -> ProfileTable {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        let n_load = self.load_p.len();
        let n_der = self.availability.len();

        // AR(1) walk followed by an exponential smoother, both with time constant tau
        let keep = 1.0 - 1.0 / self.load_tau;
        let drive = self.load_walk * (1.0 - keep * keep).sqrt();
        let mut walk = vec![0.0; n_load];
        let mut smooth = vec![0.0; n_load];
        let mut scale = 1.0;
        let mut level = self.availability.clone();
        let mut table = ProfileTable::default();

        for t in 0..horizon {
            for e in self.events.iter().filter(|e| e.at == t) {
                if let Some(s) = e.load_scale {
                    scale = s;
                }
                if let Some(a) = &e.availability {
                    level.clone_from(a);
                }
            }
            for (lv, &hold) in level.iter_mut().zip(&self.avail_hold) {
                if t > 0 && t % hold == 0 && self.avail_jump > 0.0 {
                    *lv = (*lv + self.avail_jump * unit.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            for i in 0..n_load {
                if self.load_walk > 0.0 {
                    walk[i] = keep * walk[i] + drive * normal.sample(&mut rng);
                    smooth[i] = keep * smooth[i] + (1.0 - keep) * walk[i];
                }
            }
            let factor = |i: usize| scale * (1.0 + smooth[i]).max(0.0);
            table
                .load_p
                .push((0..n_load).map(|i| self.load_p[i] * factor(i)).collect());
            table
                .load_q
                .push((0..n_load).map(|i| self.load_q[i] * factor(i)).collect());
            table
                .availability
                .push((0..n_der).map(|k| level[k] * p_max[k]).collect());
        }
        table
    }
}
