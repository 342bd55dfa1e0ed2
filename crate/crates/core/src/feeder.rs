//! Feeder topology, bus roles and the JSON feeder file format.
//!
//! Vector layouts used throughout the crate:
//!
//! * input `u`: `[slack_voltage, der_p.., der_q..]`, one `p` and one `q` entry
//!   per DER bus in file order, so `n_u = 1 + 2 * n_der`.
//! * disturbance `d`: `[load_p.., load_q..]`, one entry per non-slack bus in
//!   file order. Values are injections, so consumption is negative.
//! * output `y`: voltage magnitude at every non-slack bus in file order.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{OfoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Load,
    Der,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    /// A `load` bus may also host a DER; `kind = "der"` implies it.
    #[serde(default)]
    pub der: bool,
}

impl Bus {
    pub fn has_der(&self) -> bool {
        self.kind == BusKind::Der || (self.kind != BusKind::Slack && self.der)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub from: u32,
    pub to: u32,
    #[serde(rename = "r_pu")]
    pub r: f64,
    #[serde(rename = "x_pu")]
    pub x: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    s_base_va: f64,
    v_base_v: f64,
}

/// A validated single-phase feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    s_base: f64,
    v_base: f64,
    index: HashMap<u32, usize>,
    slack: usize,
    /// Bus indices of the non-slack buses, in output order.
    others: Vec<usize>,
    /// Positions (within `others`) of DER buses.
    der_positions: Vec<usize>,
}

impl FeederModel {
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>, s_base: f64, v_base: f64) -> Result<Self> {
        let invalid = |msg: String| Err(OfoError::InvalidFeeder(msg));
        if !(s_base > 0.0 && v_base > 0.0) {
            return invalid("base values must be positive".into());
        }
        let mut index = HashMap::with_capacity(buses.len());
        for (i, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, i).is_some() {
                return invalid(format!("duplicate bus id {}", bus.id));
            }
        }
        let slacks: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Slack)
            .map(|(i, _)| i)
            .collect();
        if slacks.len() != 1 {
            return invalid(format!(
                "expected exactly one slack bus, found {}",
                slacks.len()
            ));
        }
        let slack = slacks[0];

        let mut seen = HashSet::new();
        let mut adjacency = vec![Vec::new(); buses.len()];
        for line in &lines {
            let (Some(&a), Some(&b)) = (index.get(&line.from), index.get(&line.to)) else {
                return invalid(format!(
                    "line {}-{} references an unknown bus",
                    line.from, line.to
                ));
            };
            if a == b {
                return invalid(format!("line {}-{} is a self loop", line.from, line.to));
            }
            if !(line.r.is_finite() && line.x.is_finite()) || line.r < 0.0 {
                return invalid(format!(
                    "line {}-{} has invalid impedance",
                    line.from, line.to
                ));
            }
            if line.r == 0.0 && line.x == 0.0 {
                return invalid(format!("line {}-{} has zero impedance", line.from, line.to));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(OfoError::DuplicateLine(line.from, line.to));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }

        let mut reached = vec![false; buses.len()];
        let mut queue = VecDeque::from([slack]);
        reached[slack] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adjacency[i] {
                if !reached[j] {
                    reached[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if let Some(i) = reached.iter().position(|r| !r) {
            return Err(OfoError::Disconnected(buses[i].id));
        }

        let others: Vec<usize> = (0..buses.len()).filter(|&i| i != slack).collect();
        let der_positions = others
            .iter()
            .enumerate()
            .filter(|(_, &i)| buses[i].has_der())
            .map(|(k, _)| k)
            .collect();

        Ok(Self {
            buses,
            lines,
            s_base,
            v_base,
            index,
            slack,
            others,
            der_positions,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: FeederFile = serde_json::from_str(text)?;
        Self::new(file.buses, file.lines, file.s_base_va, file.v_base_v)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| OfoError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        let file = FeederFile {
            buses: self.buses.clone(),
            lines: self.lines.clone(),
            s_base_va: self.s_base,
            v_base_v: self.v_base,
        };
        serde_json::to_string_pretty(&file).expect("feeder serializes")
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn s_base(&self) -> f64 {
        self.s_base
    }

    pub fn v_base(&self) -> f64 {
        self.v_base
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Position of a bus id in `buses()`.
    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn slack_index(&self) -> usize {
        self.slack
    }

    /// Bus indices of the non-slack buses, in output order.
    pub fn non_slack(&self) -> &[usize] {
        &self.others
    }

    /// Positions within `non_slack()` of the DER buses.
    pub fn der_positions(&self) -> &[usize] {
        &self.der_positions
    }

    pub fn der_bus_ids(&self) -> Vec<u32> {
        self.der_positions
            .iter()
            .map(|&k| self.buses[self.others[k]].id)
            .collect()
    }

    pub fn load_bus_ids(&self) -> Vec<u32> {
        self.others.iter().map(|&i| self.buses[i].id).collect()
    }

    pub fn n_der(&self) -> usize {
        self.der_positions.len()
    }

    pub fn n_u(&self) -> usize {
        1 + 2 * self.n_der()
    }

    pub fn n_y(&self) -> usize {
        self.others.len()
    }

    pub fn n_d(&self) -> usize {
        2 * self.others.len()
    }

    /// Copy of the feeder with line impedances replaced.
    pub(crate) fn with_lines(&self, lines: Vec<Line>) -> Self {
        debug_assert_eq!(lines.len(), self.lines.len());
        Self {
            lines,
            ..self.clone()
        }
    }
}

/// Structured view of the input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InputVector {
    pub slack_voltage: f64,
    pub der_p: Vec<f64>,
    pub der_q: Vec<f64>,
}

impl InputVector {
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(1 + 2 * self.der_p.len());
        v.push(self.slack_voltage);
        v.extend_from_slice(&self.der_p);
        v.extend_from_slice(&self.der_q);
        DVector::from_vec(v)
    }

    pub fn from_vector(u: &DVector<f64>) -> Result<Self> {
        if u.len() % 2 != 1 {
            return Err(OfoError::DimensionMismatch {
                what: "input vector (must be odd)",
                expected: u.len() + 1,
                got: u.len(),
            });
        }
        let n = (u.len() - 1) / 2;
        Ok(Self {
            slack_voltage: u[0],
            der_p: u.rows(1, n).iter().copied().collect(),
            der_q: u.rows(1 + n, n).iter().copied().collect(),
        })
    }
}

/// Structured view of the disturbance vector (injections; loads negative).
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceVector {
    pub load_p: Vec<f64>,
    pub load_q: Vec<f64>,
}

impl DisturbanceVector {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.load_p.len() + self.load_q.len(),
            self.load_p.iter().chain(&self.load_q).copied(),
        )
    }

    pub fn from_vector(d: &DVector<f64>) -> Self {
        let n = d.len() / 2;
        Self {
            load_p: d.rows(0, n).iter().copied().collect(),
            load_q: d.rows(n, n).iter().copied().collect(),
        }
    }
}
