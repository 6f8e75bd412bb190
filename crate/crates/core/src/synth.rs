//! Synthetic count series built from a few daily archetypes.
//!
//! Each node follows one archetype (round-robin), scaled by a per-node
//! factor, modulated by a slowly varying day level and perturbed by Gaussian
//! noise proportional to the node's peak. Values are rounded to
//! non-negative integers.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::series::SeriesTable;

/// Gaussian bump within the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Peak {
    /// Centre as a fraction of the day, in `[0, 1)`.
    pub position: f64,
    pub height: f64,
    /// Standard deviation as a fraction of the day.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archetype {
    /// Level outside the peaks.
    pub base: f64,
    pub peaks: Vec<Peak>,
}

impl Archetype {
    /// Expected value at a slot of day.
    pub fn value(&self, slot: usize, slots_per_day: usize) -> f64 {
        let x = (slot as f64 + 0.5) / slots_per_day as f64;
        self.base
            + self
                .peaks
                .iter()
                .map(|p| p.height * (-0.5 * ((x - p.position) / p.width).powi(2)).exp())
                .sum::<f64>()
    }

    pub fn profile(&self, slots_per_day: usize) -> Vec<f64> {
        (0..slots_per_day).map(|s| self.value(s, slots_per_day)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub nodes: usize,
    pub days: usize,
    pub slots_per_day: usize,
    pub granularity_minutes: u32,
    pub archetypes: Vec<Archetype>,
    /// Noise standard deviation as a fraction of each node's peak.
    pub noise: f64,
    /// Standard deviation of the relative day level.
    pub day_amplitude: f64,
    /// Day-to-day autocorrelation of the level, in `[0, 1)`.
    pub day_persistence: f64,
    /// Node scales are drawn from `[1 - spread, 1 + spread]`.
    pub scale_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// Twelve nodes over thirty days of hourly slots: a commuter archetype
    /// with morning and evening peaks and a leisure archetype peaking
    /// around midday.
    fn default() -> Self {
        SynthConfig {
            nodes: 12,
            days: 30,
            slots_per_day: 24,
            granularity_minutes: 60,
            archetypes: vec![
                Archetype {
                    base: 10.0,
                    peaks: vec![
                        Peak {
                            position: 0.33,
                            height: 120.0,
                            width: 0.04,
                        },
                        Peak {
                            position: 0.75,
                            height: 100.0,
                            width: 0.05,
                        },
                    ],
                },
                Archetype {
                    base: 15.0,
                    peaks: vec![Peak {
                        position: 0.55,
                        height: 80.0,
                        width: 0.12,
                    }],
                },
            ],
            noise: 0.05,
            day_amplitude: 0.15,
            day_persistence: 0.7,
            scale_spread: 0.3,
            seed: 0,
        }
    }
}

fn field(name: &str, msg: &str) -> Error {
    Error::config(format!("{name} {msg}"))
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(field("nodes", "must be at least 1"));
        }
        if self.days == 0 {
            return Err(field("days", "must be at least 1"));
        }
        if self.slots_per_day == 0 {
            return Err(field("slots_per_day", "must be at least 1"));
        }
        if self.granularity_minutes == 0 {
            return Err(field("granularity_minutes", "must be at least 1"));
        }
        if self.archetypes.is_empty() {
            return Err(field("archetypes", "must not be empty"));
        }
        for (i, a) in self.archetypes.iter().enumerate() {
            if !(a.base.is_finite() && a.base >= 0.0) {
                return Err(field(&format!("archetypes[{i}].base"), "must be a non-negative number"));
            }
            for (j, p) in a.peaks.iter().enumerate() {
                let at = format!("archetypes[{i}].peaks[{j}]");
                if !(0.0..1.0).contains(&p.position) {
                    return Err(field(&format!("{at}.position"), "must lie in [0, 1)"));
                }
                if !(p.height.is_finite() && p.height >= 0.0) {
                    return Err(field(&format!("{at}.height"), "must be a non-negative number"));
                }
                if !(p.width.is_finite() && p.width > 0.0) {
                    return Err(field(&format!("{at}.width"), "must be positive"));
                }
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(field("noise", "must be a non-negative number"));
        }
        if !(self.day_amplitude.is_finite() && self.day_amplitude >= 0.0) {
            return Err(field("day_amplitude", "must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.day_persistence) {
            return Err(field("day_persistence", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.scale_spread) {
            return Err(field("scale_spread", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: SynthConfig = serde_json::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Generated series and the archetype each node was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub table: SeriesTable,
    pub assignment: BTreeMap<String, usize>,
}

impl SynthDataset {
    /// Archetype index per node in table order.
    pub fn labels(&self) -> Vec<usize> {
        self.table.node_ids.iter().map(|id| self.assignment[id]).collect()
    }

    pub fn assignment_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.assignment)?)
    }

    pub fn write(&self, csv_path: &Path, assignment_path: &Path) -> Result<()> {
        write_atomic(csv_path, &self.table.to_wide_csv()?)?;
        write_atomic(assignment_path, self.assignment_json()?.as_bytes())
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spd = cfg.slots_per_day;
    let slots = cfg.days * spd;
    let width = (cfg.nodes - 1).to_string().len().max(2);
    let profiles: Vec<Vec<f64>> = cfg.archetypes.iter().map(|a| a.profile(spd)).collect();
    let innovation = (1.0 - cfg.day_persistence.powi(2)).sqrt() * cfg.day_amplitude;
    let mut values = Array2::zeros((cfg.nodes, slots));
    let mut ids = Vec::with_capacity(cfg.nodes);
    let mut assignment = BTreeMap::new();
    for n in 0..cfg.nodes {
        let id = format!("n{n:0width$}");
        let arch = n % cfg.archetypes.len();
        let prof = &profiles[arch];
        let scale = 1.0 + cfg.scale_spread * rng.random_range(-1.0..=1.0);
        let peak = scale * prof.iter().copied().fold(0.0, f64::max);
        let noise = Normal::new(0.0, cfg.noise * peak).map_err(|e| field("noise", &e.to_string()))?;
        let z0: f64 = StandardNormal.sample(&mut rng);
        let mut level = cfg.day_amplitude * z0;
        for d in 0..cfg.days {
            if d > 0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                level = cfg.day_persistence * level + innovation * z;
            }
            let factor = (1.0 + level).max(0.0);
            for s in 0..spd {
                let x = scale * factor * prof[s] + noise.sample(&mut rng);
                values[(n, d * spd + s)] = x.round().max(0.0);
            }
        }
        assignment.insert(id.clone(), arch);
        ids.push(id);
    }
    Ok(SynthDataset {
        table: SeriesTable::new(ids, values, cfg.granularity_minutes)?,
        assignment,
    })
}
