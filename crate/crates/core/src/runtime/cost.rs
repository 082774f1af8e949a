use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::run::{CostMeter, RunOutput};
use crate::zo::PhaseTimes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentShare {
    pub name: String,
    pub cost_units: u64,
    /// Percent of all instrumented units.
    pub unit_share: f64,
    pub wall_ms: f64,
    /// Percent of the summed phase wall-clock.
    pub wall_share: f64,
}

/// Scoring vs perturbation vs update vs fold breakdown of a run. One
/// weight write counts as one unit, the same as one scoring
/// multiply-accumulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub components: Vec<ComponentShare>,
    pub meter: CostMeter,
}

fn percent(part: f64, total: f64) -> f64 {
    if total > 0.0 {
        100.0 * part / total
    } else {
        0.0
    }
}

pub fn cost_report(meter: &CostMeter, times: &PhaseTimes) -> CostReport {
    let parts = [
        ("scoring", meter.scoring_cost_units, times.scoring),
        ("perturb", meter.perturb_writes, times.perturb),
        ("update", meter.update_writes, times.update),
        ("fold", meter.fold_writes, times.fold),
    ];
    let unit_total: f64 = parts.iter().map(|p| p.1 as f64).sum();
    let wall_total: f64 = parts.iter().map(|p| p.2.as_secs_f64() * 1e3).sum();
    let components = parts
        .iter()
        .map(|(name, units, wall)| {
            let wall_ms = wall.as_secs_f64() * 1e3;
            ComponentShare {
                name: (*name).into(),
                cost_units: *units,
                unit_share: percent(*units as f64, unit_total),
                wall_ms,
                wall_share: percent(wall_ms, wall_total),
            }
        })
        .collect();
    CostReport {
        components,
        meter: *meter,
    }
}

impl CostReport {
    pub fn for_run(run: &RunOutput) -> Self {
        cost_report(&run.meter, &run.times)
    }

    /// Component with the largest unit share (first on ties).
    pub fn dominant(&self) -> &str {
        let mut best = &self.components[0];
        for c in &self.components[1..] {
            if c.cost_units > best.cost_units {
                best = c;
            }
        }
        &best.name
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>16} {:>8} {:>12} {:>8}",
            "component", "units", "units%", "wall_ms", "wall%"
        );
        for c in &self.components {
            let _ = writeln!(
                s,
                "{:<10} {:>16} {:>7.2}% {:>12.3} {:>7.2}%",
                c.name, c.cost_units, c.unit_share, c.wall_ms, c.wall_share
            );
        }
        s
    }
}
