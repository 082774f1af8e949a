use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::run::{PathKind, RunOutput};
use crate::zo::EvalSample;

/// Evaluation curve of one run with its training wall-clock.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCurve {
    pub name: String,
    pub path: PathKind,
    pub evals: Vec<EvalSample>,
    pub wall_ms: Vec<f64>,
    pub total_wall_ms: f64,
}

impl RunCurve {
    pub fn from_run(name: impl Into<String>, run: &RunOutput) -> Self {
        Self {
            name: name.into(),
            path: run.path,
            evals: run.trajectory.evals.clone(),
            wall_ms: run.eval_wall_ms.clone(),
            total_wall_ms: run.train_wall.as_secs_f64() * 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub path: PathKind,
    pub final_eval_loss: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    pub total_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub runs: Vec<RunSummary>,
    /// Baseline wall-clock over serving wall-clock.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    /// Between the first two runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss_difference: Option<f64>,
}

pub fn trajectory_report(runs: &[RunCurve]) -> TrajectoryReport {
    let summaries: Vec<RunSummary> = runs
        .iter()
        .map(|r| RunSummary {
            name: r.name.clone(),
            path: r.path,
            final_eval_loss: r.evals.last().map(|e| e.loss),
            final_eval_accuracy: r.evals.last().and_then(|e| e.accuracy),
            total_wall_ms: r.total_wall_ms,
        })
        .collect();
    let total = |p: PathKind| runs.iter().find(|r| r.path == p).map(|r| r.total_wall_ms);
    let speedup = match (total(PathKind::Baseline), total(PathKind::Serving)) {
        (Some(b), Some(s)) if s > 0.0 => Some(b / s),
        _ => None,
    };
    let final_loss_difference = match summaries.as_slice() {
        [a, b, ..] => match (a.final_eval_loss, b.final_eval_loss) {
            (Some(x), Some(y)) => Some((x - y).abs()),
            _ => None,
        },
        _ => None,
    };
    TrajectoryReport {
        runs: summaries,
        speedup,
        final_loss_difference,
    }
}

#[derive(Serialize)]
struct CurveRow {
    step: u64,
    wall_ms: f64,
    eval_loss: f64,
    eval_acc: Option<f64>,
}

/// `step,wall_ms,eval_loss,eval_acc` rows.
pub fn write_curve_csv(curve: &RunCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, e) in curve.evals.iter().enumerate() {
        w.serialize(CurveRow {
            step: e.step,
            wall_ms: curve.wall_ms.get(i).copied().unwrap_or(f64::NAN),
            eval_loss: e.loss,
            eval_acc: e.accuracy,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(name: &str, path: PathKind, wall: f64, last_loss: f64) -> RunCurve {
        RunCurve {
            name: name.into(),
            path,
            evals: vec![
                EvalSample {
                    step: 0,
                    loss: 1.0,
                    accuracy: Some(0.5),
                },
                EvalSample {
                    step: 10,
                    loss: last_loss,
                    accuracy: Some(0.6),
                },
            ],
            wall_ms: vec![0.0, wall],
            total_wall_ms: wall,
        }
    }

    #[test]
    fn single_run_has_no_speedup() {
        let r = trajectory_report(&[curve("a", PathKind::Serving, 5.0, 0.9)]);
        assert!(r.speedup.is_none() && r.final_loss_difference.is_none());
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("speedup"));
    }

    #[test]
    fn speedup_is_ratio_of_totals() {
        let r = trajectory_report(&[
            curve("b", PathKind::Baseline, 300.0, 0.9),
            curve("s", PathKind::Serving, 40.0, 0.85),
        ]);
        assert_eq!(r.speedup, Some(7.5));
        assert!((r.final_loss_difference.unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn csv_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_curve_csv(&curve("a", PathKind::Serving, 5.0, 0.9), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,wall_ms,eval_loss,eval_acc\n0,0.0,1.0,0.5\n"));
    }
}
