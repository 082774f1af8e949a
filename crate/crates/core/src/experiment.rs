//! Experiment configuration and orchestration: one TOML file fully
//! determines a run.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::baseline::{run_baseline, BaselineOptions};
use crate::error::{Result, ZoError};
use crate::model::{generate_task, ModelConfig, ModelParams, TaskConfig, TaskSplits};
use crate::numerics::{digest_bytes, sample_gaussian, DenseMatrix, Digest, StreamKey, StreamRole};
use crate::params::{MatrixTarget, ParamSet};
use crate::run::{PathKind, RunOutput, RunSpec};
use crate::runtime::{
    cost_report, run_serving_path, slack_schedule, CostReport, InferenceTrace, Job, Policy,
    Schedule, ScheduleSummary, ServingOptions,
};
use crate::scoring::ConstantScorer;
use crate::verify::{
    strict_compare, trajectory_report, write_curve_csv, RunCurve, StrictCompareReport,
    DEFAULT_LOSS_TOL,
};
use crate::zo::{Estimator, ZoConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathChoice {
    Baseline,
    Serving,
    #[default]
    Both,
}

impl PathChoice {
    pub fn paths(self) -> Vec<PathKind> {
        match self {
            PathChoice::Baseline => vec![PathKind::Baseline],
            PathChoice::Serving => vec![PathKind::Serving],
            PathChoice::Both => vec![PathKind::Baseline, PathKind::Serving],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub path: PathChoice,
    pub steps: u64,
    pub eval_every: u64,
    /// Where artifacts go. Not part of the config digest.
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub zo: ZoConfig,
    pub serving: ServingOptions,
    pub baseline: BaselineOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            path: PathChoice::Both,
            steps: 300,
            eval_every: 50,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            zo: ZoConfig::default(),
            serving: ServingOptions::default(),
            baseline: BaselineOptions::default(),
        }
    }
}

fn parse_error(e: impl std::fmt::Display) -> ZoError {
    ZoError::Config(e.to_string())
}

/// `key.path=value`: the value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ZoError::config(format!("override `{assignment}` is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ZoError::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML, applies `key=value` overrides, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(parse_error)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ZoError::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.steps == 0 {
            return Err(ZoError::config("steps must be at least 1"));
        }
        self.model.validate()?;
        self.task.validate(self.model.vocab)?;
        self.zo.validate()?;
        if self.task.max_prompt_len > self.model.max_prompt_len {
            return Err(ZoError::config(
                "task.max_prompt_len exceeds model.max_prompt_len",
            ));
        }
        if self.path != PathChoice::Baseline && self.zo.estimator == Estimator::DenseMezo {
            return Err(ZoError::config(
                "zo.estimator = dense-mezo only runs on path = \"baseline\"",
            ));
        }
        if self.serving.slot_cap == 0 {
            return Err(ZoError::config("serving.slot_cap must be at least 1"));
        }
        Ok(())
    }

    /// Digest of everything that influences results (the output directory
    /// is excluded).
    pub fn digest(&self) -> Digest {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        digest_bytes(
            serde_json::to_string(&c)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

/// Completed runs of one experiment.
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub model: ModelParams,
    pub task: TaskSplits,
    pub runs: Vec<RunOutput>,
    /// Present when both paths ran.
    pub compare: Option<StrictCompareReport>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let model = ModelParams::init(&config.model)?;
    let task = generate_task(&config.task, config.model.vocab)?;
    let scorer = model.scorer();
    let mut spec = RunSpec::new(&scorer, &model.params, &config.zo, config.steps)
        .with_task(&task, config.eval_every);
    spec.config_digest = Some(config.digest());
    let mut runs = Vec::new();
    for path in config.path.paths() {
        runs.push(match path {
            PathKind::Baseline => run_baseline(&spec, &config.baseline)?.output,
            PathKind::Serving => run_serving_path(&spec, &config.serving)?,
        });
    }
    let compare = match runs.as_slice() {
        [a, b] => Some(strict_compare(
            &a.trajectory,
            &b.trajectory,
            DEFAULT_LOSS_TOL,
        )?),
        _ => None,
    };
    Ok(ExperimentOutcome {
        config: config.clone(),
        model,
        task,
        runs,
        compare,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunFileSummary {
    pub config_digest: Digest,
    pub path: PathKind,
    pub steps: usize,
    pub trajectory_digest: Digest,
    pub model_digest: Digest,
    pub task_digest: Digest,
    pub final_params_digest: Digest,
    pub final_eval_loss: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    pub train_wall_ms: f64,
    pub cost: CostReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    config_digest: Digest,
    #[serde(flatten)]
    inner: &'a T,
}

/// Writes trajectories, evaluation curves, per-run summaries, a config
/// echo and (for two runs) the comparison reports. Returns the files
/// written. JSON and JSON-lines files carry the config digest in their
/// content; CSV files carry it in their name.
pub fn write_artifacts(outcome: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let digest = outcome.config.digest();
    let mut written = Vec::new();
    let echo = dir.join("config.toml");
    std::fs::write(
        &echo,
        format!(
            "# config_digest = \"{digest}\"\n{}",
            outcome.config.to_toml()
        ),
    )?;
    written.push(echo);
    let mut curves = Vec::new();
    for run in &outcome.runs {
        let name = run.path.as_str();
        let traj = dir.join(format!("{name}.trajectory.jsonl"));
        run.trajectory.write(&traj)?;
        written.push(traj);
        let curve = RunCurve::from_run(name, run);
        let csv = dir.join(format!("{name}.eval.{digest}.csv"));
        write_curve_csv(&curve, &csv)?;
        written.push(csv);
        curves.push(curve);
        let summary = RunFileSummary {
            config_digest: digest,
            path: run.path,
            steps: run.trajectory.steps.len(),
            trajectory_digest: run.trajectory.digest(),
            model_digest: run.trajectory.header.model_digest,
            task_digest: run.trajectory.header.task_digest,
            final_params_digest: run.final_params.digest(),
            final_eval_loss: run.trajectory.final_eval().map(|e| e.loss),
            final_eval_accuracy: run.trajectory.final_eval().and_then(|e| e.accuracy),
            train_wall_ms: run.train_wall.as_secs_f64() * 1e3,
            cost: cost_report(&run.meter, &run.times),
        };
        let p = dir.join(format!("{name}.summary.json"));
        write_json(&p, &summary)?;
        written.push(p);
    }
    let report = dir.join("report.json");
    write_json(
        &report,
        &Tagged {
            config_digest: digest,
            inner: &trajectory_report(&curves),
        },
    )?;
    written.push(report);
    if let Some(cmp) = &outcome.compare {
        let p = dir.join("compare.json");
        write_json(
            &p,
            &Tagged {
                config_digest: digest,
                inner: cmp,
            },
        )?;
        written.push(p);
        let p = dir.join("compare.txt");
        std::fs::write(&p, format!("config_digest {digest}\n{}", cmp.to_text()))?;
        written.push(p);
    }
    Ok(written)
}

/// Per-step wall-clock of both paths on dense `dim × dim` matrices with a
/// constant-cost scorer, so only weight traffic differs.
#[derive(Debug, Clone, Serialize)]
pub struct WriteTrafficBench {
    pub dim: usize,
    pub matrices: usize,
    pub steps: u64,
    pub baseline_per_step: Duration,
    pub serving_per_step: Duration,
    pub baseline_cost: CostReport,
    pub serving_cost: CostReport,
}

impl WriteTrafficBench {
    pub fn ratio(&self) -> f64 {
        self.baseline_per_step.as_secs_f64() / self.serving_per_step.as_secs_f64().max(1e-12)
    }
}

pub fn write_traffic_bench(
    dim: usize,
    matrices: usize,
    zo: &ZoConfig,
    steps: u64,
) -> Result<WriteTrafficBench> {
    let mut storage = Vec::with_capacity(matrices);
    let mut targets = Vec::with_capacity(matrices);
    for i in 0..matrices {
        storage.push(
            sample_gaussian(
                StreamKey::new(zo.seed, 0, i as u32, StreamRole::Init),
                dim,
                dim,
            )?
            .scaled(0.02),
        );
        targets.push(MatrixTarget {
            id: i as u32,
            name: format!("w{i}"),
            storage: i,
            col_offset: 0,
            rows: dim,
            cols: dim,
        });
    }
    let params = ParamSet::new(storage, Vec::new(), targets, Vec::new())?;
    let scorer = ConstantScorer { loss: 1.0 };
    let spec = RunSpec::new(&scorer, &params, zo, steps);
    let b = run_baseline(&spec, &BaselineOptions::default())?.output;
    let s = run_serving_path(&spec, &ServingOptions::default())?;
    Ok(WriteTrafficBench {
        dim,
        matrices,
        steps,
        baseline_per_step: b.per_step_wall(),
        serving_per_step: s.per_step_wall(),
        baseline_cost: cost_report(&b.meter, &b.times),
        serving_cost: cost_report(&s.meter, &s.times),
    })
}

/// A slack schedule next to the probe-free replay of the same trace.
#[derive(Debug, Clone, Serialize)]
pub struct SimOutcome {
    pub summary: ScheduleSummary,
    pub probe_free: ScheduleSummary,
    /// p99 high-priority latency with probes minus without, in ticks.
    pub p99_increase: i64,
    #[serde(skip)]
    pub schedule: Schedule,
}

pub fn run_sim(trace: &InferenceTrace, probes: &[Job], policy: Policy) -> Result<SimOutcome> {
    let schedule = slack_schedule(trace, probes, policy)?;
    let alone = slack_schedule(trace, &[], Policy::Slack)?;
    let summary = schedule.summary(trace, probes);
    let probe_free = alone.summary(trace, &[]);
    Ok(SimOutcome {
        p99_increase: summary.high_priority.p99 as i64 - probe_free.high_priority.p99 as i64,
        summary,
        probe_free,
        schedule,
    })
}

/// Dense product used by tests and benches to read a trained delta.
pub fn delta(after: &ParamSet, before: &ParamSet, target: &MatrixTarget) -> Result<DenseMatrix> {
    after.block(target).sub(&before.block(target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_dotted_paths() {
        let cfg = ExperimentConfig::from_toml_str(
            "steps = 10\n[zo]\nrank = 1\n",
            &[
                "zo.learning_rate=0.002".into(),
                "path=serving".into(),
                "model.d_model = 16".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.zo.learning_rate, 0.002);
        assert_eq!(cfg.zo.rank, 1);
        assert_eq!(cfg.path, PathChoice::Serving);
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.steps, 10);
    }

    #[test]
    fn invalid_configs_have_field_diagnostics() {
        let e = ExperimentConfig::from_toml_str("steps = 0", &[]).unwrap_err();
        assert!(e.to_string().contains("steps"));
        let e = ExperimentConfig::from_toml_str("[zo]\nlearning_rat = 1.0", &[]).unwrap_err();
        assert!(e.to_string().contains("learning_rat"), "{e}");
        let e =
            ExperimentConfig::from_toml_str("[zo]\nestimator = \"dense-mezo\"", &[]).unwrap_err();
        assert!(e.to_string().contains("dense-mezo"));
        assert!(ExperimentConfig::from_toml_str("schema_version = 2", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["zo".into()]).is_err());
    }

    #[test]
    fn toml_round_trip_and_digest() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        let moved = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.digest(), cfg.digest());
        let other = ExperimentConfig {
            steps: 7,
            ..cfg.clone()
        };
        assert_ne!(other.digest(), cfg.digest());
    }
}
