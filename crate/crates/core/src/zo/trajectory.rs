use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::step::ZoStepRecord;
use crate::error::{Result, ZoError};
use crate::numerics::{digest_bytes, Digest};

pub const TRAJECTORY_SCHEMA: &str = "zo-trajectory/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub schema: String,
    /// Execution path that produced the file (`baseline` or `serving`).
    pub path: String,
    pub config_digest: Digest,
    pub model_digest: Digest,
    pub task_digest: Digest,
}

/// Evaluation of the parameters reached after `step` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub step: u64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(TrajectoryHeader),
    Step(ZoStepRecord),
    Eval(EvalSample),
}

/// A run's step records and evaluations, serialized as JSON lines: one
/// header, then evaluations and steps in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub steps: Vec<ZoStepRecord>,
    pub evals: Vec<EvalSample>,
}

impl Trajectory {
    pub fn new(header: TrajectoryHeader) -> Self {
        Self {
            header,
            steps: Vec::new(),
            evals: Vec::new(),
        }
    }

    pub fn final_eval(&self) -> Option<&EvalSample> {
        self.evals.last()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: &Line| {
            out.push_str(&serde_json::to_string(line).expect("trajectory lines serialize"));
            out.push('\n');
        };
        push(&Line::Header(self.header.clone()));
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            while let Some(e) = evals.next_if(|e| e.step <= s.step) {
                push(&Line::Eval(e.clone()));
            }
            push(&Line::Step(s.clone()));
        }
        for e in evals {
            push(&Line::Eval(e.clone()));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    fn from_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Self> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut evals = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| ZoError::input(format!("trajectory line {}: {e}", n + 1)))?;
            match parsed {
                Line::Header(h) if header.is_none() && n == 0 => {
                    if h.schema != TRAJECTORY_SCHEMA {
                        return Err(ZoError::input(format!(
                            "unknown trajectory schema {}",
                            h.schema
                        )));
                    }
                    header = Some(h);
                }
                Line::Header(_) => {
                    return Err(ZoError::input(format!(
                        "unexpected header on line {}",
                        n + 1
                    )))
                }
                Line::Step(s) => steps.push(s),
                Line::Eval(e) => evals.push(e),
            }
        }
        let header = header.ok_or_else(|| ZoError::input("trajectory has no header"))?;
        Ok(Self {
            header,
            steps,
            evals,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        Self::from_lines(f.lines().map(|l| l.map_err(ZoError::from)))
    }

    /// Digest of the serialized file.
    pub fn digest(&self) -> Digest {
        digest_bytes(self.to_jsonl().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> Trajectory {
        let mut t = Trajectory::new(TrajectoryHeader {
            schema: TRAJECTORY_SCHEMA.into(),
            path: "serving".into(),
            config_digest: Digest(1),
            model_digest: Digest(2),
            task_digest: Digest(3),
        });
        for step in 0..4u64 {
            let lp = 0.1 + step as f64 / 3.0;
            let lm = lp - 1e-17 * step as f64 - 0.000123;
            t.steps.push(ZoStepRecord {
                step,
                loss_plus: lp,
                loss_minus: lm,
                coefficient: (lp - lm) / 2e-3,
                beta: -1e-3 * (lp - lm) / 2e-3,
                seed: u64::MAX - step,
                u_digest: Digest(step * 7),
                v_digest: Digest(u64::MAX),
                minibatch_id: Digest(step),
            });
        }
        t.evals.push(EvalSample {
            step: 0,
            loss: 0.7,
            accuracy: Some(0.5),
        });
        t.evals.push(EvalSample {
            step: 2,
            loss: 0.6,
            accuracy: None,
        });
        t.evals.push(EvalSample {
            step: 4,
            loss: 1.0 / 3.0,
            accuracy: Some(0.75),
        });
        t
    }

    #[test]
    fn round_trip_is_exact() {
        let t = sample();
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 1 + 4 + 3);
        let back = Trajectory::parse(&text).unwrap();
        assert_eq!(back, t);
        for (a, b) in back.steps.iter().zip(&t.steps) {
            assert_eq!(a.loss_minus.to_bits(), b.loss_minus.to_bits());
        }
        assert_eq!(back.digest(), t.digest());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        t.write(&p).unwrap();
        assert_eq!(Trajectory::read(&p).unwrap(), t);
    }

    #[test]
    fn evals_precede_the_step_they_describe() {
        let text = sample().to_jsonl();
        let kinds: Vec<&str> = text
            .lines()
            .map(|l| {
                if l.contains("\"eval\"") {
                    "e"
                } else if l.contains("\"step\",") || l.contains("\"kind\":\"step\"") {
                    "s"
                } else {
                    "h"
                }
            })
            .collect();
        assert_eq!(kinds, ["h", "e", "s", "s", "e", "s", "s", "e"]);
    }

    #[test]
    fn malformed_input_rejected() {
        assert!(Trajectory::parse("").is_err());
        assert!(Trajectory::parse("{\"kind\":\"step\"}").is_err());
        let mut text = sample().to_jsonl();
        text = text.replace(TRAJECTORY_SCHEMA, "other/9");
        assert!(Trajectory::parse(&text).is_err());
    }
}
