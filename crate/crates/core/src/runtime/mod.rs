//! Serving-style execution: paired probes scored against composed adapter
//! views, updates on low-rank factors, and a slack scheduler that places
//! probes in capacity left over by inference traffic.

mod cost;
mod schedule;
mod serving;

pub use crate::run::CostMeter;
pub use cost::{cost_report, ComponentShare, CostReport};
pub use schedule::{
    check_schedule, probes_from_pairs, read_probe_csv, reference_schedule, slack_schedule,
    synthetic_trace, InferenceTrace, Job, LatencyStats, Policy, ProbeJob, Schedule,
    ScheduleSummary, TickUsage,
};
pub use serving::{
    fold_adapter, run_serving_path, DirectionHandle, ProbePair, ProbeStatus, ServingOptions,
    ServingSession,
};
