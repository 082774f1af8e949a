//! Step-by-step comparison of trajectories and low-rank checks.

mod compare;
mod rank;
mod report;

pub use compare::{
    check_compatible, deltas, final_loss_difference, sign_match, strict_compare, SignBin,
    SignMatchReport, StrictCompareReport, DEFAULT_CROSS_PRECISION_TOL, DEFAULT_LOSS_TOL,
    DEFAULT_TAU,
};
pub use rank::{rank_check, singular_values};
pub use report::{trajectory_report, write_curve_csv, RunCurve, RunSummary, TrajectoryReport};
