use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};
use crate::zo::Trajectory;

pub const DEFAULT_TAU: f64 = 0.005;
/// Same arithmetic on both sides.
pub const DEFAULT_LOSS_TOL: f64 = 1e-12;
/// One side scored in single precision.
pub const DEFAULT_CROSS_PRECISION_TOL: f64 = 0.05;

/// `L₊ − L₋` per step.
pub fn deltas(t: &Trajectory) -> Vec<f64> {
    t.steps.iter().map(|s| s.loss_plus - s.loss_minus).collect()
}

/// Three-way sign; NaN has none and never matches.
fn sign(x: f64) -> Option<i8> {
    if x.is_nan() {
        None
    } else if x > 0.0 {
        Some(1)
    } else if x < 0.0 {
        Some(-1)
    } else {
        Some(0)
    }
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignBin {
    /// Bounds on `|Δᴬ|`, lower inclusive.
    pub lo: f64,
    pub hi: f64,
    pub total: usize,
    pub matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignMatchReport {
    /// Which pairs were compared.
    pub population: String,
    pub total: usize,
    pub matches: usize,
    pub overall: f64,
    pub tau: f64,
    pub high_signal_total: usize,
    pub high_signal_matches: usize,
    pub high_signal: f64,
    pub bins: Vec<SignBin>,
}

/// Sign agreement of paired loss differences. The high-signal subset is
/// `|Δᴬ| ≥ tau`.
pub fn sign_match(a: &[f64], b: &[f64], tau: f64) -> Result<SignMatchReport> {
    if a.len() != b.len() {
        return Err(ZoError::input(format!(
            "cannot align {} differences with {}",
            a.len(),
            b.len()
        )));
    }
    let edges = [
        0.0,
        0.1 * tau,
        0.5 * tau,
        tau,
        2.0 * tau,
        10.0 * tau,
        f64::INFINITY,
    ];
    let mut bins: Vec<SignBin> = edges
        .windows(2)
        .map(|w| SignBin {
            lo: w[0],
            hi: w[1],
            total: 0,
            matches: 0,
        })
        .collect();
    let (mut matches, mut hs_total, mut hs_matches) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        let ok = sign(x).is_some() && sign(x) == sign(y);
        matches += ok as usize;
        if x.abs() >= tau {
            hs_total += 1;
            hs_matches += ok as usize;
        }
        if let Some(bin) = bins
            .iter_mut()
            .find(|bin| x.abs() >= bin.lo && x.abs() < bin.hi)
        {
            bin.total += 1;
            bin.matches += ok as usize;
        }
    }
    Ok(SignMatchReport {
        population: format!("all {} aligned steps of the compared runs", a.len()),
        total: a.len(),
        matches,
        overall: fraction(matches, a.len()),
        tau,
        high_signal_total: hs_total,
        high_signal_matches: hs_matches,
        high_signal: fraction(hs_matches, hs_total),
        bins,
    })
}

impl SignMatchReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("sign match over {}\n", self.population);
        let _ = writeln!(
            s,
            "overall      {}/{} ({:.2}%)",
            self.matches,
            self.total,
            100.0 * self.overall
        );
        let _ = writeln!(
            s,
            "|delta|>={}  {}/{} ({:.2}%)",
            self.tau,
            self.high_signal_matches,
            self.high_signal_total,
            100.0 * self.high_signal
        );
        for b in &self.bins {
            let _ = writeln!(
                s,
                "  [{:.1e}, {:.1e})  {}/{}",
                b.lo, b.hi, b.matches, b.total
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrictCompareReport {
    pub steps: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub seed_mismatches: usize,
    pub digest_mismatches: usize,
    /// Steps whose U or V digest differs.
    pub digest_mismatch_steps: Vec<u64>,
    /// Informational; not part of the acceptance rule.
    pub minibatch_mismatches: usize,
    pub max_abs_dloss_plus: f64,
    pub max_abs_dloss_minus: f64,
    pub loss_tol: f64,
    pub final_loss_difference: Option<f64>,
}

impl StrictCompareReport {
    pub fn passed(&self) -> bool {
        self.accepted == self.steps
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accepted steps      {}/{}", self.accepted, self.steps);
        let _ = writeln!(
            s,
            "seed mismatches     {}/{}",
            self.seed_mismatches, self.steps
        );
        let _ = writeln!(
            s,
            "digest mismatches   {}/{}",
            self.digest_mismatches, self.steps
        );
        let _ = writeln!(s, "max |dL+|           {:.6e}", self.max_abs_dloss_plus);
        let _ = writeln!(s, "max |dL-|           {:.6e}", self.max_abs_dloss_minus);
        let _ = writeln!(s, "loss tolerance      {:.1e}", self.loss_tol);
        match self.final_loss_difference {
            Some(d) => {
                let _ = writeln!(s, "final loss diff     {d:.6e}");
            }
            None => s.push_str("final loss diff     n/a\n"),
        }
        s
    }
}

/// `|final eval loss A − final eval loss B|`, when both runs evaluated.
pub fn final_loss_difference(a: &Trajectory, b: &Trajectory) -> Option<f64> {
    Some((a.final_eval()?.loss - b.final_eval()?.loss).abs())
}

/// Errors unless both runs start from the same model and task.
pub fn check_compatible(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.header.model_digest != b.header.model_digest {
        return Err(ZoError::input(format!(
            "model digests differ: {} vs {}",
            a.header.model_digest, b.header.model_digest
        )));
    }
    if a.header.task_digest != b.header.task_digest {
        return Err(ZoError::input(format!(
            "task digests differ: {} vs {}",
            a.header.task_digest, b.header.task_digest
        )));
    }
    Ok(())
}

/// Per-step check of seed, U/V digests and both losses. A step is
/// accepted iff all four hold.
pub fn strict_compare(
    a: &Trajectory,
    b: &Trajectory,
    loss_tol: f64,
) -> Result<StrictCompareReport> {
    if a.header.schema != b.header.schema {
        return Err(ZoError::input(format!(
            "schema {} cannot be compared with {}",
            a.header.schema, b.header.schema
        )));
    }
    if a.steps.len() != b.steps.len() {
        return Err(ZoError::input(format!(
            "step counts differ: {} vs {}",
            a.steps.len(),
            b.steps.len()
        )));
    }
    let mut r = StrictCompareReport {
        steps: a.steps.len(),
        accepted: 0,
        rejected: 0,
        seed_mismatches: 0,
        digest_mismatches: 0,
        digest_mismatch_steps: Vec::new(),
        minibatch_mismatches: 0,
        max_abs_dloss_plus: 0.0,
        max_abs_dloss_minus: 0.0,
        loss_tol,
        final_loss_difference: final_loss_difference(a, b),
    };
    for (x, y) in a.steps.iter().zip(&b.steps) {
        if x.step != y.step {
            return Err(ZoError::input(format!(
                "steps misaligned: {} vs {}",
                x.step, y.step
            )));
        }
        let seed_ok = x.seed == y.seed;
        let digest_ok = x.u_digest == y.u_digest && x.v_digest == y.v_digest;
        let dp = (x.loss_plus - y.loss_plus).abs();
        let dm = (x.loss_minus - y.loss_minus).abs();
        r.max_abs_dloss_plus = r.max_abs_dloss_plus.max(dp);
        r.max_abs_dloss_minus = r.max_abs_dloss_minus.max(dm);
        r.seed_mismatches += !seed_ok as usize;
        if !digest_ok {
            r.digest_mismatches += 1;
            r.digest_mismatch_steps.push(x.step);
        }
        r.minibatch_mismatches += (x.minibatch_id != y.minibatch_id) as usize;
        // NaN differences fail the tolerance test.
        if seed_ok && digest_ok && dp <= loss_tol && dm <= loss_tol {
            r.accepted += 1;
        } else {
            r.rejected += 1;
        }
    }
    Ok(r)
}
