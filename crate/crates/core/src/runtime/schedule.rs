use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::serving::ProbePair;
use crate::error::{Result, ZoError};
use crate::numerics::{StreamKey, StreamRole};

/// One unit of work: arrives at a tick and needs `cost` capacity units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    #[serde(rename = "arrival_time")]
    pub arrival: u64,
    pub cost: u64,
}

pub type ProbeJob = Job;

/// High-priority inference requests plus the per-tick batch capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub requests: Vec<Job>,
    pub capacity: u64,
}

fn check_jobs(jobs: &[Job], capacity: u64, what: &str) -> Result<()> {
    for (i, j) in jobs.iter().enumerate() {
        if j.cost == 0 {
            return Err(ZoError::input(format!("{what} {i} has zero cost")));
        }
        if i > 0 && j.arrival < jobs[i - 1].arrival {
            return Err(ZoError::input(format!(
                "{what} arrival times decrease at row {i}"
            )));
        }
        if what == "request" && j.cost > capacity {
            return Err(ZoError::input(format!(
                "request {i} costs {} but batch capacity is {capacity}",
                j.cost
            )));
        }
    }
    Ok(())
}

fn read_jobs(path: &Path) -> Result<Vec<Job>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

fn write_jobs(path: &Path, jobs: &[Job]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for j in jobs {
        w.serialize(j)?;
    }
    w.flush()?;
    Ok(())
}

impl InferenceTrace {
    pub fn new(requests: Vec<Job>, capacity: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(ZoError::input("batch capacity must be at least 1"));
        }
        check_jobs(&requests, capacity, "request")?;
        Ok(Self { requests, capacity })
    }

    /// Reads `arrival_time,cost` rows.
    pub fn read_csv(path: &Path, capacity: u64) -> Result<Self> {
        Self::new(read_jobs(path)?, capacity)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_jobs(path, &self.requests)
    }

    pub fn total_cost(&self) -> u64 {
        self.requests.iter().map(|j| j.cost).sum()
    }

    /// Ticks `0..horizon` cover every arrival.
    pub fn horizon(&self) -> u64 {
        self.requests.last().map_or(0, |j| j.arrival + 1)
    }

    /// Enough probe work (in jobs of `probe_cost`) to fill the capacity the
    /// trace leaves over within its horizon, all queued at tick 0.
    pub fn matched_probes(&self, probe_cost: u64) -> Vec<Job> {
        let residual = (self.capacity * self.horizon()).saturating_sub(self.total_cost());
        let n = residual / probe_cost.max(1);
        vec![
            Job {
                arrival: 0,
                cost: probe_cost,
            };
            n as usize
        ]
    }
}

/// Reads probe jobs from `arrival_time,cost` rows.
pub fn read_probe_csv(path: &Path) -> Result<Vec<Job>> {
    let jobs = read_jobs(path)?;
    check_jobs(&jobs, u64::MAX, "probe")?;
    Ok(jobs)
}

/// Two probe jobs (plus and minus) of `probe_cost` per pair, queued at 0.
pub fn probes_from_pairs(pairs: &[ProbePair], probe_cost: u64) -> Vec<Job> {
    vec![
        Job {
            arrival: 0,
            cost: probe_cost,
        };
        2 * pairs.len()
    ]
}

/// Poisson arrivals with uniform costs in `1..=max_cost`, at a mean load of
/// `occupancy` of the capacity.
pub fn synthetic_trace(
    seed: u64,
    events: usize,
    capacity: u64,
    occupancy: f64,
    max_cost: u64,
) -> Result<InferenceTrace> {
    if !(occupancy > 0.0 && occupancy < 1.0) || max_cost == 0 || max_cost > capacity {
        return Err(ZoError::config(
            "trace needs 0 < occupancy < 1 and 1 <= max_cost <= capacity",
        ));
    }
    let mean_cost = (1 + max_cost) as f64 / 2.0;
    let rate = occupancy * capacity as f64 / mean_cost;
    let poisson = Poisson::new(rate).map_err(|e| ZoError::config(e.to_string()))?;
    let mut rng = StreamKey::new(seed, 0, 0, StreamRole::Trace).rng();
    let mut requests = Vec::with_capacity(events);
    let mut tick = 0u64;
    while requests.len() < events {
        let n = poisson.sample(&mut rng) as usize;
        for _ in 0..n.min(events - requests.len()) {
            requests.push(Job {
                arrival: tick,
                cost: rng.random_range(1..=max_cost),
            });
        }
        tick += 1;
    }
    InferenceTrace::new(requests, capacity)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// High-priority requests first; probes fill what is left.
    #[default]
    Slack,
    /// Probes first. Exists only as a contrast: it delays inference.
    ProbeFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickUsage {
    pub tick: u64,
    pub hp_units: u64,
    pub probe_units: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub policy: Policy,
    pub capacity: u64,
    /// Tick at which each request ran, in trace order.
    pub hp_served: Vec<u64>,
    /// Tick at which each probe finished.
    pub probe_done: Vec<u64>,
    /// `(tick, probe, units)` for every slice of probe work.
    pub probe_slices: Vec<(u64, usize, u64)>,
    /// Non-idle ticks only.
    pub ticks: Vec<TickUsage>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

impl LatencyStats {
    /// Nearest-rank percentiles.
    pub fn from_latencies(mut xs: Vec<u64>) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        xs.sort_unstable();
        let n = xs.len();
        let rank = |p: f64| xs[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            count: n,
            mean: xs.iter().sum::<u64>() as f64 / n as f64,
            p50: rank(0.50),
            p90: rank(0.90),
            p99: rank(0.99),
            max: xs[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub policy: Policy,
    pub capacity: u64,
    /// Ticks until all work finished.
    pub makespan: u64,
    /// Latency counts the arrival tick: served on arrival is latency 1.
    pub high_priority: LatencyStats,
    pub probes: LatencyStats,
    pub utilization: f64,
    /// Ticks `0..horizon` covered by the inference trace.
    pub horizon: u64,
    pub residual_capacity: u64,
    pub probe_units_in_horizon: u64,
    /// `probe_units_in_horizon / residual_capacity` (1 when nothing is left
    /// over).
    pub probe_throughput_share: f64,
}

/// Event-driven slack scheduler. Each tick admits queued high-priority
/// requests in FIFO order while they fit (the head never gets overtaken),
/// then gives the leftover capacity to probes, which may be cut at batch
/// boundaries and resume next tick.
pub fn slack_schedule(trace: &InferenceTrace, probes: &[Job], policy: Policy) -> Result<Schedule> {
    let cap = trace.capacity;
    check_jobs(&trace.requests, cap, "request")?;
    check_jobs(probes, u64::MAX, "probe")?;
    let hp = &trace.requests;
    let mut out = Schedule {
        policy,
        capacity: cap,
        hp_served: vec![0; hp.len()],
        probe_done: vec![0; probes.len()],
        probe_slices: Vec::new(),
        ticks: Vec::new(),
    };
    let mut hp_queue: VecDeque<usize> = VecDeque::new();
    let mut probe_queue: VecDeque<(usize, u64)> = VecDeque::new();
    let (mut next_hp, mut next_probe) = (0usize, 0usize);
    let mut k = 0u64;
    loop {
        while next_hp < hp.len() && hp[next_hp].arrival <= k {
            hp_queue.push_back(next_hp);
            next_hp += 1;
        }
        while next_probe < probes.len() && probes[next_probe].arrival <= k {
            probe_queue.push_back((next_probe, probes[next_probe].cost));
            next_probe += 1;
        }
        if hp_queue.is_empty() && probe_queue.is_empty() {
            let next = [hp.get(next_hp), probes.get(next_probe)]
                .into_iter()
                .flatten()
                .map(|j| j.arrival)
                .min();
            match next {
                Some(a) => {
                    k = a;
                    continue;
                }
                None => break,
            }
        }
        let mut residual = cap;
        let mut usage = TickUsage {
            tick: k,
            hp_units: 0,
            probe_units: 0,
        };
        match policy {
            Policy::Slack => {
                fill_hp(
                    hp,
                    &mut hp_queue,
                    k,
                    &mut residual,
                    &mut usage,
                    &mut out.hp_served,
                );
                fill_probes(&mut probe_queue, k, &mut residual, &mut usage, &mut out);
            }
            Policy::ProbeFirst => {
                fill_probes(&mut probe_queue, k, &mut residual, &mut usage, &mut out);
                fill_hp(
                    hp,
                    &mut hp_queue,
                    k,
                    &mut residual,
                    &mut usage,
                    &mut out.hp_served,
                );
            }
        }
        if usage.hp_units + usage.probe_units > 0 {
            out.ticks.push(usage);
        }
        k += 1;
    }
    Ok(out)
}

fn fill_hp(
    hp: &[Job],
    queue: &mut VecDeque<usize>,
    k: u64,
    residual: &mut u64,
    usage: &mut TickUsage,
    served: &mut [u64],
) {
    while let Some(&i) = queue.front() {
        if hp[i].cost > *residual {
            break;
        }
        *residual -= hp[i].cost;
        usage.hp_units += hp[i].cost;
        served[i] = k;
        queue.pop_front();
    }
}

fn fill_probes(
    queue: &mut VecDeque<(usize, u64)>,
    k: u64,
    residual: &mut u64,
    usage: &mut TickUsage,
    out: &mut Schedule,
) {
    while *residual > 0 {
        let Some((p, rem)) = queue.front_mut() else {
            break;
        };
        let take = (*rem).min(*residual);
        *rem -= take;
        *residual -= take;
        usage.probe_units += take;
        out.probe_slices.push((k, *p, take));
        if *rem == 0 {
            out.probe_done[*p] = k;
            queue.pop_front();
        }
    }
}

/// Straightforward tick-by-tick, unit-by-unit simulator of the slack
/// policy, used to cross-check [`slack_schedule`] on small traces.
pub fn reference_schedule(trace: &InferenceTrace, probes: &[Job]) -> Schedule {
    let cap = trace.capacity;
    let hp = &trace.requests;
    let mut served: Vec<Option<u64>> = vec![None; hp.len()];
    let mut remaining: Vec<u64> = probes.iter().map(|p| p.cost).collect();
    let mut done = vec![0; probes.len()];
    let mut slices = Vec::new();
    let mut ticks = Vec::new();
    let mut k = 0u64;
    while served.iter().any(|s| s.is_none()) || remaining.iter().any(|&r| r > 0) {
        let mut used_hp = 0;
        // Head-of-line FIFO: stop at the first waiting request that does
        // not fit.
        for i in 0..hp.len() {
            if served[i].is_some() || hp[i].arrival > k {
                continue;
            }
            if used_hp + hp[i].cost > cap {
                break;
            }
            used_hp += hp[i].cost;
            served[i] = Some(k);
        }
        let mut used_probe = 0;
        for _unit in used_hp..cap {
            let Some(p) = (0..probes.len()).find(|&p| probes[p].arrival <= k && remaining[p] > 0)
            else {
                break;
            };
            remaining[p] -= 1;
            used_probe += 1;
            match slices.last_mut() {
                Some((t, q, n)) if *t == k && *q == p => *n += 1,
                _ => slices.push((k, p, 1)),
            }
            if remaining[p] == 0 {
                done[p] = k;
            }
        }
        if used_hp + used_probe > 0 {
            ticks.push(TickUsage {
                tick: k,
                hp_units: used_hp,
                probe_units: used_probe,
            });
        }
        k += 1;
    }
    Schedule {
        policy: Policy::Slack,
        capacity: cap,
        hp_served: served.into_iter().map(|s| s.expect("all served")).collect(),
        probe_done: done,
        probe_slices: slices,
        ticks,
    }
}

/// Verifies capacity, FIFO order, probe accounting, work conservation and
/// the absence of priority inversion. Returns the first violation found.
pub fn check_schedule(trace: &InferenceTrace, probes: &[Job], s: &Schedule) -> Result<()> {
    let fail = |msg: String| Err(ZoError::input(msg));
    let hp = &trace.requests;
    let cap = trace.capacity;
    if s.hp_served.len() != hp.len() || s.probe_done.len() != probes.len() {
        return fail("schedule does not cover every job".into());
    }
    for (i, (&t, j)) in s.hp_served.iter().zip(hp).enumerate() {
        if t < j.arrival {
            return fail(format!("request {i} served before it arrived"));
        }
        if i > 0 && t < s.hp_served[i - 1] {
            return fail(format!("request {i} overtook request {}", i - 1));
        }
    }
    let last = s.ticks.last().map_or(0, |u| u.tick + 1);
    let mut hp_units = vec![0u64; last as usize];
    for (&t, j) in s.hp_served.iter().zip(hp) {
        hp_units[t as usize] += j.cost;
    }
    let mut probe_units = vec![0u64; last as usize];
    let mut delivered = vec![0u64; probes.len()];
    let mut first_slice = vec![u64::MAX; probes.len()];
    for &(t, p, n) in &s.probe_slices {
        probe_units[t as usize] += n;
        delivered[p] += n;
        first_slice[p] = first_slice[p].min(t);
        if t > s.probe_done[p] {
            return fail(format!("probe {p} worked on after completion"));
        }
    }
    for (p, j) in probes.iter().enumerate() {
        if delivered[p] != j.cost {
            return fail(format!(
                "probe {p} got {} of {} units",
                delivered[p], j.cost
            ));
        }
        if first_slice[p] < j.arrival {
            return fail(format!("probe {p} ran before it arrived"));
        }
    }
    let mut recorded = vec![(0u64, 0u64); last as usize];
    for u in &s.ticks {
        recorded[u.tick as usize] = (u.hp_units, u.probe_units);
    }
    for k in 0..last as usize {
        if recorded[k] != (hp_units[k], probe_units[k]) {
            return fail(format!("tick {k} usage does not match the job assignments"));
        }
        if hp_units[k] + probe_units[k] > cap {
            return fail(format!("tick {k} exceeds capacity"));
        }
        let kt = k as u64;
        if probe_units[k] > 0 {
            // Priority inversion: the oldest waiting request would have fit
            // in the capacity probes took.
            if let Some(i) = (0..hp.len()).find(|&i| hp[i].arrival <= kt && s.hp_served[i] > kt) {
                if hp[i].cost <= cap - hp_units[k] {
                    return fail(format!("tick {k}: probes delayed request {i}"));
                }
            }
        }
        let pending = (0..probes.len()).any(|p| probes[p].arrival <= kt && s.probe_done[p] > kt);
        if pending && hp_units[k] + probe_units[k] < cap {
            return fail(format!("tick {k}: capacity idle while probes waited"));
        }
    }
    Ok(())
}

impl Schedule {
    pub fn summary(&self, trace: &InferenceTrace, probes: &[Job]) -> ScheduleSummary {
        let hp_lat = self
            .hp_served
            .iter()
            .zip(&trace.requests)
            .map(|(&t, j)| t - j.arrival + 1)
            .collect();
        let probe_lat = self
            .probe_done
            .iter()
            .zip(probes)
            .map(|(&t, j)| t - j.arrival + 1)
            .collect();
        let makespan = self.ticks.last().map_or(0, |u| u.tick + 1);
        let used: u64 = self.ticks.iter().map(|u| u.hp_units + u.probe_units).sum();
        let horizon = if trace.requests.is_empty() {
            makespan
        } else {
            trace.horizon()
        };
        let in_horizon = self.ticks.iter().filter(|u| u.tick < horizon);
        let (hp_in, probe_in) =
            in_horizon.fold((0, 0), |(a, b), u| (a + u.hp_units, b + u.probe_units));
        let residual = (self.capacity * horizon).saturating_sub(hp_in);
        ScheduleSummary {
            policy: self.policy,
            capacity: self.capacity,
            makespan,
            high_priority: LatencyStats::from_latencies(hp_lat),
            probes: LatencyStats::from_latencies(probe_lat),
            utilization: if makespan == 0 {
                0.0
            } else {
                used as f64 / (self.capacity * makespan) as f64
            },
            horizon,
            residual_capacity: residual,
            probe_units_in_horizon: probe_in,
            probe_throughput_share: if residual == 0 {
                1.0
            } else {
                probe_in as f64 / residual as f64
            },
        }
    }

    /// Per-tick usage as `tick,hp_units,probe_units` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for u in &self.ticks {
            w.serialize(u)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(arrival: u64, cost: u64) -> Job {
        Job { arrival, cost }
    }

    #[test]
    fn no_probes_matches_probe_free_run() {
        let trace =
            InferenceTrace::new(vec![job(0, 3), job(0, 3), job(1, 2), job(5, 4)], 4).unwrap();
        let s = slack_schedule(&trace, &[], Policy::Slack).unwrap();
        assert_eq!(s.hp_served, vec![0, 1, 2, 5]);
        assert!(s.probe_slices.is_empty());
        check_schedule(&trace, &[], &s).unwrap();
    }

    #[test]
    fn empty_trace_gives_probes_full_capacity() {
        let trace = InferenceTrace::new(vec![], 4).unwrap();
        let probes = vec![job(0, 3), job(0, 3), job(0, 5)];
        let s = slack_schedule(&trace, &probes, Policy::Slack).unwrap();
        let sum = s.summary(&trace, &probes);
        assert_eq!(sum.makespan, 11u64.div_ceil(4));
        assert_eq!(s.probe_done, vec![0, 1, 2]);
        check_schedule(&trace, &probes, &s).unwrap();
    }

    #[test]
    fn probe_first_is_flagged_as_inversion() {
        let trace = InferenceTrace::new(vec![job(0, 2)], 4).unwrap();
        let probes = vec![job(0, 8)];
        let s = slack_schedule(&trace, &probes, Policy::ProbeFirst).unwrap();
        assert_eq!(s.hp_served, vec![2]);
        assert!(check_schedule(&trace, &probes, &s).is_err());
        let ok = slack_schedule(&trace, &probes, Policy::Slack).unwrap();
        assert_eq!(ok.hp_served, vec![0]);
        check_schedule(&trace, &probes, &ok).unwrap();
    }

    #[test]
    fn malformed_traces_rejected() {
        assert!(InferenceTrace::new(vec![job(3, 1), job(2, 1)], 4).is_err());
        assert!(InferenceTrace::new(vec![job(0, 5)], 4).is_err());
        assert!(InferenceTrace::new(vec![job(0, 0)], 4).is_err());
        assert!(InferenceTrace::new(vec![], 0).is_err());
    }

    #[test]
    fn percentiles_nearest_rank() {
        let s = LatencyStats::from_latencies((1..=100).collect());
        assert_eq!((s.p50, s.p90, s.p99, s.max), (50, 90, 99, 100));
        assert_eq!(LatencyStats::from_latencies(vec![7]).p99, 7);
    }

    #[test]
    fn csv_round_trip() {
        let trace = synthetic_trace(3, 50, 8, 0.4, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        trace.write_csv(&p).unwrap();
        assert_eq!(InferenceTrace::read_csv(&p, 8).unwrap(), trace);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("arrival_time,cost"));
    }
}
