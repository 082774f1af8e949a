use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use zoserve_core::experiment::{
    run_experiment, run_sim, write_artifacts, write_traffic_bench, ExperimentConfig,
};
use zoserve_core::runtime::{read_probe_csv, synthetic_trace, CostReport, InferenceTrace, Policy};
use zoserve_core::verify::{
    check_compatible, deltas, sign_match, strict_compare, DEFAULT_LOSS_TOL, DEFAULT_TAU,
};
use zoserve_core::zo::Trajectory;
use zoserve_core::ZoError;

#[derive(Parser)]
#[command(
    name = "zoserve",
    version,
    about = "Zeroth-order fine-tuning on a serving-style runtime"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config. Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set zo.rank=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let mut cfg = ExperimentConfig::from_toml_str(&text, &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Slack,
    ProbeFirst,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Slack => Policy::Slack,
            PolicyArg::ProbeFirst => Policy::ProbeFirst,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Train(ConfigArgs),
    /// Compare two trajectory files step by step.
    Verify {
        a: PathBuf,
        b: PathBuf,
        /// Compare even if the model or task digests differ.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = DEFAULT_LOSS_TOL)]
        loss_tol: f64,
        /// High-signal threshold on |L+ - L-|.
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Accept on full high-signal sign agreement instead of the strict
        /// per-step rule (for runs at different precisions).
        #[arg(long)]
        sign_only: bool,
        /// Directory for the JSON reports.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run both paths and print where the cost goes.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also time the update paths on `DIM x DIM` weights with scoring
        /// stubbed out.
        #[arg(long, value_name = "DIM")]
        micro: Option<usize>,
    },
    /// Schedule probe jobs into the slack of an inference trace.
    Sim {
        /// `arrival_time,cost` CSV of high-priority requests.
        #[arg(long, conflicts_with = "synthetic")]
        trace: Option<PathBuf>,
        /// Generate a trace with this many requests instead.
        #[arg(long, value_name = "EVENTS")]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 0.4)]
        occupancy: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `arrival_time,cost` CSV of probe jobs.
        #[arg(long, conflicts_with = "matched")]
        probes: Option<PathBuf>,
        /// Queue enough probes of this cost to fill the residual capacity.
        #[arg(long, value_name = "PROBE_COST")]
        matched: Option<u64>,
        #[arg(long, default_value_t = 16)]
        capacity: u64,
        #[arg(long, value_enum, default_value_t = PolicyArg::Slack)]
        policy: PolicyArg,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn train(args: &ConfigArgs) -> Result<bool> {
    let cfg = args.load()?;
    let outcome = run_experiment(&cfg)?;
    let files = write_artifacts(&outcome, &cfg.output_dir)?;
    println!("config_digest {}", cfg.digest());
    for run in &outcome.runs {
        let last = run.trajectory.final_eval();
        println!(
            "{:<9} trajectory {}  final eval loss {}",
            run.path.as_str(),
            run.trajectory.digest(),
            last.map_or("n/a".into(), |e| format!("{:.6}", e.loss))
        );
    }
    if let Some(cmp) = &outcome.compare {
        print!("{}", cmp.to_text());
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn verify(
    a: &Path,
    b: &Path,
    force: bool,
    loss_tol: f64,
    tau: f64,
    sign_only: bool,
    out: Option<&Path>,
) -> Result<bool> {
    let ta = Trajectory::read(a).with_context(|| format!("reading {}", a.display()))?;
    let tb = Trajectory::read(b).with_context(|| format!("reading {}", b.display()))?;
    if let Err(e) = check_compatible(&ta, &tb) {
        if !force {
            bail!("{e} (use --force to compare anyway)");
        }
        eprintln!("warning: {e}");
    }
    let strict = strict_compare(&ta, &tb, loss_tol)?;
    let mut signs = sign_match(&deltas(&ta), &deltas(&tb), tau)?;
    signs.population = format!("all {} steps of both runs", signs.total);
    println!("{}", strict.to_text());
    print!("{}", signs.to_text());
    let passed = if sign_only {
        signs.high_signal_matches == signs.high_signal_total
    } else {
        strict.passed()
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("strict_compare.json"), &strict)?;
        write_json(&dir.join("sign_match.json"), &signs)?;
    }
    println!("{}", if passed { "PASS" } else { "FAIL" });
    Ok(passed)
}

fn bench(args: &ConfigArgs, micro: Option<usize>) -> Result<bool> {
    let cfg = args.load()?;
    let outcome = run_experiment(&cfg)?;
    let mut reports = Vec::new();
    for run in &outcome.runs {
        let report = CostReport::for_run(run);
        println!(
            "{} ({} steps, {:.3} ms/step)",
            run.path.as_str(),
            run.trajectory.steps.len(),
            run.per_step_wall().as_secs_f64() * 1e3
        );
        println!("{}", report.to_table());
        reports.push((run.path.as_str(), report));
    }
    if let [b, s] = outcome.runs.as_slice() {
        let ratio = b.per_step_wall().as_secs_f64() / s.per_step_wall().as_secs_f64();
        println!("per-step speedup (baseline / serving): {ratio:.2}x");
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let digest = cfg.digest();
    let mut json = serde_json::json!({
        "config_digest": digest,
        "runs": reports.iter().map(|(p, r)| serde_json::json!({"path": p, "cost": r})).collect::<Vec<_>>(),
    });
    if let Some(dim) = micro {
        let m = write_traffic_bench(dim, 1, &cfg.zo, cfg.zo.nu.max(1))?;
        println!(
            "micro {dim}x{dim}: baseline {:.3} ms/step, serving {:.3} ms/step, ratio {:.2}x",
            m.baseline_per_step.as_secs_f64() * 1e3,
            m.serving_per_step.as_secs_f64() * 1e3,
            m.ratio()
        );
        json["micro"] = serde_json::to_value(&m)?;
    }
    let p = cfg.output_dir.join("bench.json");
    write_json(&p, &json)?;
    println!("wrote {}", p.display());
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn sim(
    trace: Option<&Path>,
    synthetic: Option<usize>,
    occupancy: f64,
    seed: u64,
    probes: Option<&Path>,
    matched: Option<u64>,
    capacity: u64,
    policy: Policy,
    out: Option<&Path>,
) -> Result<bool> {
    let trace = match (trace, synthetic) {
        (Some(p), _) => InferenceTrace::read_csv(p, capacity)
            .with_context(|| format!("reading trace {}", p.display()))?,
        (None, Some(n)) => synthetic_trace(seed, n, capacity, occupancy, capacity.div_ceil(2))?,
        (None, None) => bail!("one of --trace or --synthetic is required"),
    };
    let jobs = match (probes, matched) {
        (Some(p), _) => {
            read_probe_csv(p).with_context(|| format!("reading probes {}", p.display()))?
        }
        (None, Some(cost)) => trace.matched_probes(cost),
        (None, None) => Vec::new(),
    };
    let outcome = run_sim(&trace, &jobs, policy)?;
    let s = &outcome.summary;
    let f = &outcome.probe_free;
    println!(
        "requests {}  probes {}  capacity {}",
        trace.requests.len(),
        jobs.len(),
        capacity
    );
    println!("                 p50   p90   p99   max   mean");
    for (name, l) in [
        ("probe-free hp", &f.high_priority),
        ("with probes hp", &s.high_priority),
        ("probes", &s.probes),
    ] {
        println!(
            "{name:<15} {:>5} {:>5} {:>5} {:>5} {:>6.2}",
            l.p50, l.p90, l.p99, l.max, l.mean
        );
    }
    println!("p99 increase     {} ticks", outcome.p99_increase);
    println!(
        "probe share of residual capacity {:.2}%",
        100.0 * s.probe_throughput_share
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        trace.write_csv(&dir.join("trace.csv"))?;
        outcome.schedule.write_csv(&dir.join("schedule.csv"))?;
        write_json(&dir.join("sim.json"), &outcome)?;
        println!("wrote {}", dir.display());
    }
    Ok(true)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => train(&args),
        Command::Verify {
            a,
            b,
            force,
            loss_tol,
            tau,
            sign_only,
            out,
        } => verify(&a, &b, force, loss_tol, tau, sign_only, out.as_deref()),
        Command::Bench { config, micro } => bench(&config, micro),
        Command::Sim {
            trace,
            synthetic,
            occupancy,
            seed,
            probes,
            matched,
            capacity,
            policy,
            out,
        } => sim(
            trace.as_deref(),
            synthetic,
            occupancy,
            seed,
            probes.as_deref(),
            matched,
            capacity,
            policy.into(),
            out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<ZoError>() {
                Some(ZoError::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
