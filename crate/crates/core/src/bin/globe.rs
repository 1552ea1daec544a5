use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use globe::controller::SlotRecord;
use globe::env::{Environment, ObservationSource, Trace};
use globe::harness::experiments::{
    self, convergence, snapshot, sweep, write_atomic, Axis, AxisValue, ConvergenceSummary, RunReport,
};
use globe::harness::{run_on, Built, ConfigError, PolicyKind, Scenario, Shared};

#[derive(Parser)]
#[command(name = "globe", version, about = "Load-balancing controller and simulator for energy-harvesting edge base stations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file; the bundled preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.horizon`.
    #[arg(long, short = 'T')]
    horizon: Option<u64>,
    /// Output directory.
    #[arg(long, env = "GLOBE_OUT_DIR", default_value = "globe-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one policy, or all four on a shared trace (`--policy all`).
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "globe")]
        policy: String,
    },
    /// Matched-seed replicates across values of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "globe")]
        policy: PolicyKind,
        /// v, grid_price_mean or workload_intensity.
        #[arg(long)]
        axis: Axis,
        /// Comma-separated; `none` on the price axis disables the grid.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<AxisValue>,
        #[arg(long, default_value_t = 5)]
        replicates: usize,
    },
    /// Offered versus served load per BS in one slot.
    Snapshot {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "globe")]
        policy: PolicyKind,
        #[arg(long)]
        slot: u64,
    },
    /// Warm and cold dual-loop statistics over `--horizon` slots.
    Convergence {
        #[command(flatten)]
        common: Common,
        /// Slot whose full iteration log is written.
        #[arg(long)]
        dump_slot: Option<u64>,
    },
    #[command(subcommand)]
    Trace(TraceCmd),
}

#[derive(Subcommand)]
enum TraceCmd {
    /// Write the scenario's exogenous inputs to `trace.csv`.
    Record {
        #[command(flatten)]
        common: Common,
    },
    /// Run a policy on a recorded trace.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "globe")]
        policy: PolicyKind,
    },
}

fn load(common: &Common) -> Result<(Scenario, Built)> {
    load_with(common, None)
}

fn load_with(common: &Common, default_horizon: Option<u64>) -> Result<(Scenario, Built)> {
    let mut s = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Scenario::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => Scenario::preset(),
    };
    if let Some(seed) = common.seed {
        s.run.seed = seed;
    }
    if let Some(h) = common.horizon.or(default_horizon) {
        s.run.horizon = h;
    }
    let built = s.build()?;
    Ok((s, built))
}

fn write_csv_file<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), experiments::ExperimentError>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_rows(path: &Path, n_bs: usize, rows: &[SlotRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SlotRecord::csv_header(n_bs))?;
    for r in rows {
        w.write_record(r.csv_row())?;
    }
    let buf = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    write_atomic(path, &buf).with_context(|| format!("writing {}", path.display()))
}

/// Runs one policy and writes `<policy>_slots.csv` and `<policy>_summary.json`.
fn run_and_write<S: ObservationSource + ?Sized>(
    built: &Built,
    kind: PolicyKind,
    source: &mut S,
    seed: u64,
    horizon: u64,
    out: &Path,
) -> Result<RunReport> {
    let mut rows = Vec::with_capacity(horizon as usize);
    let t0 = Instant::now();
    let summary = run_on(built, kind, source, horizon, Some(&mut rows))?;
    let report = RunReport::new(summary, built, seed, horizon, t0.elapsed().as_secs_f64());
    write_rows(&out.join(format!("{kind}_slots.csv")), built.network.n_bs(), &rows)?;
    write_json(&out.join(format!("{kind}_summary.json")), &report)?;
    eprintln!(
        "{kind}: avg cost {:.4}, mean battery {:.1} (theta {:.1}), {:.2}s",
        report.summary.avg_cost,
        report.summary.mean_battery,
        built.params.theta,
        report.wall_time_s
    );
    Ok(report)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // thiserror messages already embed their sources; print each new piece once
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.contains(c.trim()) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            if e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { common, policy } => {
            let (s, built) = load(&common)?;
            let (seed, horizon) = (s.run.seed, s.run.horizon);
            if policy.eq_ignore_ascii_case("all") {
                let env = Environment::new(built.network.clone(), built.env.clone())?;
                let obs: Vec<_> = (0..horizon).map(|t| env.observation_at(t)).collect();
                let mut reports = Vec::new();
                for kind in PolicyKind::ALL {
                    reports.push(run_and_write(&built, kind, &mut Shared(&obs), seed, horizon, &common.out)?);
                }
                write_json(&common.out.join("comparison.json"), &reports)?;
            } else {
                let kind: PolicyKind = policy.parse().map_err(anyhow::Error::msg)?;
                let mut env = Environment::new(built.network.clone(), built.env.clone())?;
                run_and_write(&built, kind, &mut env, seed, horizon, &common.out)?;
            }
        }
        Cmd::Sweep { common, policy, axis, values, replicates } => {
            let (s, _) = load(&common)?;
            let t0 = Instant::now();
            let points = sweep(&s, axis, &values, replicates, s.run.horizon, policy)?;
            let stem = format!("sweep_{}_{policy}", serde_json::to_value(axis)?.as_str().unwrap_or("axis"));
            write_csv_file(&common.out.join(format!("{stem}.csv")), |w| experiments::write_sweep_csv(&points, w))?;
            write_json(
                &common.out.join(format!("{stem}.json")),
                &serde_json::json!({
                    "axis": axis,
                    "policy": policy,
                    "replicates": replicates,
                    "horizon": s.run.horizon,
                    "base_seed": s.run.seed,
                    "config_digest": s.digest(),
                    "wall_time_s": t0.elapsed().as_secs_f64(),
                    "points": points,
                }),
            )?;
            for p in &points {
                eprintln!("{} = {}: cost {:.4} +- {:.4}, battery {:.1}", stem, p.axis_value, p.mean_cost, p.ci95, p.mean_battery);
            }
        }
        Cmd::Snapshot { common, policy, slot } => {
            let (s, built) = load(&common)?;
            let mut env = Environment::new(built.network.clone(), built.env.clone())?;
            let rows = snapshot(&built, policy, &mut env, slot, s.run.horizon)?;
            let path = common.out.join(format!("snapshot_{policy}_t{slot}.csv"));
            write_csv_file(&path, |w| experiments::write_snapshot_csv(&rows, w))?;
            eprintln!("wrote {}", path.display());
        }
        Cmd::Convergence { common, dump_slot } => {
            let (s, built) = load(&common)?;
            let mut env = Environment::new(built.network.clone(), built.env.clone())?;
            let (slots, log) = convergence(&built, &mut env, s.run.horizon, dump_slot)?;
            write_csv_file(&common.out.join("convergence_slots.csv"), |w| experiments::write_convergence_csv(&slots, w))?;
            if let Some(t) = dump_slot {
                write_csv_file(&common.out.join(format!("convergence_t{t}.csv")), |w| {
                    experiments::write_iterations_csv(&log, built.network.n_bs(), w)
                })?;
            }
            let summary = ConvergenceSummary::of(&slots, built.params.dual.violation_tol);
            write_json(&common.out.join("convergence_summary.json"), &summary)?;
            eprintln!(
                "converged on {:.2}% of {} slots; median iterations warm {} / cold {}",
                100.0 * summary.converged_fraction,
                summary.slots,
                summary.median_warm_iterations,
                summary.median_cold_iterations
            );
        }
        Cmd::Trace(TraceCmd::Record { common }) => {
            let (s, built) = load(&common)?;
            let env = Environment::new(built.network.clone(), built.env.clone())?;
            let trace = env.record(s.run.horizon, &built.digest);
            let mut buf = Vec::new();
            trace.write_csv(&mut buf)?;
            let path = common.out.join("trace.csv");
            write_atomic(&path, &buf)?;
            eprintln!("wrote {} slots to {}", trace.len(), path.display());
        }
        Cmd::Trace(TraceCmd::Replay { common, trace, policy }) => {
            let file = std::fs::File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
            let tr = Trace::read_csv(std::io::BufReader::new(file))?;
            let (s, built) = load_with(&common, Some(tr.len() as u64))?;
            if tr.n_bs != built.network.n_bs() || tr.n_users != built.network.n_users() {
                bail!(
                    "trace is for {} BSs / {} users, scenario has {} / {}",
                    tr.n_bs,
                    tr.n_users,
                    built.network.n_bs(),
                    built.network.n_users()
                );
            }
            if tr.config_digest != built.digest {
                eprintln!("note: trace was recorded under a different scenario digest");
            }
            let (horizon, seed) = (s.run.horizon, tr.seed);
            run_and_write(&built, policy, &mut tr.replay(), seed, horizon, &common.out)?;
        }
    }
    Ok(())
}
