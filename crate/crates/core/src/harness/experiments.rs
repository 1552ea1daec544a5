//! Sweeps, snapshots and convergence dumps.
//!
//! Every function here is deterministic in the scenario (digest) and seed.
//! Replicate `r` of a sweep uses seed `run.seed + r` at every axis value, so
//! points are compared on identical exogenous traces.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{Built, ConfigError, Scenario};
use super::stats::{ci95, mean};
use super::{run_on, PolicyKind};
use crate::comp_lb::{solve_distributed, ClbInstance, DualState, IterationRecord};
use crate::controller::{apply_decision, step, ControlError, Globe, RunSummary};
use crate::env::{EnvError, Environment, ObservationSource};
use crate::par::par_map;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("slot {t} out of range (horizon {horizon})")]
    SlotOutOfRange { t: u64, horizon: u64 },
    #[error("sweep: {0}")]
    Sweep(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    V,
    GridPriceMean,
    /// Mean task load as a fraction of compute capacity.
    WorkloadIntensity,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "v" => Ok(Axis::V),
            "grid_price_mean" | "price" => Ok(Axis::GridPriceMean),
            "workload_intensity" | "workload" => Ok(Axis::WorkloadIntensity),
            _ => Err(format!("unknown axis `{s}` (expected v, grid_price_mean or workload_intensity)")),
        }
    }
}

/// A sweep coordinate. `NoGrid` is only meaningful on the price axis, where
/// it sets the grid cap to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisValue {
    Num(f64),
    NoGrid,
}

impl FromStr for AxisValue {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(AxisValue::NoGrid);
        }
        s.trim().parse::<f64>().map(AxisValue::Num).map_err(|e| format!("axis value `{s}`: {e}"))
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Num(x) => write!(f, "{x}"),
            AxisValue::NoGrid => f.write_str("none"),
        }
    }
}

/// The scenario moved to one sweep coordinate.
pub fn apply(base: &Scenario, axis: Axis, value: AxisValue) -> Result<Scenario, ExperimentError> {
    let mut s = base.clone();
    match (axis, value) {
        (Axis::V, AxisValue::Num(v)) => s.controller.v = v,
        (Axis::GridPriceMean, AxisValue::Num(p)) => s.price.mean = p,
        (Axis::GridPriceMean, AxisValue::NoGrid) => s.network.grid_cap = 0.0,
        (Axis::WorkloadIntensity, AxisValue::Num(w)) => s.arrivals.comp_load = w,
        (a, AxisValue::NoGrid) => return Err(ExperimentError::Sweep(format!("`none` is not a value of axis {a:?}"))),
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis_value: String,
    pub mean_cost: f64,
    pub ci95: f64,
    /// Second-half mean battery, averaged over replicates.
    pub mean_battery: f64,
    pub theta: f64,
    /// Per-replicate time-average cost, in seed order.
    pub costs: Vec<f64>,
    pub batteries: Vec<f64>,
}

pub fn sweep(
    base: &Scenario,
    axis: Axis,
    values: &[AxisValue],
    replicates: usize,
    horizon: u64,
    policy: PolicyKind,
) -> Result<Vec<SweepPoint>, ExperimentError> {
    if values.len() < 2 {
        return Err(ExperimentError::Sweep("a sweep needs at least two axis values".into()));
    }
    if replicates == 0 {
        return Err(ExperimentError::Sweep("a sweep needs at least one replicate".into()));
    }
    let mut points = Vec::with_capacity(values.len());
    let mut jobs = Vec::with_capacity(values.len() * replicates);
    for &v in values {
        let s = apply(base, axis, v)?;
        let built = s.build()?;
        points.push((v, built.params.theta));
        for r in 0..replicates {
            let mut sr = s.clone();
            sr.run.seed = base.run.seed.wrapping_add(r as u64);
            jobs.push(sr);
        }
    }
    let results = par_map(&jobs, |s| -> Result<RunSummary, ExperimentError> {
        let built = s.build()?;
        let mut env = Environment::new(built.network.clone(), built.env.clone())?;
        Ok(run_on(&built, policy, &mut env, horizon, None)?)
    });
    let results: Vec<RunSummary> = results.into_iter().collect::<Result<_, _>>()?;
    Ok(points
        .into_iter()
        .zip(results.chunks(replicates))
        .map(|((v, theta), runs)| {
            let costs: Vec<f64> = runs.iter().map(|r| r.avg_cost).collect();
            let batteries: Vec<f64> = runs.iter().map(|r| r.tail_mean_battery).collect();
            SweepPoint {
                axis_value: v.to_string(),
                mean_cost: mean(&costs),
                ci95: ci95(&costs),
                mean_battery: mean(&batteries),
                theta,
                costs,
                batteries,
            }
        })
        .collect())
}

/// CSV `axis_value,mean_cost,ci95,mean_battery,theta`.
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], w: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["axis_value", "mean_cost", "ci95", "mean_battery", "theta"])?;
    for p in points {
        out.write_record([
            p.axis_value.clone(),
            p.mean_cost.to_string(),
            p.ci95.to_string(),
            p.mean_battery.to_string(),
            p.theta.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Offered versus served load of one BS in one slot. Offered counts the BS's
/// own users; served counts what the policy routed to the BS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub bs: usize,
    pub offered_tx: f64,
    pub served_tx: f64,
    pub offered_comp: f64,
    pub served_comp: f64,
    /// Battery at the start of the slot.
    pub battery: f64,
}

/// Runs `kind` up to slot `t` and tabulates its decision in that slot.
pub fn snapshot<S: ObservationSource + ?Sized>(
    built: &Built,
    kind: PolicyKind,
    source: &mut S,
    t: u64,
    horizon: u64,
) -> Result<Vec<SnapshotRow>, ExperimentError> {
    if t >= horizon {
        return Err(ExperimentError::SlotOutOfRange { t, horizon });
    }
    let net = &built.network;
    let mut policy = kind.build(built);
    let mut battery = built.initial.clone();
    for k in 0..t {
        let obs = source.observe(k)?;
        battery = step(net, policy.as_mut(), &obs, &battery)?.2;
    }
    let obs = source.observe(t)?;
    let (dec, _, _) = step(net, policy.as_mut(), &obs, &battery)?;
    let served_tx = dec.tx_load(net);
    let served_comp = dec.comp_load(net);
    Ok((0..net.n_bs())
        .map(|i| SnapshotRow {
            bs: i,
            offered_tx: net.home_users(i).map(|u| obs.tx_demand[u]).sum(),
            served_tx: served_tx[i],
            offered_comp: net.home_users(i).map(|u| obs.comp_demand[u]).sum(),
            served_comp: served_comp[i],
            battery: battery.level[i],
        })
        .collect())
}

pub fn write_snapshot_csv<W: Write>(rows: &[SnapshotRow], w: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Dual-loop statistics of one slot: the warm-started solve GLOBE actually
/// ran, and a cold solve of the same instance for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSlot {
    pub t: u64,
    pub warm_iterations: usize,
    pub warm_converged: bool,
    /// Largest capacity excess of the last iterate over capacity.
    pub warm_violation: f64,
    pub cold_iterations: usize,
    pub cold_converged: bool,
    pub cold_violation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub slots: usize,
    pub converged_fraction: f64,
    pub median_warm_iterations: f64,
    pub median_cold_iterations: f64,
}

pub fn median(xs: &[usize]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2]) as f64
    }
}

impl ConvergenceSummary {
    /// `tol` is the capacity-relative violation accepted as converged.
    pub fn of(slots: &[ConvergenceSlot], tol: f64) -> Self {
        let ok = slots.iter().filter(|s| s.warm_violation <= tol).count();
        let warm: Vec<usize> = slots.iter().map(|s| s.warm_iterations).collect();
        let cold: Vec<usize> = slots.iter().map(|s| s.cold_iterations).collect();
        Self {
            slots: slots.len(),
            converged_fraction: ok as f64 / slots.len().max(1) as f64,
            median_warm_iterations: median(&warm),
            median_cold_iterations: median(&cold),
        }
    }
}

/// Runs GLOBE for `slots` slots, solving each slot's balancing problem twice.
/// The full iteration log of slot `dump_slot` is returned alongside.
pub fn convergence<S: ObservationSource + ?Sized>(
    built: &Built,
    source: &mut S,
    slots: u64,
    dump_slot: Option<u64>,
) -> Result<(Vec<ConvergenceSlot>, Vec<IterationRecord>), ExperimentError> {
    if let Some(t) = dump_slot.filter(|&t| t >= slots) {
        return Err(ExperimentError::SlotOutOfRange { t, horizon: slots });
    }
    let net = &built.network;
    let p = &built.params;
    let cap = (0..net.n_bs()).map(|i| net.capacity(i)).fold(f64::INFINITY, f64::min);
    let mut globe = Globe::new(net.clone(), p.clone());
    let mut battery = built.initial.clone();
    let mut stats = Vec::with_capacity(slots as usize);
    let mut dump = Vec::new();
    for t in 0..slots {
        let obs = source.observe(t)?;
        let inst = ClbInstance::new(net, &obs, &p.b_tilde(&battery.level), p.v, p.epsilon);
        let cold = solve_distributed(&inst, &p.dual, &mut DualState::cold(net.n_bs()), None);
        let log = (dump_slot == Some(t)).then_some(&mut dump);
        let dec = globe.decide_traced(&obs, &battery, log)?;
        let warm = globe.last_report().expect("decide_traced stores its report");
        stats.push(ConvergenceSlot {
            t,
            warm_iterations: warm.iterations,
            warm_converged: warm.converged,
            warm_violation: warm.max_violation.max(0.0) / cap,
            cold_iterations: cold.iterations,
            cold_converged: cold.converged,
            cold_violation: cold.max_violation.max(0.0) / cap,
        });
        battery = apply_decision(net, "globe", false, &obs, &battery, &dec)?.1;
    }
    Ok((stats, dump))
}

/// CSV `k,gamma_1..gamma_N,qp_obj,lp_obj,max_violation`.
pub fn write_iterations_csv<W: Write>(log: &[IterationRecord], n_bs: usize, w: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["k".to_string()];
    header.extend((1..=n_bs).map(|i| format!("gamma_{i}")));
    header.extend(["qp_obj", "lp_obj", "max_violation"].map(String::from));
    out.write_record(&header)?;
    for r in log {
        let mut row = vec![r.k.to_string()];
        row.extend(r.gamma.iter().map(f64::to_string));
        row.extend([r.qp_objective, r.lp_objective, r.max_violation].map(|x| x.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_convergence_csv<W: Write>(slots: &[ConvergenceSlot], w: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    for s in slots {
        out.serialize(s)?;
    }
    out.flush()?;
    Ok(())
}

/// Summary JSON of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub seed: u64,
    pub horizon: u64,
    pub wall_time_s: f64,
    pub config_digest: String,
    /// Set for the comparison policies, whose details are local choices.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl RunReport {
    pub fn new(summary: RunSummary, built: &Built, seed: u64, horizon: u64, wall_time_s: f64) -> Self {
        let note = (summary.policy != "globe").then(|| "benchmark as implemented".to_string());
        Self { summary, seed, horizon, wall_time_s, config_digest: built.digest.clone(), note }
    }
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Shared;

    fn small() -> Scenario {
        let mut s = Scenario::preset();
        s.run.horizon = 60;
        s
    }

    #[test]
    fn axis_values_parse() {
        assert_eq!("none".parse::<AxisValue>().unwrap(), AxisValue::NoGrid);
        assert_eq!("0.5".parse::<AxisValue>().unwrap(), AxisValue::Num(0.5));
        assert!("x".parse::<AxisValue>().is_err());
        assert_eq!("V".parse::<Axis>().unwrap(), Axis::V);
        assert!(apply(&small(), Axis::V, AxisValue::NoGrid).is_err());
        assert_eq!(apply(&small(), Axis::GridPriceMean, AxisValue::NoGrid).unwrap().network.grid_cap, 0.0);
    }

    #[test]
    fn sweep_is_matched_and_needs_two_values() {
        let s = small();
        let one = [AxisValue::Num(1.0)];
        assert!(sweep(&s, Axis::GridPriceMean, &one, 2, 40, PolicyKind::Globe).is_err());
        let vals = [AxisValue::Num(1.0), AxisValue::Num(1.0)];
        let pts = sweep(&s, Axis::GridPriceMean, &vals, 3, 40, PolicyKind::Globe).unwrap();
        // identical values on matched seeds give identical replicates
        assert_eq!(pts[0].costs, pts[1].costs);
        assert_eq!(pts[0].costs.len(), 3);
        let mut buf = Vec::new();
        write_sweep_csv(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("axis_value,mean_cost,ci95,mean_battery,theta\n"), "{text}");
    }

    #[test]
    fn snapshot_without_balancing_serves_at_home() {
        let mut s = small();
        // plenty of energy and a light load: nothing gets dropped
        s.controller.initial_battery = crate::harness::config::InitialBattery::Full;
        s.arrivals.comp_load = 0.2;
        let b = s.build().unwrap();
        let mut env = Environment::new(b.network.clone(), b.env.clone()).unwrap();
        let rows = snapshot(&b, PolicyKind::MoNg, &mut env, 3, 60).unwrap();
        for r in &rows {
            approx::assert_relative_eq!(r.offered_tx, r.served_tx, max_relative = 1e-12);
            approx::assert_relative_eq!(r.offered_comp, r.served_comp, max_relative = 1e-12);
        }
        assert!(matches!(
            snapshot(&b, PolicyKind::Globe, &mut env, 60, 60),
            Err(ExperimentError::SlotOutOfRange { t: 60, horizon: 60 })
        ));
    }

    #[test]
    fn snapshot_of_zero_demand_slot_is_zero() {
        let mut s = small();
        s.arrivals.tx_mean = 0.0;
        s.arrivals.comp_load = 0.0;
        let b = s.build().unwrap();
        let env = Environment::new(b.network.clone(), b.env.clone()).unwrap();
        let obs: Vec<_> = (0..5).map(|t| env.observation_at(t)).collect();
        for kind in PolicyKind::ALL {
            let rows = snapshot(&b, kind, &mut Shared(&obs), 4, 5).unwrap();
            assert!(rows.iter().all(|r| r.offered_tx + r.served_tx + r.offered_comp + r.served_comp == 0.0));
        }
    }

    #[test]
    fn convergence_dump_has_one_row_per_iteration() {
        let b = small().build().unwrap();
        let mut env = Environment::new(b.network.clone(), b.env.clone()).unwrap();
        let (stats, log) = convergence(&b, &mut env, 10, Some(4)).unwrap();
        assert_eq!(stats.len(), 10);
        assert_eq!(log.len(), stats[4].warm_iterations);
        assert_eq!(log.last().unwrap().k, stats[4].warm_iterations);
        // slot 0 starts from zero multipliers either way
        assert_eq!(stats[0].warm_iterations, stats[0].cold_iterations);
        let mut buf = Vec::new();
        write_iterations_csv(&log, 5, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,gamma_1,gamma_2,gamma_3,gamma_4,gamma_5,qp_obj,lp_obj,max_violation\n"));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3, 1, 2]), 2.0);
        assert_eq!(median(&[4, 1, 2, 3]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }
}
