//! Experiment plumbing: scenario files, policy construction, runs, sweeps,
//! snapshots and convergence dumps.

pub mod config;
pub mod experiments;
pub mod stats;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{MoG, MoNg, SoNg};
use crate::controller::{run_horizon, ControlError, Globe, Policy, RunSummary, SlotRecord};
use crate::env::{EnvError, Environment, ObservationSource};

pub use config::{Built, ConfigError, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Globe,
    SoNg,
    MoG,
    MoNg,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::Globe, PolicyKind::SoNg, PolicyKind::MoG, PolicyKind::MoNg];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Globe => "globe",
            PolicyKind::SoNg => "so_ng",
            PolicyKind::MoG => "mo_g",
            PolicyKind::MoNg => "mo_ng",
        }
    }

    pub fn build(self, b: &Built) -> Box<dyn Policy + Send> {
        match self {
            PolicyKind::Globe => Box::new(Globe::new(b.network.clone(), b.params.clone())),
            PolicyKind::SoNg => Box::new(SoNg::new(b.network.clone(), b.params.clone())),
            PolicyKind::MoG => Box::new(MoG::new(b.network.clone())),
            PolicyKind::MoNg => Box::new(MoNg::new(b.network.clone())),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('-', "_").to_ascii_lowercase())
            .ok_or_else(|| format!("unknown policy `{s}` (expected globe, so_ng, mo_g or mo_ng)"))
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Runs one policy on the scenario's own generator.
pub fn run_policy(
    built: &Built,
    kind: PolicyKind,
    horizon: u64,
    rows: Option<&mut Vec<SlotRecord>>,
) -> Result<RunSummary, ControlError> {
    let mut env = Environment::new(built.network.clone(), built.env.clone())?;
    run_on(built, kind, &mut env, horizon, rows)
}

/// Runs one policy on any observation source (a generator or a replayed trace).
pub fn run_on<S: ObservationSource + ?Sized>(
    built: &Built,
    kind: PolicyKind,
    source: &mut S,
    horizon: u64,
    rows: Option<&mut Vec<SlotRecord>>,
) -> Result<RunSummary, ControlError> {
    let mut policy = kind.build(built);
    run_horizon(&built.network, source, policy.as_mut(), horizon, built.initial.clone(), rows)
}

/// Replays pre-drawn observations, so several policies can share one trace
/// without redrawing it.
pub struct Shared<'a>(pub &'a [crate::model::SlotObservation]);

impl ObservationSource for Shared<'_> {
    fn observe(&mut self, t: u64) -> Result<crate::model::SlotObservation, EnvError> {
        self.0
            .get(t as usize)
            .cloned()
            .ok_or(EnvError::TraceExhausted { requested: t, available: self.0.len() as u64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.as_str().parse::<PolicyKind>().unwrap(), k);
        }
        assert_eq!("MO-G".parse::<PolicyKind>().unwrap(), PolicyKind::MoG);
        assert!("greedy".parse::<PolicyKind>().is_err());
    }
}
