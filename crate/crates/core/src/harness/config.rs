//! Scenario files: one TOML document per experiment, schema version 1.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::comp_lb::{DualSettings, StepRule};
use crate::controller::GlobeParams;
use crate::env::{ArrivalProcess, ChannelModel, EnvConfig};
use crate::model::{
    battery_requirement, derive_bounds, BaseStation, BatteryState, EnergyPerUnitBounds, ModelError, NetworkConfig,
    User,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Evaluation preset with arrivals scaled to the compute capacity.
pub const PAPER_VI: &str = include_str!("../../presets/paper_vi.cfg");
/// The same constants with arrival rates taken at face value.
pub const PAPER_VI_RAW: &str = include_str!("../../presets/paper_vi_raw.cfg");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config field `{field}`: {msg}")]
    Field { field: &'static str, msg: String },
    #[error("schema_version {0} not supported (expected {SCHEMA_VERSION})")]
    Version(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
}

fn field(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field { field, msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub network: NetworkSection,
    pub users: UserSection,
    pub system: SystemSection,
    pub arrivals: ArrivalSection,
    pub price: PriceSection,
    pub channel: ChannelSection,
    pub controller: ControllerSection,
    #[serde(default)]
    pub dual: DualSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub n_bs: usize,
    pub users_per_bs: usize,
    /// Ring hops reachable on each side; 1 gives candidate sets of size 3.
    pub neighbors: usize,
    pub cpu_speed: f64,
    pub tx_power: f64,
    pub grid_cap: f64,
    /// Battery capacity as a multiple of the smallest battery admitting `V`.
    pub battery_headroom: f64,
    /// Fixed battery capacity in joules; overrides the headroom rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery_cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSection {
    pub tx_drop_cost: f64,
    pub comp_drop_cost: f64,
    pub data_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub bandwidth: f64,
    pub noise: f64,
    pub cycles_per_task: f64,
    pub delay_bound: f64,
    pub energy_coeff: f64,
    pub harvest_cap: f64,
    pub tx_arrival_cap: f64,
    pub comp_arrival_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalSection {
    /// Mean traffic units per slot at each BS, split evenly over its users.
    pub tx_mean: f64,
    pub tx_spread: f64,
    /// Mean task arrivals at each BS as a fraction of its compute capacity.
    pub comp_load: f64,
    pub comp_spread: f64,
    /// Per-BS multipliers on both means; empty means all ones.
    #[serde(default)]
    pub load_profile: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSection {
    pub mean: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub home_snr_db: f64,
    pub neighbor_snr_db: f64,
    pub snr_floor_db: f64,
    pub snr_ceil_db: f64,
    pub mc_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialBattery {
    Theta,
    Zero,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub v: f64,
    pub epsilon: f64,
    pub initial_battery: InitialBattery,
    /// Per-BS perturbations overriding `theta`; experimental.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_per_bs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualSection {
    pub step: StepRule,
    pub step_scale: f64,
    pub violation_tol: f64,
    pub gamma_tol: f64,
    pub max_iters: usize,
    pub warm_start: bool,
}

impl Default for DualSection {
    fn default() -> Self {
        let d = DualSettings::default();
        Self {
            step: d.step,
            step_scale: d.step_scale,
            violation_tol: d.violation_tol,
            gamma_tol: d.gamma_tol,
            max_iters: d.max_iters,
            warm_start: d.warm_start,
        }
    }
}

impl From<&DualSection> for DualSettings {
    fn from(d: &DualSection) -> Self {
        Self {
            step: d.step,
            step_scale: d.step_scale,
            violation_tol: d.violation_tol,
            gamma_tol: d.gamma_tol,
            max_iters: d.max_iters,
            warm_start: d.warm_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub horizon: u64,
}

/// Everything a run needs, derived from a [`Scenario`].
#[derive(Debug, Clone)]
pub struct Built {
    pub network: NetworkConfig,
    pub env: EnvConfig,
    pub params: GlobeParams,
    pub initial: BatteryState,
    pub digest: String,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let s: Scenario = toml::from_str(text)?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Version(s.schema_version));
        }
        Ok(s)
    }

    pub fn preset() -> Self {
        Self::parse(PAPER_VI).expect("bundled preset parses")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn check(&self) -> Result<(), ConfigError> {
        let n = &self.network;
        if n.n_bs == 0 {
            return Err(field("network.n_bs", "must be at least 1"));
        }
        if n.users_per_bs == 0 {
            return Err(field("network.users_per_bs", "must be at least 1"));
        }
        if !(n.battery_headroom >= 1.0) {
            return Err(field("network.battery_headroom", "must be >= 1"));
        }
        if n.battery_cap.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(field("network.battery_cap", "must be positive and finite"));
        }
        let a = &self.arrivals;
        if !a.load_profile.is_empty() && a.load_profile.len() != n.n_bs {
            return Err(field("arrivals.load_profile", format!("needs {} entries", n.n_bs)));
        }
        if a.load_profile.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(field("arrivals.load_profile", "entries must be non-negative"));
        }
        if !(a.tx_mean >= 0.0 && a.comp_load >= 0.0) {
            return Err(field("arrivals", "means must be non-negative"));
        }
        if !(self.controller.v >= 0.0) {
            return Err(field("controller.v", "must be non-negative"));
        }
        if !(self.controller.epsilon > 0.0) {
            return Err(field("controller.epsilon", "must be positive"));
        }
        if let Some(t) = &self.controller.theta_per_bs {
            if t.len() != n.n_bs {
                return Err(field("controller.theta_per_bs", format!("needs {} entries", n.n_bs)));
            }
        }
        if self.run.horizon == 0 {
            return Err(field("run.horizon", "must be at least 1"));
        }
        Ok(())
    }

    fn profile(&self, bs: usize) -> f64 {
        self.arrivals.load_profile.get(bs).copied().unwrap_or(1.0)
    }

    /// Network with a placeholder battery; [`Scenario::build`] sizes it.
    fn network(&self, battery_cap: f64) -> NetworkConfig {
        let n = &self.network;
        let stations = (0..n.n_bs)
            .map(|_| BaseStation { cpu_speed: n.cpu_speed, tx_power: n.tx_power, grid_cap: n.grid_cap, battery_cap })
            .collect();
        let reach = n.neighbors.min(n.n_bs.saturating_sub(1) / 2);
        let mut users = Vec::with_capacity(n.n_bs * n.users_per_bs);
        for i in 0..n.n_bs {
            let mut candidates = vec![i];
            for h in 1..=reach {
                candidates.push((i + h) % n.n_bs);
                candidates.push((i + n.n_bs - h) % n.n_bs);
            }
            if n.n_bs == 2 && n.neighbors > 0 {
                candidates.push(1 - i);
            }
            for _ in 0..n.users_per_bs {
                users.push(User {
                    home_bs: i,
                    candidates: candidates.clone(),
                    tx_drop_cost: self.users.tx_drop_cost,
                    comp_drop_cost: self.users.comp_drop_cost,
                    data_size: self.users.data_size,
                });
            }
        }
        let s = &self.system;
        NetworkConfig {
            stations,
            users,
            bandwidth: s.bandwidth,
            noise: s.noise,
            cycles_per_task: s.cycles_per_task,
            delay_bound: s.delay_bound,
            energy_coeff: s.energy_coeff,
            harvest_cap: s.harvest_cap,
            tx_arrival_cap: s.tx_arrival_cap,
            comp_arrival_cap: s.comp_arrival_cap,
        }
    }

    pub fn build(&self) -> Result<Built, ConfigError> {
        self.check()?;
        let mut network = self.network(f64::INFINITY);
        network.validate()?;

        let ch = &self.channel;
        let mut channel = ChannelModel::home_and_neighbor(&network, ch.home_snr_db, ch.neighbor_snr_db);
        channel.snr_floor_db = ch.snr_floor_db;
        channel.snr_ceil_db = ch.snr_ceil_db;
        channel.mc_draws = ch.mc_draws;
        let p_bounds: EnergyPerUnitBounds = channel.energy_bounds(&network);

        let bounds = derive_bounds(&network, p_bounds)?;
        let cap = match self.network.battery_cap {
            Some(cap) => cap,
            None => self.network.battery_headroom * (1.0 + 1e-12) * battery_requirement(&network, self.controller.v, &bounds),
        };
        network.stations.iter_mut().for_each(|s| s.battery_cap = cap);

        let per_user = self.network.users_per_bs as f64;
        let (tx_arrivals, comp_arrivals) = network
            .users
            .iter()
            .map(|u| {
                let w = self.profile(u.home_bs) / per_user;
                let comp_mean = self.arrivals.comp_load * network.capacity(u.home_bs) * w;
                (
                    ArrivalProcess::new(self.arrivals.tx_mean * w, self.arrivals.tx_spread),
                    ArrivalProcess::new(comp_mean, self.arrivals.comp_spread),
                )
            })
            .unzip();
        let env = EnvConfig {
            seed: self.run.seed,
            tx_arrivals,
            comp_arrivals,
            price_mean: self.price.mean,
            price_spread: self.price.spread,
            channel,
        };
        env.validate(&network)?;

        let mut params = GlobeParams::derive(&network, p_bounds, self.controller.v)?;
        params.epsilon = self.controller.epsilon;
        params.dual = (&self.dual).into();
        params.theta_per_bs = self.controller.theta_per_bs.clone();
        let level = match self.controller.initial_battery {
            InitialBattery::Theta => params.theta,
            InitialBattery::Zero => 0.0,
            InitialBattery::Full => cap,
        };
        let initial = BatteryState::uniform(network.n_bs(), level, params.theta);
        Ok(Built { network, env, params, initial, digest: self.digest() })
    }
}
