//! Network description, per-slot observation/decision types and the energy
//! and cost bookkeeping every policy is evaluated with.
//!
//! One slot is one second: per-slot amounts and rates are interchangeable.
//! Energies are joules, traffic is counted in units of `data_size` bits and
//! computation in tasks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("network has no base stations")]
    EmptyNetwork,
    #[error("energy-per-unit lower bound must be positive, got {0}")]
    NonPositivePmin(f64),
    #[error(
        "battery capacity {battery_cap} J at BS {bs} does not exceed E_max + harvest_cap + grid_cap = {required} J"
    )]
    BatteryTooSmall { bs: usize, battery_cap: f64, required: f64 },
    #[error("V = {v} outside the admissible range [0, {v_max}] allowed by the battery capacity B_max")]
    VOutOfRange { v: f64, v_max: f64 },
    #[error("unstable queue: load {load} tasks/s >= service rate {service_rate} tasks/s")]
    UnstableQueue { load: f64, service_rate: f64 },
    #[error("infeasible decision: {0}")]
    Infeasible(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    /// CPU speed in cycles per second.
    pub cpu_speed: f64,
    /// Transmit power in watts.
    pub tx_power: f64,
    /// Maximum grid purchase per slot (J).
    pub grid_cap: f64,
    /// Battery capacity (J).
    pub battery_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub home_bs: usize,
    /// Base stations that can serve this user. Always contains `home_bs`.
    pub candidates: Vec<usize>,
    /// Cost per dropped traffic unit.
    pub tx_drop_cost: f64,
    /// Cost per dropped computation task.
    pub comp_drop_cost: f64,
    /// Mean size of one traffic unit in bits.
    pub data_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub stations: Vec<BaseStation>,
    pub users: Vec<User>,
    /// Downlink bandwidth (Hz).
    pub bandwidth: f64,
    /// Noise power (W).
    pub noise: f64,
    /// Mean CPU cycles per task.
    pub cycles_per_task: f64,
    /// Maximum mean computation delay (s).
    pub delay_bound: f64,
    /// Energy per cycle coefficient; a task at BS i costs `energy_coeff * f_i^2` joules.
    pub energy_coeff: f64,
    /// Per-slot harvest cap (J).
    pub harvest_cap: f64,
    /// Per-user traffic arrival cap (units/slot).
    pub tx_arrival_cap: f64,
    /// Per-user task arrival cap (tasks/slot).
    pub comp_arrival_cap: f64,
}

impl NetworkConfig {
    pub fn n_bs(&self) -> usize {
        self.stations.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Admissible task rate `f_i/rho - 1/d_max` that keeps the M/M/1 delay within bound.
    pub fn capacity(&self, bs: usize) -> f64 {
        self.stations[bs].cpu_speed / self.cycles_per_task - 1.0 / self.delay_bound
    }

    /// Joules per task at `bs`: `kappa * f_i^2`.
    pub fn energy_per_task(&self, bs: usize) -> f64 {
        let f = self.stations[bs].cpu_speed;
        self.energy_coeff * f * f
    }

    /// Users whose home is `bs`.
    pub fn home_users(&self, bs: usize) -> impl Iterator<Item = usize> + '_ {
        self.users
            .iter()
            .enumerate()
            .filter(move |(_, u)| u.home_bs == bs)
            .map(|(idx, _)| idx)
    }

    /// Users that list `bs` among their candidates.
    pub fn routable_users(&self, bs: usize) -> impl Iterator<Item = usize> + '_ {
        self.users
            .iter()
            .enumerate()
            .filter(move |(_, u)| u.candidates.contains(&bs))
            .map(|(idx, _)| idx)
    }

    /// Position of `bs` in the candidate list of `user`.
    pub fn candidate_slot(&self, user: usize, bs: usize) -> Option<usize> {
        self.users[user].candidates.iter().position(|&j| j == bs)
    }

    /// Same network with every candidate set cut down to the home station.
    pub fn restricted_to_home(&self) -> NetworkConfig {
        let mut out = self.clone();
        for u in &mut out.users {
            u.candidates = vec![u.home_bs];
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stations.is_empty() {
            return Err(ModelError::EmptyNetwork);
        }
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        let n = self.n_bs();
        for (name, v) in [
            ("bandwidth", self.bandwidth),
            ("noise", self.noise),
            ("cycles_per_task", self.cycles_per_task),
            ("delay_bound", self.delay_bound),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        for (name, v) in [
            ("energy_coeff", self.energy_coeff),
            ("harvest_cap", self.harvest_cap),
            ("tx_arrival_cap", self.tx_arrival_cap),
            ("comp_arrival_cap", self.comp_arrival_cap),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        for (i, s) in self.stations.iter().enumerate() {
            if !(s.cpu_speed > 0.0 && s.tx_power > 0.0) {
                return bad(format!("bs {i}: cpu_speed and tx_power must be positive"));
            }
            if !(s.grid_cap >= 0.0 && s.battery_cap >= 0.0) {
                return bad(format!("bs {i}: grid_cap and battery_cap must be non-negative"));
            }
            if self.capacity(i) <= 0.0 {
                return bad(format!(
                    "bs {i}: computation capacity f/rho - 1/d_max = {} is not positive",
                    self.capacity(i)
                ));
            }
        }
        for (u, user) in self.users.iter().enumerate() {
            if user.candidates.is_empty() {
                return bad(format!("user {u}: empty candidate set"));
            }
            if user.home_bs >= n || !user.candidates.contains(&user.home_bs) {
                return bad(format!("user {u}: home bs {} not among candidates", user.home_bs));
            }
            if let Some(&j) = user.candidates.iter().find(|&&j| j >= n) {
                return bad(format!("user {u}: candidate {j} is not a valid bs index"));
            }
            let mut sorted = user.candidates.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != user.candidates.len() {
                return bad(format!("user {u}: duplicate candidates"));
            }
            if !(user.tx_drop_cost >= 0.0 && user.comp_drop_cost >= 0.0 && user.data_size > 0.0) {
                return bad(format!("user {u}: drop costs must be >= 0 and data_size > 0"));
            }
        }
        Ok(())
    }
}

/// Average computation delay of an M/M/1 server: `1 / (f/rho - load)`.
pub fn mm1_delay(load: f64, cpu_speed: f64, cycles_per_task: f64) -> Result<f64, ModelError> {
    let service_rate = cpu_speed / cycles_per_task;
    if load >= service_rate {
        return Err(ModelError::UnstableQueue { load, service_rate });
    }
    Ok(1.0 / (service_rate - load))
}

/// Per-pair transmission energy, stored BS-major. Pairs outside a user's
/// candidate set hold `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxEnergy {
    n_users: usize,
    values: Vec<f64>,
}

impl TxEnergy {
    pub fn new(n_bs: usize, n_users: usize) -> Self {
        Self { n_users, values: vec![f64::INFINITY; n_bs * n_users] }
    }

    pub fn get(&self, bs: usize, user: usize) -> f64 {
        self.values[bs * self.n_users + user]
    }

    pub fn set(&mut self, bs: usize, user: usize, p: f64) {
        self.values[bs * self.n_users + user] = p;
    }

    pub fn n_bs(&self) -> usize {
        self.values.len().checked_div(self.n_users).unwrap_or(0)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }
}

/// Exogenous state of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotObservation {
    pub t: u64,
    /// Traffic units requested by each user.
    pub tx_demand: Vec<f64>,
    /// Tasks generated by each user.
    pub comp_demand: Vec<f64>,
    /// Energy arriving at each BS (J).
    pub harvest: Vec<f64>,
    /// Grid price per joule.
    pub grid_price: f64,
    /// Expected joules per traffic unit for each (bs, user).
    pub tx_energy: TxEnergy,
}

impl SlotObservation {
    pub fn check(&self, config: &NetworkConfig) -> Result<(), ModelError> {
        let (n, m) = (config.n_bs(), config.n_users());
        if self.tx_demand.len() != m
            || self.comp_demand.len() != m
            || self.harvest.len() != n
            || self.tx_energy.n_bs() != n
            || self.tx_energy.n_users() != m
        {
            return Err(ModelError::Shape(format!("observation at t={} does not match network", self.t)));
        }
        let bad = |msg: String| Err(ModelError::Infeasible(format!("observation t={}: {msg}", self.t)));
        for u in 0..m {
            if !(0.0..=config.tx_arrival_cap).contains(&self.tx_demand[u]) {
                return bad(format!("tx demand {} of user {u} outside [0, cap]", self.tx_demand[u]));
            }
            if !(0.0..=config.comp_arrival_cap).contains(&self.comp_demand[u]) {
                return bad(format!("comp demand {} of user {u} outside [0, cap]", self.comp_demand[u]));
            }
            for &j in &config.users[u].candidates {
                let p = self.tx_energy.get(j, u);
                if !(p.is_finite() && p > 0.0) {
                    return bad(format!("tx energy p[{j},{u}] = {p} must be positive"));
                }
            }
        }
        for (i, &h) in self.harvest.iter().enumerate() {
            if !(0.0..=config.harvest_cap).contains(&h) {
                return bad(format!("harvest {h} at bs {i} outside [0, cap]"));
            }
        }
        if !(self.grid_price >= 0.0 && self.grid_price.is_finite()) {
            return bad(format!("grid price {} must be non-negative", self.grid_price));
        }
        Ok(())
    }
}

/// Battery level per BS plus the perturbation the controller steers towards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub level: Vec<f64>,
    pub theta: f64,
}

impl BatteryState {
    pub fn uniform(n_bs: usize, level: f64, theta: f64) -> Self {
        Self { level: vec![level; n_bs], theta }
    }

    /// `B_i - theta`.
    pub fn perturbed(&self) -> Vec<f64> {
        self.level.iter().map(|b| b - self.theta).collect()
    }

    pub fn mean(&self) -> f64 {
        self.level.iter().sum::<f64>() / self.level.len().max(1) as f64
    }
}

/// Routing, admission and energy decisions for one slot. `alpha[u][k]` and
/// `beta[u][k]` refer to the k-th candidate of user u.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDecision {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub harvest: Vec<f64>,
    pub purchase: Vec<f64>,
}

impl SlotDecision {
    /// Drop everything, harvest and buy nothing.
    pub fn null(config: &NetworkConfig) -> Self {
        Self {
            alpha: config.users.iter().map(|u| vec![0.0; u.candidates.len()]).collect(),
            beta: config.users.iter().map(|u| vec![0.0; u.candidates.len()]).collect(),
            harvest: vec![0.0; config.n_bs()],
            purchase: vec![0.0; config.n_bs()],
        }
    }

    /// Traffic units transmitted by each BS.
    pub fn tx_load(&self, config: &NetworkConfig) -> Vec<f64> {
        per_bs_load(config, &self.alpha)
    }

    /// Tasks processed by each BS.
    pub fn comp_load(&self, config: &NetworkConfig) -> Vec<f64> {
        per_bs_load(config, &self.beta)
    }
}

pub(crate) fn per_bs_load(config: &NetworkConfig, split: &[Vec<f64>]) -> Vec<f64> {
    let mut load = vec![0.0; config.n_bs()];
    for (user, row) in config.users.iter().zip(split) {
        for (&j, &x) in user.candidates.iter().zip(row) {
            load[j] += x;
        }
    }
    load
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub tx_energy: Vec<f64>,
    pub comp_energy: Vec<f64>,
    pub cost_tx: Vec<f64>,
    pub cost_comp: Vec<f64>,
    pub cost_grid: Vec<f64>,
    pub dropped_tx: Vec<f64>,
    pub dropped_comp: Vec<f64>,
    pub battery_after: Vec<f64>,
    /// Stations where energy spent exceeded the battery at slot start.
    pub causality_violations: Vec<usize>,
}

impl SlotOutcome {
    pub fn energy(&self, bs: usize) -> f64 {
        self.tx_energy[bs] + self.comp_energy[bs]
    }

    pub fn total_cost(&self) -> f64 {
        self.cost_tx.iter().sum::<f64>() + self.cost_comp.iter().sum::<f64>() + self.cost_grid.iter().sum::<f64>()
    }

    pub fn total_dropped_tx(&self) -> f64 {
        self.dropped_tx.iter().sum()
    }

    pub fn total_dropped_comp(&self) -> f64 {
        self.dropped_comp.iter().sum()
    }
}

const FEAS_RTOL: f64 = 1e-9;

fn within(value: f64, bound: f64) -> bool {
    value <= bound + FEAS_RTOL * bound.abs().max(1.0)
}

/// Checks every per-slot constraint, then applies the energy, cost and
/// battery bookkeeping. Causality breaches are reported, not repaired.
pub fn evaluate_slot(
    config: &NetworkConfig,
    obs: &SlotObservation,
    dec: &SlotDecision,
    bat: &BatteryState,
) -> Result<SlotOutcome, ModelError> {
    let (n, m) = (config.n_bs(), config.n_users());
    if dec.alpha.len() != m || dec.beta.len() != m || dec.harvest.len() != n || dec.purchase.len() != n {
        return Err(ModelError::Shape("decision does not match network".into()));
    }
    if bat.level.len() != n {
        return Err(ModelError::Shape("battery state does not match network".into()));
    }
    let infeasible = |msg: String| Err(ModelError::Infeasible(msg));

    let mut tx_energy = vec![0.0; n];
    let mut comp_energy = vec![0.0; n];
    let mut comp_load = vec![0.0; n];
    let mut cost_tx = vec![0.0; n];
    let mut cost_comp = vec![0.0; n];
    let mut dropped_tx = vec![0.0; m];
    let mut dropped_comp = vec![0.0; m];

    for (u, user) in config.users.iter().enumerate() {
        let (a, b) = (&dec.alpha[u], &dec.beta[u]);
        if a.len() != user.candidates.len() || b.len() != user.candidates.len() {
            return Err(ModelError::Shape(format!("user {u}: split length differs from candidate set")));
        }
        if let Some(x) = a.iter().chain(b).find(|x| !(x.is_finite() && **x >= 0.0)) {
            return infeasible(format!("user {u}: negative or non-finite split {x}"));
        }
        let served_tx: f64 = a.iter().sum();
        let served_comp: f64 = b.iter().sum();
        if !within(served_tx, obs.tx_demand[u]) {
            return infeasible(format!(
                "user {u}: routed traffic {served_tx} exceeds demand {}",
                obs.tx_demand[u]
            ));
        }
        if !within(served_comp, obs.comp_demand[u]) {
            return infeasible(format!(
                "user {u}: offloaded tasks {served_comp} exceed demand {}",
                obs.comp_demand[u]
            ));
        }
        for (k, &j) in user.candidates.iter().enumerate() {
            if a[k] > 0.0 {
                tx_energy[j] += obs.tx_energy.get(j, u) * a[k];
            }
            comp_load[j] += b[k];
        }
        dropped_tx[u] = (obs.tx_demand[u] - served_tx).max(0.0);
        dropped_comp[u] = (obs.comp_demand[u] - served_comp).max(0.0);
        cost_tx[user.home_bs] += user.tx_drop_cost * dropped_tx[u];
        cost_comp[user.home_bs] += user.comp_drop_cost * dropped_comp[u];
    }

    let mut cost_grid = vec![0.0; n];
    let mut battery_after = vec![0.0; n];
    let mut causality_violations = Vec::new();
    for i in 0..n {
        let station = &config.stations[i];
        if !within(comp_load[i], config.capacity(i)) {
            return infeasible(format!(
                "bs {i}: load {} exceeds capacity {}",
                comp_load[i],
                config.capacity(i)
            ));
        }
        let (e, g) = (dec.harvest[i], dec.purchase[i]);
        if !(e >= 0.0 && within(e, obs.harvest[i])) {
            return infeasible(format!("bs {i}: harvest {e} outside [0, {}]", obs.harvest[i]));
        }
        if !(g >= 0.0 && within(g, station.grid_cap)) {
            return infeasible(format!("grid purchase {g} at bs {i} outside [0, {}]", station.grid_cap));
        }
        comp_energy[i] = config.energy_per_task(i) * comp_load[i];
        cost_grid[i] = obs.grid_price * g;
        let spent = tx_energy[i] + comp_energy[i];
        if !within(spent, bat.level[i]) {
            causality_violations.push(i);
        }
        battery_after[i] = (bat.level[i] - spent + e + g).min(station.battery_cap);
    }

    Ok(SlotOutcome {
        tx_energy,
        comp_energy,
        cost_tx,
        cost_comp,
        cost_grid,
        dropped_tx,
        dropped_comp,
        battery_after,
        causality_violations,
    })
}

/// Lower and upper bounds on the realized joules-per-unit `p_{i,u}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyPerUnitBounds {
    pub min: f64,
    pub max: f64,
}

/// Worst-case per-slot quantities used to size the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBounds {
    pub pmin: f64,
    pub c_max: f64,
    pub e_tx_max: f64,
    pub e_com_max: f64,
    pub e_max: f64,
}

pub fn derive_bounds(config: &NetworkConfig, p: EnergyPerUnitBounds) -> Result<EnergyBounds, ModelError> {
    if config.stations.is_empty() {
        return Err(ModelError::EmptyNetwork);
    }
    if !(p.min > 0.0 && p.min.is_finite()) {
        return Err(ModelError::NonPositivePmin(p.min));
    }
    let c_tx_max = config.users.iter().map(|u| u.tx_drop_cost).fold(0.0, f64::max);
    let c_com_max = config.users.iter().map(|u| u.comp_drop_cost).fold(0.0, f64::max);
    let f_min = config.stations.iter().map(|s| s.cpu_speed).fold(f64::INFINITY, f64::min);
    let c_max = (c_tx_max / p.min).max(c_com_max / (config.energy_coeff * f_min * f_min));

    let e_tx_max = (0..config.n_bs())
        .map(|i| p.max * config.routable_users(i).count() as f64 * config.tx_arrival_cap)
        .fold(0.0, f64::max);
    let e_com_max = (0..config.n_bs())
        .map(|i| config.energy_per_task(i) * config.capacity(i))
        .fold(0.0, f64::max);
    Ok(EnergyBounds { pmin: p.min, c_max, e_tx_max, e_com_max, e_max: e_tx_max + e_com_max })
}

/// Largest admissible V for which the battery stays within `[0, B_max]`.
/// Returns infinity when `c_max` is zero (nothing to trade off).
pub fn v_max(config: &NetworkConfig, bounds: &EnergyBounds) -> Result<f64, ModelError> {
    let mut v = f64::INFINITY;
    for (i, s) in config.stations.iter().enumerate() {
        let required = bounds.e_max + config.harvest_cap + s.grid_cap;
        if s.battery_cap <= required {
            return Err(ModelError::BatteryTooSmall { bs: i, battery_cap: s.battery_cap, required });
        }
        if bounds.c_max > 0.0 {
            v = v.min((s.battery_cap - required) / bounds.c_max);
        }
    }
    Ok(v)
}

/// `theta = V * c_max + E_max`.
pub fn theta_for(v: f64, bounds: &EnergyBounds) -> f64 {
    v * bounds.c_max + bounds.e_max
}

/// Smallest battery that admits a given V at every BS.
pub fn battery_requirement(config: &NetworkConfig, v: f64, bounds: &EnergyBounds) -> f64 {
    let g_max = config.stations.iter().map(|s| s.grid_cap).fold(0.0, f64::max);
    theta_for(v, bounds) + config.harvest_cap + g_max
}

/// Drift constant `D = (N/2)[E_max^2 + (harvest_cap + g_max)^2]`, reported only.
pub fn drift_constant(config: &NetworkConfig, bounds: &EnergyBounds) -> f64 {
    let g_max = config.stations.iter().map(|s| s.grid_cap).fold(0.0, f64::max);
    0.5 * config.n_bs() as f64 * (bounds.e_max.powi(2) + (config.harvest_cap + g_max).powi(2))
}
