//! Seeded generators for arrivals, harvested energy, grid prices and
//! channel-dependent transmission energy, plus trace record/replay.
//!
//! Every slot draws from its own ChaCha streams keyed by `(seed, t)`, so an
//! observation is a pure function of seed, configuration and slot index, and
//! changing one process (say, the task arrival rate) leaves the draws of the
//! others untouched. Sweeps rely on this for matched comparisons.

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EnergyPerUnitBounds, ModelError, NetworkConfig, SlotObservation, TxEnergy};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    InvalidConfig(String),
    #[error("trace holds {available} slots, slot {requested} requested")]
    TraceExhausted { requested: u64, available: u64 },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("trace truncated: slot {slot} is incomplete")]
    TruncatedTrace { slot: u64 },
    #[error("trace schema version {found} not supported (expected {TRACE_VERSION})")]
    Version { found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Poisson counts whose per-slot rate is uniform on
/// `[mean * (1 - spread), mean * (1 + spread)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProcess {
    pub mean: f64,
    pub spread: f64,
}

impl ArrivalProcess {
    pub fn new(mean: f64, spread: f64) -> Self {
        Self { mean, spread }
    }

    fn sample<R: Rng>(&self, rng: &mut R, cap: f64) -> f64 {
        let rate = if self.spread > 0.0 {
            self.mean * (1.0 - self.spread + 2.0 * self.spread * rng.random::<f64>())
        } else {
            self.mean
        };
        if rate <= 0.0 {
            return 0.0;
        }
        let count: f64 = Poisson::new(rate).expect("positive finite rate").sample(rng);
        count.min(cap)
    }
}

/// Rayleigh-faded downlink: the received SNR `H * P_tx / sigma^2` of a pair is
/// exponential with the configured median, clipped to `[floor, ceil]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    /// Median SNR (dB) per (bs, user), BS-major. Entries of non-candidate pairs are ignored.
    pub median_snr_db: Vec<f64>,
    pub snr_floor_db: f64,
    pub snr_ceil_db: f64,
    /// Fading draws averaged per slot to estimate the expected energy per unit.
    pub mc_draws: usize,
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Joules to push one traffic unit of `data_size` bits at the Shannon rate.
pub fn tx_energy_per_unit(tx_power: f64, data_size: f64, bandwidth: f64, snr: f64) -> f64 {
    tx_power * data_size / (bandwidth * (1.0 + snr).log2())
}

/// Received SNR for channel gain `gain`.
pub fn snr(gain: f64, tx_power: f64, noise: f64) -> f64 {
    gain * tx_power / noise
}

impl ChannelModel {
    /// Home pairs at `home_db`, every other candidate pair at `neighbor_db`.
    pub fn home_and_neighbor(net: &NetworkConfig, home_db: f64, neighbor_db: f64) -> Self {
        let mut median = vec![f64::NAN; net.n_bs() * net.n_users()];
        for (u, user) in net.users.iter().enumerate() {
            for &j in &user.candidates {
                median[j * net.n_users() + u] = if j == user.home_bs { home_db } else { neighbor_db };
            }
        }
        Self { median_snr_db: median, snr_floor_db: 0.0, snr_ceil_db: 30.0, mc_draws: 64 }
    }

    fn median(&self, net: &NetworkConfig, bs: usize, user: usize) -> f64 {
        self.median_snr_db[bs * net.n_users() + user]
    }

    /// Range the per-slot estimate of `p_{i,u}` can take. Because every fading
    /// draw is clipped, any average lies within these bounds.
    pub fn energy_bounds(&self, net: &NetworkConfig) -> EnergyPerUnitBounds {
        let (lo, hi) = (db_to_linear(self.snr_floor_db), db_to_linear(self.snr_ceil_db));
        let mut out = EnergyPerUnitBounds { min: f64::INFINITY, max: 0.0 };
        for user in &net.users {
            for &j in &user.candidates {
                let p_tx = net.stations[j].tx_power;
                out.min = out.min.min(tx_energy_per_unit(p_tx, user.data_size, net.bandwidth, hi));
                out.max = out.max.max(tx_energy_per_unit(p_tx, user.data_size, net.bandwidth, lo));
            }
        }
        out
    }

    fn expected_energy<R: Rng>(&self, net: &NetworkConfig, bs: usize, user: usize, rng: &mut R) -> f64 {
        let (lo, hi) = (db_to_linear(self.snr_floor_db), db_to_linear(self.snr_ceil_db));
        // exponential with median m has mean m / ln 2
        let mean_snr = db_to_linear(self.median(net, bs, user)) / std::f64::consts::LN_2;
        let p_tx = net.stations[bs].tx_power;
        let data = net.users[user].data_size;
        let total: f64 = (0..self.mc_draws)
            .map(|_| {
                let x: f64 = Exp1.sample(rng);
                tx_energy_per_unit(p_tx, data, net.bandwidth, (x * mean_snr).clamp(lo, hi))
            })
            .sum();
        total / self.mc_draws as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub seed: u64,
    /// Per-user traffic arrivals (units/slot).
    pub tx_arrivals: Vec<ArrivalProcess>,
    /// Per-user task arrivals (tasks/slot).
    pub comp_arrivals: Vec<ArrivalProcess>,
    /// Grid price is uniform on `[mean * (1 - spread), mean * (1 + spread)]`.
    pub price_mean: f64,
    pub price_spread: f64,
    pub channel: ChannelModel,
}

impl EnvConfig {
    pub fn validate(&self, net: &NetworkConfig) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidConfig(msg));
        if self.tx_arrivals.len() != net.n_users() || self.comp_arrivals.len() != net.n_users() {
            return bad("one arrival process per user is required".into());
        }
        for (u, p) in self.tx_arrivals.iter().chain(&self.comp_arrivals).enumerate() {
            if !(p.mean >= 0.0 && p.mean.is_finite() && (0.0..=1.0).contains(&p.spread)) {
                return bad(format!("arrival process {u}: mean must be >= 0, spread in [0, 1]"));
            }
        }
        if !(self.price_mean >= 0.0 && (0.0..=1.0).contains(&self.price_spread)) {
            return bad("price mean must be >= 0 and spread in [0, 1]".into());
        }
        let ch = &self.channel;
        if ch.median_snr_db.len() != net.n_bs() * net.n_users() {
            return bad("channel median table must be n_bs x n_users".into());
        }
        if ch.mc_draws == 0 || !(ch.snr_floor_db < ch.snr_ceil_db) {
            return bad("channel needs mc_draws >= 1 and snr_floor_db < snr_ceil_db".into());
        }
        for (u, user) in net.users.iter().enumerate() {
            for &j in &user.candidates {
                if !ch.median(net, j, u).is_finite() {
                    return bad(format!("channel median for pair ({j}, {u}) is not set"));
                }
            }
        }
        if db_to_linear(ch.snr_floor_db) <= 0.0 {
            return bad("snr floor must be positive in linear scale".into());
        }
        Ok(())
    }
}

/// Anything that yields the exogenous state of slot `t`.
pub trait ObservationSource {
    fn observe(&mut self, t: u64) -> Result<SlotObservation, EnvError>;
}

/// Stochastic environment. Cheap to clone; observation at `t` does not depend
/// on which slots were drawn before.
#[derive(Debug, Clone)]
pub struct Environment {
    network: NetworkConfig,
    config: EnvConfig,
    cursor: u64,
}

const STREAM_TX: u64 = 0;
const STREAM_COMP: u64 = 1;
const STREAM_ENERGY: u64 = 2;
const STREAM_CHANNEL: u64 = 3;
const STREAMS_PER_SLOT: u64 = 4;

impl Environment {
    pub fn new(network: NetworkConfig, config: EnvConfig) -> Result<Self, EnvError> {
        network.validate()?;
        config.validate(&network)?;
        Ok(Self { network, config, cursor: 0 })
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.network
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn stream(&self, t: u64, which: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(t.wrapping_mul(STREAMS_PER_SLOT).wrapping_add(which));
        rng
    }

    pub fn observation_at(&self, t: u64) -> SlotObservation {
        let net = &self.network;
        let cfg = &self.config;

        let mut rng = self.stream(t, STREAM_TX);
        let tx_demand = cfg.tx_arrivals.iter().map(|p| p.sample(&mut rng, net.tx_arrival_cap)).collect();
        let mut rng = self.stream(t, STREAM_COMP);
        let comp_demand = cfg.comp_arrivals.iter().map(|p| p.sample(&mut rng, net.comp_arrival_cap)).collect();

        let mut rng = self.stream(t, STREAM_ENERGY);
        let harvest = (0..net.n_bs()).map(|_| net.harvest_cap * rng.random::<f64>()).collect();
        let grid_price = cfg.price_mean * (1.0 - cfg.price_spread + 2.0 * cfg.price_spread * rng.random::<f64>());

        let mut rng = self.stream(t, STREAM_CHANNEL);
        let mut tx_energy = TxEnergy::new(net.n_bs(), net.n_users());
        for (u, user) in net.users.iter().enumerate() {
            for &j in &user.candidates {
                tx_energy.set(j, u, cfg.channel.expected_energy(net, j, u, &mut rng));
            }
        }
        SlotObservation { t, tx_demand, comp_demand, harvest, grid_price, tx_energy }
    }

    pub fn next_observation(&mut self) -> SlotObservation {
        let obs = self.observation_at(self.cursor);
        self.cursor += 1;
        obs
    }

    pub fn record(&self, horizon: u64, config_digest: &str) -> Trace {
        Trace {
            seed: self.config.seed,
            config_digest: config_digest.to_string(),
            n_bs: self.network.n_bs(),
            n_users: self.network.n_users(),
            observations: (0..horizon).map(|t| self.observation_at(t)).collect(),
        }
    }
}

impl ObservationSource for Environment {
    fn observe(&mut self, t: u64) -> Result<SlotObservation, EnvError> {
        self.cursor = t + 1;
        Ok(self.observation_at(t))
    }
}

/// Recorded observation stream.
///
/// CSV layout (version 1), six columns `kind,t,bs,user,a,b`:
///
/// | kind   | t | bs | user | a        | b       |
/// |--------|---|----|------|----------|---------|
/// | `meta` |   |    |      | key      | value   |
/// | `price`| t |    |      | price    |         |
/// | `user` | t |    | u    | mu       | lambda  |
/// | `bs`   | t | i  |      | harvest  |         |
/// | `p`    | t | i  | u    | p_{i,u}  |         |
/// | `end`  | t |    |      |          |         |
///
/// Meta keys: `version`, `seed`, `digest`, `n_bs`, `n_users`, `slots`. Only
/// candidate pairs get `p` rows. Each slot closes with an `end` row; a slot
/// without one is treated as truncated. Floats use Rust's shortest
/// round-trip formatting, so replay is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub seed: u64,
    pub config_digest: String,
    pub n_bs: usize,
    pub n_users: usize,
    pub observations: Vec<SlotObservation>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EnvError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["kind", "t", "bs", "user", "a", "b"])?;
        let meta = [
            ("version", TRACE_VERSION.to_string()),
            ("seed", self.seed.to_string()),
            ("digest", self.config_digest.clone()),
            ("n_bs", self.n_bs.to_string()),
            ("n_users", self.n_users.to_string()),
            ("slots", self.observations.len().to_string()),
        ];
        for (k, v) in &meta {
            out.write_record(["meta", "", "", "", k, v])?;
        }
        for obs in &self.observations {
            let t = obs.t.to_string();
            out.write_record(["price", &t, "", "", &obs.grid_price.to_string(), ""])?;
            for u in 0..self.n_users {
                out.write_record([
                    "user",
                    &t,
                    "",
                    &u.to_string(),
                    &obs.tx_demand[u].to_string(),
                    &obs.comp_demand[u].to_string(),
                ])?;
            }
            for (i, h) in obs.harvest.iter().enumerate() {
                out.write_record(["bs", &t, &i.to_string(), "", &h.to_string(), ""])?;
            }
            for i in 0..self.n_bs {
                for u in 0..self.n_users {
                    let p = obs.tx_energy.get(i, u);
                    if p.is_finite() {
                        out.write_record(["p", &t, &i.to_string(), &u.to_string(), &p.to_string(), ""])?;
                    }
                }
            }
            out.write_record(["end", &t, "", "", "", ""])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Trace, EnvError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let malformed = |msg: String| EnvError::MalformedTrace(msg);
        let num = |s: &str, what: &str| -> Result<f64, EnvError> {
            s.parse::<f64>().map_err(|_| malformed(format!("bad {what} value '{s}'")))
        };
        let idx = |s: &str, what: &str| -> Result<usize, EnvError> {
            s.parse::<usize>().map_err(|_| malformed(format!("bad {what} index '{s}'")))
        };

        let mut meta = std::collections::HashMap::new();
        let mut trace: Option<Trace> = None;
        let mut current: Option<SlotObservation> = None;
        let mut declared_slots = 0u64;

        for rec in reader.records() {
            let rec = rec?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let kind = field(0);
            if kind == "meta" {
                if trace.is_some() {
                    return Err(malformed("meta row after slot data".into()));
                }
                meta.insert(field(4).to_string(), field(5).to_string());
                continue;
            }
            let tr = match trace.as_mut() {
                Some(tr) => tr,
                None => {
                    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| malformed(format!("missing meta '{k}'")));
                    let version = get("version")?;
                    if version != TRACE_VERSION.to_string() {
                        return Err(EnvError::Version { found: version });
                    }
                    declared_slots = get("slots")?.parse().map_err(|_| malformed("bad slots".into()))?;
                    trace = Some(Trace {
                        seed: get("seed")?.parse().map_err(|_| malformed("bad seed".into()))?,
                        config_digest: get("digest")?,
                        n_bs: idx(&get("n_bs")?, "n_bs")?,
                        n_users: idx(&get("n_users")?, "n_users")?,
                        observations: Vec::new(),
                    });
                    trace.as_mut().unwrap()
                }
            };
            let t: u64 = field(1).parse().map_err(|_| malformed(format!("bad slot index '{}'", field(1))))?;
            let expected_t = tr.observations.len() as u64;
            if t != expected_t {
                return Err(malformed(format!("slot {t} out of order (expected {expected_t})")));
            }
            let obs = current.get_or_insert_with(|| SlotObservation {
                t,
                tx_demand: vec![f64::NAN; tr.n_users],
                comp_demand: vec![f64::NAN; tr.n_users],
                harvest: vec![f64::NAN; tr.n_bs],
                grid_price: f64::NAN,
                tx_energy: TxEnergy::new(tr.n_bs, tr.n_users),
            });
            match kind {
                "price" => obs.grid_price = num(field(4), "price")?,
                "user" => {
                    let u = idx(field(3), "user")?;
                    if u >= tr.n_users {
                        return Err(malformed(format!("user {u} out of range")));
                    }
                    obs.tx_demand[u] = num(field(4), "mu")?;
                    obs.comp_demand[u] = num(field(5), "lambda")?;
                }
                "bs" => {
                    let i = idx(field(2), "bs")?;
                    if i >= tr.n_bs {
                        return Err(malformed(format!("bs {i} out of range")));
                    }
                    obs.harvest[i] = num(field(4), "harvest")?;
                }
                "p" => {
                    let (i, u) = (idx(field(2), "bs")?, idx(field(3), "user")?);
                    if i >= tr.n_bs || u >= tr.n_users {
                        return Err(malformed(format!("pair ({i}, {u}) out of range")));
                    }
                    obs.tx_energy.set(i, u, num(field(4), "p")?);
                }
                "end" => {
                    let obs = current.take().unwrap();
                    let complete = obs.grid_price.is_finite()
                        && obs.tx_demand.iter().chain(&obs.comp_demand).chain(&obs.harvest).all(|x| x.is_finite());
                    if !complete {
                        return Err(EnvError::TruncatedTrace { slot: t });
                    }
                    tr.observations.push(obs);
                }
                other => return Err(malformed(format!("unknown row kind '{other}'"))),
            }
        }
        if let Some(obs) = current {
            return Err(EnvError::TruncatedTrace { slot: obs.t });
        }
        let trace = trace.ok_or_else(|| malformed("no slot data".into()))?;
        if (trace.observations.len() as u64) < declared_slots {
            return Err(EnvError::TruncatedTrace { slot: trace.observations.len() as u64 });
        }
        Ok(trace)
    }

    pub fn replay(self) -> Replay {
        Replay { trace: self }
    }
}

/// Serves recorded observations verbatim; the generators are never consulted.
#[derive(Debug, Clone)]
pub struct Replay {
    trace: Trace,
}

impl Replay {
    pub fn trace(&self) -> &Trace {
        &self.trace
    }
}

impl ObservationSource for Replay {
    fn observe(&mut self, t: u64) -> Result<SlotObservation, EnvError> {
        self.trace
            .observations
            .get(t as usize)
            .cloned()
            .ok_or(EnvError::TraceExhausted { requested: t, available: self.trace.len() as u64 })
    }
}

impl<S: ObservationSource + ?Sized> ObservationSource for &mut S {
    fn observe(&mut self, t: u64) -> Result<SlotObservation, EnvError> {
        (**self).observe(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::ring;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn env_config(net: &NetworkConfig, seed: u64) -> EnvConfig {
        EnvConfig {
            seed,
            tx_arrivals: vec![ArrivalProcess::new(5.0, 1.0); net.n_users()],
            comp_arrivals: vec![ArrivalProcess::new(1400.0, 0.5); net.n_users()],
            price_mean: 1.0,
            price_spread: 1.0,
            channel: ChannelModel::home_and_neighbor(net, 10.0, 4.0),
        }
    }

    #[test]
    fn degenerate_channel_energy() {
        // log2(1 + snr) = 1 at snr = 1
        let p = tx_energy_per_unit(1.0, 1e8, 2e7, snr(0.01, 1.0, 0.01));
        assert_relative_eq!(p, 5.0, max_relative = 1e-12);
    }

    #[test]
    fn harvest_is_uniform_on_cap() {
        let net = ring(5);
        let env = Environment::new(net.clone(), env_config(&net, 3)).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for t in 0..20_000 {
            for h in env.observation_at(t).harvest {
                assert!((0.0..=10.0).contains(&h));
                sum += h;
                n += 1;
            }
        }
        // 10^5 draws
        assert_relative_eq!(sum / n as f64, 5.0, max_relative = 0.01);
    }

    #[test]
    fn zero_rate_means_zero_arrivals() {
        let net = ring(3);
        let mut cfg = env_config(&net, 1);
        cfg.tx_arrivals = vec![ArrivalProcess::new(0.0, 1.0); 3];
        let env = Environment::new(net, cfg).unwrap();
        assert!((0..500).all(|t| env.observation_at(t).tx_demand.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn arrivals_are_capped() {
        let mut net = ring(3);
        net.tx_arrival_cap = 4.0;
        let env = Environment::new(net.clone(), env_config(&net, 1)).unwrap();
        let max = (0..2000).flat_map(|t| env.observation_at(t).tx_demand).fold(0.0, f64::max);
        assert_eq!(max, 4.0);
    }

    #[test]
    fn observations_respect_invariants_and_bounds() {
        let net = ring(5);
        let cfg = env_config(&net, 11);
        let bounds = cfg.channel.energy_bounds(&net);
        let env = Environment::new(net.clone(), cfg).unwrap();
        for t in 0..300 {
            let obs = env.observation_at(t);
            obs.check(&net).unwrap();
            for (u, user) in net.users.iter().enumerate() {
                for &j in &user.candidates {
                    let p = obs.tx_energy.get(j, u);
                    assert!(p >= bounds.min && p <= bounds.max);
                }
            }
        }
    }

    #[test]
    fn streams_are_independent_per_process() {
        let net = ring(4);
        let base = env_config(&net, 5);
        let mut heavier = base.clone();
        heavier.comp_arrivals = vec![ArrivalProcess::new(3000.0, 0.5); 4];
        let a = Environment::new(net.clone(), base).unwrap();
        let b = Environment::new(net, heavier).unwrap();
        for t in 0..50 {
            let (oa, ob) = (a.observation_at(t), b.observation_at(t));
            assert_eq!(oa.tx_demand, ob.tx_demand);
            assert_eq!(oa.harvest, ob.harvest);
            assert_eq!(oa.tx_energy, ob.tx_energy);
            assert_ne!(oa.comp_demand, ob.comp_demand);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn determinism_in_seed_and_slot(seed in any::<u64>(), t in 0u64..1_000_000) {
            let net = ring(3);
            let e1 = Environment::new(net.clone(), env_config(&net, seed)).unwrap();
            let mut e2 = Environment::new(net.clone(), env_config(&net, seed)).unwrap();
            prop_assert_eq!(e1.observation_at(t), e2.observe(t).unwrap());
        }

        #[test]
        fn trace_round_trip_is_bit_exact(seed in any::<u64>(), slots in 1u64..6) {
            let net = ring(3);
            let env = Environment::new(net.clone(), env_config(&net, seed)).unwrap();
            let trace = env.record(slots, "abc");
            let mut buf = Vec::new();
            trace.write_csv(&mut buf).unwrap();
            let back = Trace::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, trace);
        }
    }

    #[test]
    fn truncated_trace_is_rejected_at_slot_boundary() {
        let net = ring(3);
        let env = Environment::new(net.clone(), env_config(&net, 2)).unwrap();
        let mut buf = Vec::new();
        env.record(4, "d").write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // cut inside slot 2
        let cut = text.find("price,2,").unwrap() + 40;
        let cut = text[..cut].rfind('\n').unwrap() + 1;
        let err = Trace::read_csv(&text.as_bytes()[..cut]).unwrap_err();
        assert!(matches!(err, EnvError::TruncatedTrace { slot: 2 }), "{err}");
        // cut cleanly after slot 1
        let cut = text.find("price,2,").unwrap();
        let err = Trace::read_csv(&text.as_bytes()[..cut]).unwrap_err();
        assert!(matches!(err, EnvError::TruncatedTrace { slot: 2 }), "{err}");
    }

    #[test]
    fn replay_past_end_errors() {
        let net = ring(2);
        let env = Environment::new(net.clone(), env_config(&net, 2)).unwrap();
        let mut replay = env.record(3, "d").replay();
        assert_eq!(replay.observe(2).unwrap(), env.observation_at(2));
        assert!(matches!(replay.observe(3), Err(EnvError::TraceExhausted { requested: 3, available: 3 })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let text = "kind,t,bs,user,a,b\nmeta,,,,version,9\nmeta,,,,slots,0\nprice,0,,,1,\n";
        assert!(matches!(Trace::read_csv(text.as_bytes()), Err(EnvError::Version { .. })));
    }
}
