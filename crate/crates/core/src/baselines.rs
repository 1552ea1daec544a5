//! Benchmark policies: the controller without load balancing (SO-NG), and two
//! myopic policies that minimize the current slot's cost with grid purchase
//! (MO-G) or without it (MO-NG).

use nalgebra::DMatrix;

use crate::controller::{ControlError, Globe, GlobeParams, Policy};
use crate::model::{BatteryState, ModelError, NetworkConfig, SlotDecision, SlotObservation};
use crate::qp::Polytope;

/// Regularization for the myopic LP; large enough that the projection lands
/// on an LP optimum for costs of order 1e-3..1e2.
pub const MYOPIC_EPSILON: f64 = 1e9;

/// Same controller, every user restricted to its home BS.
#[derive(Debug, Clone)]
pub struct SoNg {
    inner: Globe,
    /// Position of the home BS in each user's full candidate list.
    home_slot: Vec<usize>,
    full: NetworkConfig,
}

impl SoNg {
    pub fn new(config: NetworkConfig, params: GlobeParams) -> Self {
        let home_slot = (0..config.n_users())
            .map(|u| config.candidate_slot(u, config.users[u].home_bs).expect("home BS is a candidate"))
            .collect();
        Self { inner: Globe::new(config.restricted_to_home(), params), home_slot, full: config }
    }
}

impl Policy for SoNg {
    fn name(&self) -> &'static str {
        "so_ng"
    }

    fn decide(&mut self, obs: &SlotObservation, battery: &BatteryState) -> Result<SlotDecision, ControlError> {
        let d = self.inner.decide(obs, battery)?;
        let mut out = SlotDecision::null(&self.full);
        for (u, &k) in self.home_slot.iter().enumerate() {
            out.alpha[u][k] = d.alpha[u][0];
            out.beta[u][k] = d.beta[u][0];
        }
        out.harvest = d.harvest;
        out.purchase = d.purchase;
        Ok(out)
    }

    fn last_iterations(&self) -> Option<usize> {
        self.inner.last_iterations()
    }
}

/// Myopic with grid: harvest everything and solve the one-slot cost LP
///
/// ```text
/// max  sum c_tx,u alpha + sum c_com,u beta - price * sum g
/// s.t. sum_j alpha_uj <= mu_u,  sum_j beta_uj <= lambda_u,  sum_u beta_ui <= cap_i,
///      g_i <= g_max,  sum_u p_iu alpha_ui + kappa f_i^2 sum_u beta_ui - g_i <= B_i
/// ```
///
/// exactly, as the projection of `MYOPIC_EPSILON * w` onto the feasible set.
#[derive(Debug, Clone)]
pub struct MoG {
    config: NetworkConfig,
    /// Flat offsets of `alpha[u]` and `beta[u]`; `g` follows them.
    offsets: Vec<usize>,
    n_split: usize,
}

impl MoG {
    pub fn new(config: NetworkConfig) -> Self {
        let mut offsets = Vec::with_capacity(config.n_users());
        let mut at = 0;
        for u in &config.users {
            offsets.push(at);
            at += u.candidates.len();
        }
        Self { config, offsets, n_split: at }
    }

    fn n_vars(&self) -> usize {
        2 * self.n_split + self.config.n_bs()
    }

    fn alpha_var(&self, u: usize, k: usize) -> usize {
        self.offsets[u] + k
    }

    fn beta_var(&self, u: usize, k: usize) -> usize {
        self.n_split + self.offsets[u] + k
    }

    fn g_var(&self, i: usize) -> usize {
        2 * self.n_split + i
    }

    fn polytope(&self, obs: &SlotObservation, battery: &BatteryState) -> Result<Polytope, ModelError> {
        let (n, m) = (self.config.n_bs(), self.config.n_users());
        let rows = 2 * m + 3 * n;
        let mut a = DMatrix::zeros(rows, self.n_vars());
        let mut b = vec![0.0; rows];
        for (u, user) in self.config.users.iter().enumerate() {
            for (k, &j) in user.candidates.iter().enumerate() {
                a[(u, self.alpha_var(u, k))] = 1.0;
                a[(m + u, self.beta_var(u, k))] = 1.0;
                a[(2 * m + j, self.beta_var(u, k))] = 1.0;
                a[(2 * m + 2 * n + j, self.alpha_var(u, k))] = obs.tx_energy.get(j, u);
                a[(2 * m + 2 * n + j, self.beta_var(u, k))] = self.config.energy_per_task(j);
            }
            b[u] = obs.tx_demand[u];
            b[m + u] = obs.comp_demand[u];
        }
        for i in 0..n {
            b[2 * m + i] = self.config.capacity(i);
            a[(2 * m + n + i, self.g_var(i))] = 1.0;
            b[2 * m + n + i] = self.config.stations[i].grid_cap;
            a[(2 * m + 2 * n + i, self.g_var(i))] = -1.0;
            b[2 * m + 2 * n + i] = battery.level[i].max(0.0);
        }
        Polytope::new(a, b).map_err(|e| ModelError::Infeasible(format!("myopic LP: {e}")))
    }

    /// Value per unit of each variable: drop cost avoided, or price paid.
    fn weights(&self, obs: &SlotObservation) -> Vec<f64> {
        let mut w = vec![0.0; self.n_vars()];
        for (u, user) in self.config.users.iter().enumerate() {
            for k in 0..user.candidates.len() {
                w[self.alpha_var(u, k)] = user.tx_drop_cost;
                w[self.beta_var(u, k)] = user.comp_drop_cost;
            }
        }
        for i in 0..self.config.n_bs() {
            w[self.g_var(i)] = -obs.grid_price;
        }
        w
    }
}

impl Policy for MoG {
    fn name(&self) -> &'static str {
        "mo_g"
    }

    fn decide(&mut self, obs: &SlotObservation, battery: &BatteryState) -> Result<SlotDecision, ControlError> {
        let poly = self.polytope(obs, battery)?;
        let y: Vec<f64> = self.weights(obs).iter().map(|w| MYOPIC_EPSILON * w).collect();
        let x = poly
            .project(&y)
            .map_err(|e| ModelError::Infeasible(format!("myopic LP at t={}: {e}", obs.t)))?
            .x;
        let mut dec = SlotDecision::null(&self.config);
        for (u, user) in self.config.users.iter().enumerate() {
            for k in 0..user.candidates.len() {
                dec.alpha[u][k] = x[self.alpha_var(u, k)];
                dec.beta[u][k] = x[self.beta_var(u, k)];
            }
        }
        for i in 0..self.config.n_bs() {
            dec.purchase[i] = x[self.g_var(i)].clamp(0.0, self.config.stations[i].grid_cap);
        }
        let g = dec.purchase.clone();
        shave_to_budget(&self.config, obs, &mut dec, |i| battery.level[i].max(0.0) + g[i]);
        dec.harvest.clone_from(&obs.harvest);
        Ok(dec)
    }

    fn spends_same_slot_purchase(&self) -> bool {
        true
    }
}

/// Removes round-off overshoot from the demand, capacity and energy rows
/// so the decision passes validation exactly.
fn shave_to_budget(config: &NetworkConfig, obs: &SlotObservation, dec: &mut SlotDecision, budget: impl Fn(usize) -> f64) {
    for (u, a) in dec.alpha.iter_mut().enumerate() {
        clip_row(a, obs.tx_demand[u]);
    }
    for (u, b) in dec.beta.iter_mut().enumerate() {
        clip_row(b, obs.comp_demand[u]);
    }
    let load = dec.comp_load(config);
    let mut energy: Vec<f64> = (0..config.n_bs()).map(|i| config.energy_per_task(i) * load[i]).collect();
    for (u, user) in config.users.iter().enumerate() {
        for (k, &j) in user.candidates.iter().enumerate() {
            energy[j] += obs.tx_energy.get(j, u) * dec.alpha[u][k];
        }
    }
    for i in 0..config.n_bs() {
        let f = (config.capacity(i) / load[i]).min(budget(i) / energy[i]).min(1.0);
        if f < 1.0 {
            for (u, user) in config.users.iter().enumerate() {
                for (k, &j) in user.candidates.iter().enumerate() {
                    if j == i {
                        dec.alpha[u][k] *= f;
                        dec.beta[u][k] *= f;
                    }
                }
            }
        }
    }
}

fn clip_row(row: &mut [f64], cap: f64) {
    row.iter_mut().for_each(|x| *x = x.max(0.0));
    let s: f64 = row.iter().sum();
    if s > cap {
        let f = if s > 0.0 { cap / s } else { 0.0 };
        row.iter_mut().for_each(|x| *x *= f);
    }
}

/// Myopic without grid: every BS serves its own users alone, in decreasing
/// order of drop cost per joule, until the battery or the capacity binds.
#[derive(Debug, Clone)]
pub struct MoNg {
    config: NetworkConfig,
    home_slot: Vec<usize>,
}

impl MoNg {
    pub fn new(config: NetworkConfig) -> Self {
        let home_slot = (0..config.n_users())
            .map(|u| config.candidate_slot(u, config.users[u].home_bs).expect("home BS is a candidate"))
            .collect();
        Self { config, home_slot }
    }
}

#[derive(Debug, Clone, Copy)]
enum Class {
    Tx,
    Comp,
}

impl Policy for MoNg {
    fn name(&self) -> &'static str {
        "mo_ng"
    }

    fn decide(&mut self, obs: &SlotObservation, battery: &BatteryState) -> Result<SlotDecision, ControlError> {
        let mut dec = SlotDecision::null(&self.config);
        for i in 0..self.config.n_bs() {
            let per_task = self.config.energy_per_task(i);
            // (value per joule, joules per unit, user, class)
            let mut items: Vec<(f64, f64, usize, Class)> = Vec::new();
            for u in self.config.home_users(i) {
                let user = &self.config.users[u];
                let p = obs.tx_energy.get(i, u);
                items.push((user.tx_drop_cost / p, p, u, Class::Tx));
                items.push((user.comp_drop_cost / per_task, per_task, u, Class::Comp));
            }
            items.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut energy = battery.level[i].max(0.0);
            let mut capacity = self.config.capacity(i);
            for (value, joules, u, class) in items {
                if value <= 0.0 {
                    continue;
                }
                let k = self.home_slot[u];
                let (demand, limit) = match class {
                    Class::Tx => (obs.tx_demand[u], f64::INFINITY),
                    Class::Comp => (obs.comp_demand[u], capacity),
                };
                let served = demand.min(limit).min(energy / joules).max(0.0);
                energy = (energy - served * joules).max(0.0);
                match class {
                    Class::Tx => dec.alpha[u][k] = served,
                    Class::Comp => {
                        dec.beta[u][k] = served;
                        capacity -= served;
                    }
                }
            }
            dec.harvest[i] = obs.harvest[i];
        }
        shave_to_budget(&self.config, obs, &mut dec, |i| battery.level[i].max(0.0));
        Ok(dec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::step;
    use crate::model::fixtures::{observation, ring};
    use crate::model::{evaluate_slot, EnergyPerUnitBounds};
    use rand::{Rng, SeedableRng};

    fn params(net: &NetworkConfig) -> GlobeParams {
        GlobeParams::derive(net, EnergyPerUnitBounds { min: 1.0, max: 8.0 }, 10.0).unwrap()
    }

    fn myopic_cost(net: &NetworkConfig, obs: &SlotObservation, dec: &SlotDecision) -> f64 {
        let full = BatteryState { level: net.stations.iter().map(|s| s.battery_cap).collect(), theta: 0.0 };
        evaluate_slot(net, obs, dec, &full).unwrap().total_cost()
    }

    #[test]
    fn so_ng_equals_globe_on_home_only_topology() {
        let net = ring(3).restricted_to_home();
        let p = params(&net);
        let obs = observation(&net, 5.0);
        let bat = BatteryState { level: vec![p.theta * 0.5, p.theta, p.theta * 1.2], theta: p.theta };
        let a = Globe::new(net.clone(), p.clone()).decide(&obs, &bat).unwrap();
        let b = SoNg::new(net, p).decide(&obs, &bat).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_balancing_beats_home_only_next_to_idle_bs() {
        let net = ring(2);
        let p = params(&net);
        let mut obs = observation(&net, 5.0);
        obs.comp_demand = vec![4000.0, 0.0];
        obs.tx_demand = vec![0.0, 0.0];
        let bat = BatteryState::uniform(2, p.theta, p.theta);
        let (_, globe, _) = step(&net, &mut Globe::new(net.clone(), p.clone()), &obs, &bat).unwrap();
        let (_, so_ng, _) = step(&net, &mut SoNg::new(net.clone(), p), &obs, &bat).unwrap();
        assert!(so_ng.total_dropped_comp() >= 1999.0);
        assert!(globe.total_dropped_comp() <= 1.0);
        assert!(globe.total_cost() <= so_ng.total_cost());
    }

    #[test]
    fn zero_demand_drops_nothing_anywhere() {
        let net = ring(3);
        let p = params(&net);
        let mut obs = observation(&net, 5.0);
        obs.tx_demand = vec![0.0; 3];
        obs.comp_demand = vec![0.0; 3];
        let bat = BatteryState::uniform(3, p.theta, p.theta);
        let mut policies: Vec<Box<dyn Policy>> = vec![
            Box::new(Globe::new(net.clone(), p.clone())),
            Box::new(SoNg::new(net.clone(), p.clone())),
            Box::new(MoG::new(net.clone())),
            Box::new(MoNg::new(net.clone())),
        ];
        for pol in policies.iter_mut() {
            let (_, out, _) = step(&net, pol.as_mut(), &obs, &bat).unwrap();
            assert_eq!(out.total_dropped_tx() + out.total_dropped_comp(), 0.0, "{}", pol.name());
        }
    }

    #[test]
    fn mo_g_skips_grid_when_price_exceeds_drop_value() {
        let net = ring(2);
        let mut obs = observation(&net, 5.0);
        // tx is worth 10/5 = 2 per J, computation 0.01/1.44e-3 ~ 6.9 per J
        obs.grid_price = 7.0;
        let bat = BatteryState::uniform(2, 1.0, 0.0);
        let dec = MoG::new(net.clone()).decide(&obs, &bat).unwrap();
        assert!(dec.purchase.iter().all(|&g| g <= 1e-6), "{:?}", dec.purchase);
        // drop-everything is never better than the LP optimum
        assert!(myopic_cost(&net, &obs, &dec) <= myopic_cost(&net, &obs, &SlotDecision::null(&net)) + 1e-9);
    }

    #[test]
    fn mo_g_serves_everything_with_abundant_battery() {
        let net = ring(3);
        let mut obs = observation(&net, 5.0);
        obs.comp_demand = vec![1500.0; 3];
        let bat = BatteryState::uniform(3, 900.0, 0.0);
        let dec = MoG::new(net.clone()).decide(&obs, &bat).unwrap();
        let out = evaluate_slot(&net, &obs, &dec, &bat).unwrap();
        assert!(out.total_dropped_tx() <= 1e-6 && out.total_dropped_comp() <= 1e-6);
        assert!(dec.purchase.iter().all(|&g| g <= 1e-6));
        assert!(out.total_cost() <= 1e-6);
    }

    #[test]
    fn mo_g_buys_free_grid_energy_with_empty_battery() {
        let net = ring(2);
        let mut obs = observation(&net, 5.0);
        obs.grid_price = 0.0;
        obs.tx_demand = vec![1.0, 1.0];
        obs.comp_demand = vec![100.0, 100.0];
        let bat = BatteryState::uniform(2, 0.0, 0.0);
        let dec = MoG::new(net.clone()).decide(&obs, &bat).unwrap();
        let out = evaluate_slot(&net, &obs, &dec, &bat).unwrap();
        // 5 + 0.144 J per BS fits within g_max = 10
        assert!(out.total_dropped_tx() <= 1e-6 && out.total_dropped_comp() <= 1e-6, "{out:?}");
        assert!((0..2).all(|i| out.energy(i) <= dec.purchase[i] + 1e-9));
    }

    /// Any feasible point of the myopic LP, drawn at random and pushed into the budget.
    fn random_myopic(rng: &mut impl Rng, net: &NetworkConfig, obs: &SlotObservation, bat: &BatteryState) -> SlotDecision {
        let mut dec = SlotDecision::null(net);
        for u in 0..net.n_users() {
            let k = net.users[u].candidates.len();
            let w: Vec<f64> = (0..=k).map(|_| rng.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            dec.alpha[u] = (0..k).map(|x| obs.tx_demand[u] * w[x] / s).collect();
            let w: Vec<f64> = (0..=k).map(|_| rng.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            dec.beta[u] = (0..k).map(|x| obs.comp_demand[u] * w[x] / s).collect();
        }
        for i in 0..net.n_bs() {
            dec.purchase[i] = rng.random::<f64>() * net.stations[i].grid_cap;
        }
        let g = dec.purchase.clone();
        shave_to_budget(net, obs, &mut dec, |i| bat.level[i] + g[i]);
        dec
    }

    #[test]
    fn mo_g_is_at_least_as_good_as_sampled_feasible_points() {
        let net = ring(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut mo_g = MoG::new(net.clone());
        for _ in 0..40 {
            let mut obs = observation(&net, rng.random_range(1.0..8.0));
            obs.grid_price = rng.random_range(0.0..3.0);
            for u in 0..3 {
                obs.tx_demand[u] = rng.random_range(0.0..20.0);
                obs.comp_demand[u] = rng.random_range(0.0..3000.0);
            }
            let bat = BatteryState { level: (0..3).map(|_| rng.random_range(0.0..60.0)).collect(), theta: 0.0 };
            let dec = mo_g.decide(&obs, &bat).unwrap();
            let (_, out, _) = step(&net, &mut mo_g, &obs, &bat).unwrap();
            let ours = out.total_cost();
            assert!((ours - myopic_cost(&net, &obs, &dec)).abs() <= 1e-9 * ours.max(1.0));
            let greedy = myopic_cost(&net, &obs, &MoNg::new(net.clone()).decide(&obs, &bat).unwrap());
            assert!(ours <= greedy + 1e-6 * greedy.max(1.0), "{ours} > greedy {greedy}");
            for _ in 0..100 {
                let other = myopic_cost(&net, &obs, &random_myopic(&mut rng, &net, &obs, &bat));
                assert!(ours <= other + 1e-6 * other.max(1.0), "{ours} > {other}");
            }
        }
    }

    #[test]
    fn mo_ng_serves_all_with_enough_battery() {
        let net = ring(3);
        let obs = observation(&net, 5.0);
        let bat = BatteryState::uniform(3, 1000.0, 0.0);
        let (_, out, _) = step(&net, &mut MoNg::new(net.clone()), &obs, &bat).unwrap();
        assert_eq!(out.total_dropped_tx() + out.total_dropped_comp(), 0.0);
        assert!(out.cost_grid.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn mo_ng_drops_everything_on_empty_battery() {
        let net = ring(3);
        let obs = observation(&net, 5.0);
        let bat = BatteryState::uniform(3, 0.0, 0.0);
        let (_, out, _) = step(&net, &mut MoNg::new(net.clone()), &obs, &bat).unwrap();
        let expected: f64 = net
            .users
            .iter()
            .enumerate()
            .map(|(u, user)| user.tx_drop_cost * obs.tx_demand[u] + user.comp_drop_cost * obs.comp_demand[u])
            .sum();
        assert!((out.total_cost() - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn mo_ng_greedy_matches_exhaustive_orderings() {
        // one BS, computation worth ~6.9/J ranks above traffic at 2/J
        let net = ring(1);
        let mut obs = observation(&net, 5.0);
        obs.tx_demand = vec![4.0];
        obs.comp_demand = vec![1000.0];
        let comp_energy = 1000.0 * net.energy_per_task(0);
        let bat = BatteryState::uniform(1, comp_energy, 0.0);
        let dec = MoNg::new(net.clone()).decide(&obs, &bat).unwrap();
        assert_eq!(dec.alpha[0][0], 0.0);
        assert!((dec.beta[0][0] - 1000.0).abs() <= 1e-9);
        // serve in both orders and keep the cheaper
        let mut tx_first = SlotDecision::null(&net);
        tx_first.alpha[0][0] = (comp_energy / 5.0).min(4.0);
        tx_first.beta[0][0] = (comp_energy - 5.0 * tx_first.alpha[0][0]) / net.energy_per_task(0);
        let mut comp_first = SlotDecision::null(&net);
        comp_first.beta[0][0] = 1000.0;
        let best = myopic_cost(&net, &obs, &tx_first).min(myopic_cost(&net, &obs, &comp_first));
        assert!((myopic_cost(&net, &obs, &dec) - best).abs() <= 1e-9);
    }
}
