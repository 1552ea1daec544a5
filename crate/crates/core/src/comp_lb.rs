//! Computation load balancing.
//!
//! Per slot, maximize `sum_{u,j} c_{u,j} beta_{u,j} - beta_{u,j}^2 / (2 eps)` with
//! `c_{u,j} = V c_com,u + b~_j kappa f_j^2`, subject to each user's demand and each
//! BS's capacity. Relaxing the capacities with multipliers `gamma_j` splits the
//! problem into per-user water-filling steps (closed form) coordinated by a
//! projected gradient step on `gamma`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::model::{NetworkConfig, SlotObservation};
use crate::qp::{Polytope, QpError};

pub const DEFAULT_EPSILON: f64 = 1e7;


/// One slot's load-balancing problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ClbInstance {
    /// Candidate BSs of each user.
    pub candidates: Vec<Vec<usize>>,
    /// `c_{u,j}` in candidate order, before any multiplier.
    pub coeffs: Vec<Vec<f64>>,
    pub demand: Vec<f64>,
    pub capacity: Vec<f64>,
    pub epsilon: f64,
}

impl ClbInstance {
    pub fn new(config: &NetworkConfig, obs: &SlotObservation, b_tilde: &[f64], v: f64, epsilon: f64) -> Self {
        let coeffs = config
            .users
            .iter()
            .map(|u| {
                u.candidates
                    .iter()
                    .map(|&j| v * u.comp_drop_cost + b_tilde[j] * config.energy_per_task(j))
                    .collect()
            })
            .collect();
        Self {
            candidates: config.users.iter().map(|u| u.candidates.clone()).collect(),
            coeffs,
            demand: obs.comp_demand.clone(),
            capacity: (0..config.n_bs()).map(|i| config.capacity(i)).collect(),
            epsilon,
        }
    }

    pub fn n_bs(&self) -> usize {
        self.capacity.len()
    }

    pub fn n_users(&self) -> usize {
        self.demand.len()
    }

    pub fn loads(&self, beta: &[Vec<f64>]) -> Vec<f64> {
        let mut load = vec![0.0; self.n_bs()];
        for (cands, row) in self.candidates.iter().zip(beta) {
            for (&j, &b) in cands.iter().zip(row) {
                load[j] += b;
            }
        }
        load
    }

    /// Largest capacity excess in tasks, zero when every BS is within capacity.
    pub fn max_violation(&self, beta: &[Vec<f64>]) -> f64 {
        self.loads(beta)
            .iter()
            .zip(&self.capacity)
            .map(|(l, c)| l - c)
            .fold(0.0, f64::max)
    }

    pub fn lp_objective(&self, beta: &[Vec<f64>]) -> f64 {
        self.coeffs
            .iter()
            .zip(beta)
            .flat_map(|(c, b)| c.iter().zip(b))
            .map(|(c, b)| c * b)
            .sum()
    }

    pub fn qp_objective(&self, beta: &[Vec<f64>]) -> f64 {
        let penalty: f64 = beta.iter().flatten().map(|b| b * b).sum::<f64>() / (2.0 * self.epsilon);
        self.lp_objective(beta) - penalty
    }

    /// BSs each user can reach, counted per BS.
    fn fan_in(&self) -> Vec<usize> {
        let mut n = vec![0; self.n_bs()];
        for cands in &self.candidates {
            for &j in cands {
                n[j] += 1;
            }
        }
        n
    }
}

/// Maximizer of `sum_j c_j b_j - b_j^2 / (2 eps)` over `b >= 0`, `sum_j b_j <= demand`,
/// with the water level `nu` of the budget constraint.
pub fn inner_subproblem_with_level(coeffs: &[f64], demand: f64, eps: f64) -> (Vec<f64>, f64) {
    let mut beta = vec![0.0; coeffs.len()];
    let nu = inner_into(coeffs, demand, eps, &mut beta, &mut Vec::new());
    (beta, nu)
}

/// Allocation-free form of [`inner_subproblem_with_level`]; `scratch` is reused
/// for sorting.
pub fn inner_into(coeffs: &[f64], demand: f64, eps: f64, beta: &mut [f64], scratch: &mut Vec<f64>) -> f64 {
    debug_assert_eq!(coeffs.len(), beta.len());
    beta.fill(0.0);
    let top = coeffs.iter().fold(0.0f64, |m, &c| m.max(c));
    if demand <= 0.0 || top <= 0.0 {
        return if demand <= 0.0 { top } else { 0.0 };
    }
    let unconstrained: f64 = coeffs.iter().map(|&c| eps * c.max(0.0)).sum();
    let nu = if unconstrained <= demand {
        0.0
    } else {
        scratch.clear();
        scratch.extend(coeffs.iter().copied().filter(|&c| c > 0.0));
        scratch.sort_by(|a, b| b.total_cmp(a));
        let budget = demand / eps;
        let mut sum = 0.0;
        let mut level = 0.0;
        for k in 0..scratch.len() {
            sum += scratch[k];
            level = (sum - budget) / (k + 1) as f64;
            if k + 1 == scratch.len() || level >= scratch[k + 1] {
                break;
            }
        }
        level
    };
    for (b, &c) in beta.iter_mut().zip(coeffs) {
        *b = eps * (c - nu).max(0.0);
    }
    let total: f64 = beta.iter().sum();
    if total > demand {
        beta.iter_mut().for_each(|b| *b *= demand / total);
        // rescaling can still overshoot by an ulp; take it off the largest share
        let over = beta.iter().sum::<f64>() - demand;
        if over > 0.0 {
            if let Some(b) = beta.iter_mut().max_by(|a, b| a.total_cmp(b)) {
                *b = (*b - over).max(0.0);
            }
        }
    }
    nu
}

pub fn inner_subproblem(coeffs: &[f64], demand: f64, eps: f64) -> Vec<f64> {
    inner_subproblem_with_level(coeffs, demand, eps).0
}

/// `max(0, gamma - step * (capacity - load))`.
pub fn dual_update(gamma: f64, step: f64, capacity: f64, load: f64) -> f64 {
    (gamma - step * (capacity - load)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    /// Fixed diagonal step with Nesterov extrapolation, restarted whenever the
    /// extrapolated move points against the projected step.
    Accelerated,
    /// The fixed diagonal step alone.
    Fixed,
    /// Fixed step divided by `sqrt(k)`.
    Diminishing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualSettings {
    pub step: StepRule,
    /// Multiplies the base step `1 / (2 * eps * users routable to the BS)`,
    /// which keeps the dual gradient step non-expansive.
    pub step_scale: f64,
    /// Stop once every capacity residual (excess everywhere, slack where
    /// `gamma > 0`) is within this fraction of capacity ...
    pub violation_tol: f64,
    /// ... and the multipliers move less than this, relative to `max(1, |gamma|)`.
    pub gamma_tol: f64,
    pub max_iters: usize,
    /// Carry multipliers over from the previous slot.
    pub warm_start: bool,
}

impl Default for DualSettings {
    fn default() -> Self {
        Self {
            step: StepRule::Accelerated,
            step_scale: 1.0,
            violation_tol: 1e-6,
            gamma_tol: 1e-8,
            max_iters: 5000,
            warm_start: true,
        }
    }
}

/// Multipliers carried between slots when warm starting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub gamma: Vec<f64>,
}

impl DualState {
    pub fn cold(n_bs: usize) -> Self {
        Self { gamma: vec![0.0; n_bs] }
    }

    pub fn with_gamma(gamma: Vec<f64>) -> Self {
        Self { gamma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub gamma: Vec<f64>,
    pub qp_objective: f64,
    pub lp_objective: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolveReport {
    /// Feasible allocation after capacity repair, `beta[u][k]` in candidate order.
    pub beta: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Capacity excess of the last iterate, before repair.
    pub max_violation: f64,
    pub qp_objective: f64,
    pub lp_objective: f64,
    pub converged: bool,
}

/// Two-level loop: per-user water filling under `gamma`, then a projected step
/// on `gamma` from the capacity residuals. Each iteration's inner solves are
/// independent of one another.
pub fn solve_distributed(
    inst: &ClbInstance,
    settings: &DualSettings,
    state: &mut DualState,
    mut dump: Option<&mut Vec<IterationRecord>>,
) -> QpSolveReport {
    let n = inst.n_bs();
    if !settings.warm_start || state.gamma.len() != n {
        *state = DualState::cold(n);
    }
    let base: Vec<f64> = inst
        .fan_in()
        .iter()
        .map(|&k| settings.step_scale / (2.0 * inst.epsilon * k.max(1) as f64))
        .collect();

    // `state.gamma` is the iterate, `y` the point the users respond to
    let mut y = state.gamma.clone();
    let mut momentum = 1.0f64;
    let mut beta: Vec<Vec<f64>> = inst.candidates.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut scratch = Vec::new();
    let mut load = vec![0.0; n];
    let mut violation = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut coeffs: Vec<f64> = Vec::new();
    let mut next = vec![0.0; n];

    for k in 1..=settings.max_iters {
        iterations = k;
        for (u, cands) in inst.candidates.iter().enumerate() {
            coeffs.clear();
            coeffs.extend(cands.iter().zip(&inst.coeffs[u]).map(|(&j, &c)| c - y[j]));
            inner_into(&coeffs, inst.demand[u], inst.epsilon, &mut beta[u], &mut scratch);
        }
        load.fill(0.0);
        for (cands, row) in inst.candidates.iter().zip(&beta) {
            for (&j, &b) in cands.iter().zip(row) {
                load[j] += b;
            }
        }
        violation = load.iter().zip(&inst.capacity).map(|(l, c)| l - c).fold(0.0, f64::max);
        if let Some(d) = dump.as_deref_mut() {
            d.push(IterationRecord {
                k,
                gamma: y.clone(),
                qp_objective: inst.qp_objective(&beta),
                lp_objective: inst.lp_objective(&beta),
                max_violation: violation,
            });
        }

        let mut within = true;
        let mut moved = 0.0f64;
        for i in 0..n {
            let residual = inst.capacity[i] - load[i];
            let tol = settings.violation_tol * inst.capacity[i];
            within &= -residual <= tol && (y[i] == 0.0 || residual <= tol);
            let delta = match settings.step {
                StepRule::Accelerated | StepRule::Fixed => base[i],
                StepRule::Diminishing => base[i] / (k as f64).sqrt(),
            };
            next[i] = dual_update(y[i], delta, inst.capacity[i], load[i]);
            moved = moved.max((next[i] - y[i]).abs());
        }
        let gamma_norm = y.iter().fold(1.0f64, |m, g| m.max(g.abs()));
        if within && moved <= settings.gamma_tol * gamma_norm {
            state.gamma.clone_from(&y);
            converged = true;
            break;
        }

        if settings.step == StepRule::Accelerated {
            let turned: f64 = (0..n).map(|i| (y[i] - next[i]) * (next[i] - state.gamma[i])).sum();
            if turned > 0.0 {
                momentum = 1.0;
                y.clone_from(&next);
            } else {
                let following = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
                let w = (momentum - 1.0) / following;
                for i in 0..n {
                    y[i] = (next[i] + w * (next[i] - state.gamma[i])).max(0.0);
                }
                momentum = following;
            }
        } else {
            y.clone_from(&next);
        }
        state.gamma.clone_from(&next);
    }

    let raw_violation = violation;
    repair_capacity(inst, &mut beta);
    QpSolveReport {
        qp_objective: inst.qp_objective(&beta),
        lp_objective: inst.lp_objective(&beta),
        beta,
        iterations,
        max_violation: raw_violation,
        converged,
    }
}

/// Scales down the tasks sent to any over-capacity BS so it lands exactly on capacity.
pub fn repair_capacity(inst: &ClbInstance, beta: &mut [Vec<f64>]) {
    let load = inst.loads(beta);
    let factor: Vec<f64> = load
        .iter()
        .zip(&inst.capacity)
        .map(|(&l, &c)| if l > c { c / l } else { 1.0 })
        .collect();
    for (cands, row) in inst.candidates.iter().zip(beta.iter_mut()) {
        for (&j, b) in cands.iter().zip(row.iter_mut()) {
            *b *= factor[j];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedSolution {
    pub beta: Vec<Vec<f64>>,
    pub qp_objective: f64,
    pub lp_objective: f64,
}

/// Exact optimum of the regularized problem: the projection of `eps * c` onto
/// the demand/capacity polytope.
pub fn solve_centralized(inst: &ClbInstance) -> Result<CentralizedSolution, QpError> {
    let (m, n) = (inst.n_users(), inst.n_bs());
    let offsets: Vec<usize> = inst
        .candidates
        .iter()
        .scan(0, |acc, c| {
            let o = *acc;
            *acc += c.len();
            Some(o)
        })
        .collect();
    let vars = inst.candidates.iter().map(Vec::len).sum();
    let mut a = DMatrix::zeros(m + n, vars);
    let mut y = vec![0.0; vars];
    for (u, cands) in inst.candidates.iter().enumerate() {
        for (k, &j) in cands.iter().enumerate() {
            let col = offsets[u] + k;
            a[(u, col)] = 1.0;
            a[(m + j, col)] = 1.0;
            y[col] = inst.epsilon * inst.coeffs[u][k];
        }
    }
    let b = inst.demand.iter().chain(&inst.capacity).map(|v| v.max(0.0)).collect();
    let proj = Polytope::new(a, b)?.project(&y)?;
    let beta: Vec<Vec<f64>> = inst
        .candidates
        .iter()
        .enumerate()
        .map(|(u, c)| proj.x[offsets[u]..offsets[u] + c.len()].to_vec())
        .collect();
    Ok(CentralizedSolution { qp_objective: inst.qp_objective(&beta), lp_objective: inst.lp_objective(&beta), beta })
}

/// `|a - b| / max(|b|, tiny)`, zero when both vanish.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 { 0.0 } else { d / b.abs().max(1e-12) }
}
