//! Transmission load balancing: each user's traffic goes, whole, to the
//! candidate with the largest non-negative coefficient
//! `V * c_tx,u + b~_j * p_{j,u}`, or is dropped.

use crate::model::{NetworkConfig, SlotObservation};

/// Splits `demand` over candidates given their coefficients. Ties go to the
/// earliest candidate in the list.
pub fn route_traffic(demand: f64, coeffs: &[f64]) -> Vec<f64> {
    let mut alpha = vec![0.0; coeffs.len()];
    let best = coeffs
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (k, &c)| match acc {
            Some((_, b)) if b >= c => acc,
            _ => Some((k, c)),
        });
    if let Some((k, c)) = best {
        if c >= 0.0 {
            alpha[k] = demand;
        }
    }
    alpha
}

/// Coefficients `V * c_tx,u + b~_j * p_{j,u}` in candidate order.
pub fn tx_coefficients(config: &NetworkConfig, obs: &SlotObservation, b_tilde: &[f64], v: f64, user: usize) -> Vec<f64> {
    let u = &config.users[user];
    u.candidates
        .iter()
        .map(|&j| v * u.tx_drop_cost + b_tilde[j] * obs.tx_energy.get(j, user))
        .collect()
}

/// Routing for every user. Candidate lists are ordered by BS index when
/// ties must go to the lowest index; see [`sorted_candidates`].
pub fn route_all(config: &NetworkConfig, obs: &SlotObservation, b_tilde: &[f64], v: f64) -> Vec<Vec<f64>> {
    (0..config.n_users())
        .map(|u| {
            let coeffs = tx_coefficients(config, obs, b_tilde, v, u);
            let order = sorted_candidates(&config.users[u].candidates);
            let permuted: Vec<f64> = order.iter().map(|&k| coeffs[k]).collect();
            let routed = route_traffic(obs.tx_demand[u], &permuted);
            let mut alpha = vec![0.0; coeffs.len()];
            for (pos, &k) in order.iter().enumerate() {
                alpha[k] = routed[pos];
            }
            alpha
        })
        .collect()
}

/// Candidate positions ordered by BS index.
pub fn sorted_candidates(candidates: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&k| candidates[k]);
    order
}

/// Objective of the per-user routing problem.
pub fn routing_objective(coeffs: &[f64], alpha: &[f64]) -> f64 {
    coeffs.iter().zip(alpha).map(|(c, a)| c * a).sum()
}
