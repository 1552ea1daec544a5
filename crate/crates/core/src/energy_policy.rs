//! Threshold ("none-or-all") harvesting and grid purchase.
//!
//! Minimizes `sum_i V * price * g_i + b~_i * (g_i + e_i)` over
//! `0 <= e_i <= harvest_i`, `0 <= g_i <= g_max_i`. Each BS decides alone.

/// Energy acquired by one BS this slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyDecision {
    pub harvest: f64,
    pub purchase: f64,
}

/// Harvest everything when `b_tilde <= 0`; buy the full `g_max` when
/// `V * price + b_tilde <= 0`. Boundaries resolve towards acquiring energy.
pub fn decide_energy_bs(b_tilde: f64, harvest_avail: f64, price: f64, v: f64, g_max: f64) -> EnergyDecision {
    EnergyDecision {
        harvest: if b_tilde <= 0.0 { harvest_avail } else { 0.0 },
        purchase: if v * price + b_tilde <= 0.0 { g_max } else { 0.0 },
    }
}

pub fn decide_energy(b_tilde: &[f64], harvest_avail: &[f64], price: f64, v: f64, g_max: &[f64]) -> Vec<EnergyDecision> {
    b_tilde
        .iter()
        .zip(harvest_avail)
        .zip(g_max)
        .map(|((&b, &h), &g)| decide_energy_bs(b, h, price, v, g))
        .collect()
}

/// The energy term of the per-slot drift-plus-penalty objective.
pub fn energy_objective(b_tilde: &[f64], decisions: &[EnergyDecision], price: f64, v: f64) -> f64 {
    b_tilde
        .iter()
        .zip(decisions)
        .map(|(&b, d)| v * price * d.purchase + b * (d.purchase + d.harvest))
        .sum()
}
