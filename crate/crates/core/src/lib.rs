// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod comp_lb;
pub mod controller;
pub mod energy_policy;
pub mod env;
pub mod harness;
pub mod model;
pub mod par;
pub mod qp;
pub mod tx_lb;
