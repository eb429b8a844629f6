//! Flash-to-DRAM streaming model: residency planning, a per-transfer ledger
//! and closed-form bytes-per-token analytics.

pub mod cost;
pub mod ledger;
pub mod residency;

pub use cost::{
    bpt_closed_form, bpt_from_ledger, simulate_walltime, vicuna_7b_layer_bytes, BptMode, CostModelParams, RunCost,
    WallTime,
};
pub use ledger::{Stage, TransferLedger, TransferRecord};
pub use residency::{plan_residency, LayerCosts, MemoryConfig, ResidencyPlan, StreamSim};
