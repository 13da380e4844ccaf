//! Learning fast approximations of AC optimal power flow.
//!
//! The pipeline: parse a case ([`grid`]), label load snapshots with the
//! embedded solver ([`opt`], [`datagen`]), train a constrained network
//! ([`neural`], [`trainer`]) and score it on held-out data ([`eval`]).

pub mod cases;
pub mod datagen;
pub mod eval;
pub mod grid;
pub mod neural;
pub mod opt;
pub mod powerflow;
pub mod rng;
pub mod trainer;

pub use grid::{parse_case, CaseError, Network};
pub use opt::{solve_acopf, solve_loadflow, SolveOutcome, SolveStatus, SolverConfig};
pub use powerflow::{
    all_flows, dispatch_cost, violation_report, Family, LoadPoint, OperatingPoint, ThermalLimit, ViolationReport,
};
