mod ipm;
mod model;
mod solve;
mod strategy;

pub use ipm::{solve_ipm, DualState, IpmIterate, IpmOptions, IpmReport, Nlp, SparseRows};
pub use model::{CostMode, DcPhysics, OpfModel, VarLayout};
pub use solve::{
    ac_quantities, case_hash, deterministic_opf, solve_with_enforcement, BasisKind, CacheEntry, ConfigRecord, DeterministicSolution,
    Method, MonitoredQuantity, SolveConfig, SolveReport, Solution, StrategyFile, Timings,
};
pub(crate) use solve::{enforce, finish, strategy_from_x, x_from_strategy, ChanceContext};
pub use strategy::OperatingStrategy;
