//! Experiment harness: configuration, run orchestration, logs and plots.

pub mod config;
pub mod experiment;
pub mod logs;
pub mod plot;
pub mod verify;

pub use config::{DataConfig, ReferenceConfig, RunConfig, Strategy};
pub use experiment::{
    compare_strategies, execute, prepare_seed, run_experiment, run_seed, sweep_lambda, RunOutput, SeedContext,
    StrategyCurve, SweepRow, DEFAULT_LAMBDA_GRID,
};
pub use logs::{read_action_trace, ActionTrace, RunLogWriter};
