//! Library surface of the benchmark CLI: CSV formats and the command
//! implementations, exposed so integration tests can drive them directly.

pub mod io;
pub mod runner;

pub use io::MetricsRow;
pub use runner::{
    compare_cmd, metrics_cmd, parse_method, parse_seeds, resolve_scenario, run_cmd,
    simulate_cmd, RunOptions, TraceKind,
};
