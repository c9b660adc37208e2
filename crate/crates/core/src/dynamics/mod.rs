//! Benchmark systems, exogenous input signals, ODE integration and noise.

mod input;
mod integrate;
mod systems;
mod trajectory;

pub use input::{sample_input, InputKind, InputRanges, InputSignal};
pub use integrate::{
    add_noise, grid_steps, integrate, integrate_with_process_noise, rk4_step, solve_grid, solve_grid_piecewise,
    Method, Tolerances,
};
pub use systems::{DriftFn, OutputFn, SystemKind, SystemSpec};
pub use trajectory::Trajectory;
