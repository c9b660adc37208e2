//! SMAPE, error-bound certificates and the benchmark harness.

mod benchmark;
mod bound;
mod smape;

pub use benchmark::{run_benchmark, table_csv, trial_stream, BenchmarkConfig, SmapeCell, SmapeReport};
pub use bound::{
    asymptotic_bound, check_certificate, covering_grid, default_points_per_axis, estimate_constants, jacobian_norms,
    lattice, linspace, noisy_bound, worst_case_bound, BoundConstants, BoundGrid, CertificateCheck, MapKind,
    NoiseLevels, JACOBIAN_ITERATIONS,
};
pub use smape::{smape, smape_term, smape_values, SMAPE_CAP, SMAPE_EPS};
