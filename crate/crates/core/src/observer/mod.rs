//! Latent-space observer: matrices and their checks, model bundles for the
//! four variants, latent simulation with decoding, and PDE residuals.

mod bundle;
mod matrices;
mod residual;
mod run;

pub use bundle::{prefix, ModelBundle, Variant};
pub use matrices::{build_matrices, check_matrices, latent_dim, MatrixReport, ObserverMatrices};
pub use residual::{build_residual, latent_mismatch, leaves, pde_residual, ResidualNodes};
pub use run::{input_windows, run_observer, EstimateTrace};
