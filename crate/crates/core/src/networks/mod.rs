//! Parameterised function families: MLP encoder/decoder, bias-free GRU,
//! the injection network and the low-rank hypernetwork.
//!
//! Every network has a numeric batched forward (one sample per row) and a
//! graph builder that emits the same arithmetic as recorded primitives, so
//! the two paths agree bitwise. Parameters are exchanged through named
//! [`ParamSet`](crate::diffcore::ParamSet)s using a caller-chosen prefix.

mod gru;
mod hyper;
mod injection;
mod mlp;
mod spectral;

pub use gru::Gru;
pub use hyper::{apply_delta, HyperDims, HyperNet, LowRankDelta};
pub use injection::{Injection, InjectionDims};
pub use mlp::{bias_name, weight_name, FactorNodes, LayerFactors, Mlp};
pub use spectral::{spectral_normalize, top_singular_value, SpectralState};

use rand::Rng;

use crate::diffcore::Tensor;
use crate::scalar::Scalar;

/// `rows × cols` tensor with entries from `U(−bound, bound)`. Draws are made
/// in `f64` so every scalar type sees the same stream.
pub fn uniform<S: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor<S> {
    let data = (0..rows * cols)
        .map(|_| S::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("length matches shape")
}
