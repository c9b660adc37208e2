use crate::error::{KklError, Result};

/// Floor of the SMAPE denominator, guarding `0/0`.
pub const SMAPE_EPS: f64 = 1e-8;
/// Largest possible SMAPE, also recorded for divergent runs.
pub const SMAPE_CAP: f64 = 200.0;

/// `2|a − b| / max(|a| + |b|, ε)`, with non-finite pairs counted as the
/// maximum 2.
pub fn smape_term(a: f64, b: f64) -> f64 {
    let t = 2.0 * (a - b).abs() / (a.abs() + b.abs()).max(SMAPE_EPS);
    if t.is_finite() {
        t.min(2.0)
    } else {
        2.0
    }
}

/// SMAPE in percent over all entries of two equally long slices.
pub fn smape_values(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(KklError::Dimension(format!(
            "smape of {} against {} values",
            truth.len(),
            estimate.len()
        )));
    }
    if truth.is_empty() {
        return Err(KklError::EmptyGrid);
    }
    let sum: f64 = truth.iter().zip(estimate).map(|(&a, &b)| smape_term(a, b)).sum();
    Ok(100.0 * sum / truth.len() as f64)
}

/// SMAPE in percent of row-major state samples over grid points with
/// `t_k ≥ t_skip` and every state component.
pub fn smape(truth: &[f64], estimate: &[f64], n_x: usize, times: &[f64], t_skip: f64) -> Result<f64> {
    if truth.len() != estimate.len() || truth.len() != times.len() * n_x {
        return Err(KklError::Dimension(format!(
            "smape needs {} x {n_x} samples on both sides, got {} and {}",
            times.len(),
            truth.len(),
            estimate.len()
        )));
    }
    let first = times.iter().position(|&t| t >= t_skip).ok_or_else(|| {
        KklError::Config(format!(
            "t_skip = {t_skip} leaves no samples before t = {}",
            times.last().copied().unwrap_or(0.0)
        ))
    })?;
    smape_values(&truth[first * n_x..], &estimate[first * n_x..])
}
