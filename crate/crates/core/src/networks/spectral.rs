use super::Mlp;
use crate::diffcore::Tensor;
use crate::error::{KklError, Result};
use crate::scalar::Scalar;

/// Right singular vector estimates, one per layer, carried between calls so
/// repeated normalisation warm-starts the power iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpectralState<S> {
    pub vectors: Vec<Vec<S>>,
}

fn normalize<S: Scalar>(v: &mut [S]) -> S {
    let n = v.iter().map(|&x| x * x).sum::<S>().sqrt();
    if n > S::zero() {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
    n
}

/// Largest singular value of `w` by power iteration on `wᵀw`, starting
/// from (and updating) `v`.
pub fn top_singular_value<S: Scalar>(w: &Tensor<S>, v: &mut Vec<S>, iterations: usize) -> S {
    let (rows, cols) = (w.rows(), w.cols());
    if v.len() != cols {
        *v = vec![S::one(); cols];
    }
    normalize(v);
    let d = w.data();
    let mut u = vec![S::zero(); rows];
    let mut sigma = S::zero();
    for _ in 0..iterations {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = d[i * cols..(i + 1) * cols].iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
        }
        sigma = normalize(&mut u);
        if sigma == S::zero() {
            return sigma;
        }
        v.iter_mut().for_each(|x| *x = S::zero());
        for (i, &ui) in u.iter().enumerate() {
            for (vj, &a) in v.iter_mut().zip(&d[i * cols..(i + 1) * cols]) {
                *vj += a * ui;
            }
        }
        normalize(v);
    }
    sigma
}

/// Divides every weight matrix by its estimated spectral norm. Zero
/// matrices are left unchanged. Biases are untouched.
pub fn spectral_normalize<S: Scalar>(w: &Mlp<S>, iterations: usize, state: &mut SpectralState<S>) -> Result<Mlp<S>> {
    if iterations == 0 {
        return Err(KklError::Config("spectral normalisation needs at least one iteration".into()));
    }
    state.vectors.resize(w.num_layers(), Vec::new());
    let mut out = w.clone();
    for (l, m) in out.weights.iter_mut().enumerate() {
        let sigma = top_singular_value(m, &mut state.vectors[l], iterations);
        if sigma > S::zero() {
            *m = m.scale(S::one() / sigma);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_divided_by_largest_entry() {
        let mut m = Mlp::<f64>::zeros(&[2, 2]);
        m.weights[0] = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut st = SpectralState::default();
        let n = spectral_normalize(&m, 20, &mut st).unwrap();
        let d = n.weights[0].data();
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_is_skipped() {
        let m = Mlp::<f64>::zeros(&[3, 2]);
        let n = spectral_normalize(&m, 5, &mut SpectralState::default()).unwrap();
        assert_eq!(n, m);
        assert!(spectral_normalize(&m, 0, &mut SpectralState::default()).is_err());
    }
}
