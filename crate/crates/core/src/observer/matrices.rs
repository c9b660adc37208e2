use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{KklError, Result};

/// Latent dynamics `ż = A z + B y`: `A` is `n_z × n_z`, `B` is `n_z × n_y`,
/// both row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverMatrices {
    pub n_z: usize,
    pub n_y: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Structural checks and bound constants of a matrix pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub hurwitz: bool,
    pub controllable: bool,
    /// Condition number of the eigenvector matrix of `A`.
    pub kappa: f64,
    /// `min |Re λ_i(A)|`.
    pub lambda: f64,
}

/// Latent dimension `n_y (2 n_x + 1)`.
pub fn latent_dim(n_x: usize, n_y: usize) -> usize {
    n_y * (2 * n_x + 1)
}

/// Default pair for a system with `n_x` states and `n_y` outputs:
/// `A = −diag(1, …, n_z)` and `B` all ones.
pub fn build_matrices(n_x: usize, n_y: usize) -> Result<ObserverMatrices> {
    if n_x == 0 || n_y == 0 {
        return Err(KklError::Config("observer matrices need n_x, n_y >= 1".into()));
    }
    Ok(ObserverMatrices::diagonal(latent_dim(n_x, n_y), n_y))
}

impl ObserverMatrices {
    /// `A = −diag(1, …, n_z)`, `B` all ones.
    pub fn diagonal(n_z: usize, n_y: usize) -> Self {
        let mut a = vec![0.0; n_z * n_z];
        for i in 0..n_z {
            a[i * n_z + i] = -((i + 1) as f64);
        }
        Self {
            n_z,
            n_y,
            a,
            b: vec![1.0; n_z * n_y],
        }
    }

    pub fn new(n_z: usize, n_y: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let m = Self { n_z, n_y, a, b };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_z == 0 || self.n_y == 0 {
            return Err(KklError::Config("empty observer matrices".into()));
        }
        if self.a.len() != self.n_z * self.n_z || self.b.len() != self.n_z * self.n_y {
            return Err(KklError::Dimension(format!(
                "A has {} entries and B {} for n_z={}, n_y={}",
                self.a.len(),
                self.b.len(),
                self.n_z,
                self.n_y
            )));
        }
        if !self.a.iter().chain(&self.b).all(|v| v.is_finite()) {
            return Err(KklError::NonFinite("observer matrices".into()));
        }
        Ok(())
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_z, self.n_z, &self.a)
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_z, self.n_y, &self.b)
    }

    /// `dz = A z + B y`.
    pub fn rhs(&self, z: &[f64], y: &[f64], dz: &mut [f64]) {
        let (nz, ny) = (self.n_z, self.n_y);
        for i in 0..nz {
            let mut acc = 0.0;
            for (j, zj) in z.iter().enumerate() {
                acc += self.a[i * nz + j] * zj;
            }
            for (j, yj) in y.iter().enumerate() {
                acc += self.b[i * ny + j] * yj;
            }
            dz[i] = acc;
        }
    }

    /// Spectral norm of `B`.
    pub fn b_norm(&self) -> f64 {
        self.b_matrix().singular_values().max()
    }
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    m.iter().enumerate().all(|(k, &v)| {
        let (i, j) = (k % m.nrows(), k / m.nrows());
        i == j || v == 0.0
    })
}

fn kalman_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut k = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for p in 0..n {
        k.view_mut((0, p * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    let sv = k.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-8 * top).count()
}

/// Condition number of a unit-column eigenvector matrix of `a`; infinite
/// when `a` is defective.
fn eigenvector_condition(a: &DMatrix<f64>, eig: &[Complex<f64>]) -> f64 {
    if is_diagonal(a) {
        return 1.0;
    }
    let n = a.nrows();
    let ac = a.map(|v| Complex::new(v, 0.0));
    let mut v = DMatrix::<Complex<f64>>::zeros(n, n);
    for (k, &mu) in eig.iter().enumerate() {
        let shifted = &ac - DMatrix::<Complex<f64>>::identity(n, n) * mu;
        let svd = shifted.svd(false, true);
        let vt = svd.v_t.expect("requested");
        let idx = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        for r in 0..n {
            v[(r, k)] = vt[(idx, r)].conj();
        }
    }
    let sv = v.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    if lo <= hi * 1e-14 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Hurwitz and controllability checks plus the bound constants `κ`, `λ`.
pub fn check_matrices(m: &ObserverMatrices) -> MatrixReport {
    let a = m.a_matrix();
    let b = m.b_matrix();
    let eig: Vec<Complex<f64>> = a.complex_eigenvalues().iter().copied().collect();
    let hurwitz = eig.iter().all(|e| e.re < 0.0);
    let lambda = eig.iter().map(|e| e.re.abs()).fold(f64::INFINITY, f64::min);
    MatrixReport {
        hurwitz,
        controllable: kalman_rank(&a, &b) == m.n_z,
        kappa: eigenvector_condition(&a, &eig),
        lambda,
    }
}
