use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Graph, Tensor};
use crate::dynamics::{SystemSpec, Trajectory};
use crate::error::{KklError, Result};
use crate::networks::top_singular_value;
use crate::observer::{check_matrices, pde_residual, run_observer, ModelBundle, Variant};

/// Power-iteration steps for Jacobian spectral norms.
pub const JACOBIAN_ITERATIONS: usize = 30;
const CHUNK: usize = 2048;

/// Constants of the worst-case error certificate.
///
/// `eps_rt` is the round-trip error `sup ‖x − T̂*(T̂(x))‖`. It stands in for
/// the decoder error of the certificate, and the encoder error is taken as
/// zero, since both compare against the unknown exact maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub kappa: f64,
    pub lambda: f64,
    pub eps_pde: f64,
    pub eps_rt: f64,
    pub ell_dec: f64,
    pub ell_enc: f64,
    pub b_norm: f64,
    /// Process-noise level.
    pub w_bar: f64,
    /// Measurement-noise level.
    pub v_bar: f64,
}

/// `ε_rt + ℓ_dec (κ e^{−λt} ‖ξ_z(0)‖ + ε_pde κ/λ)`.
pub fn worst_case_bound(c: &BoundConstants, xi_z0: f64, t: f64) -> f64 {
    c.eps_rt + c.ell_dec * (c.kappa * (-c.lambda * t).exp() * xi_z0 + c.eps_pde * c.kappa / c.lambda)
}

/// Limit of [`worst_case_bound`] as `t → ∞`.
pub fn asymptotic_bound(c: &BoundConstants) -> f64 {
    c.eps_rt + c.ell_dec * (c.eps_pde * c.kappa / c.lambda)
}

/// Asymptotic bound under bounded process and measurement noise.
pub fn noisy_bound(c: &BoundConstants) -> f64 {
    let k = c.kappa / c.lambda;
    c.eps_rt + c.ell_dec * (c.eps_pde * k + k * c.ell_enc * c.w_bar + k * c.b_norm * c.v_bar)
}

/// States and scalar input values on which the constants are estimated.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundGrid {
    pub n_x: usize,
    /// Row-major states.
    pub states: Vec<f64>,
    /// Input values, each applied to every channel and held over the
    /// window.
    pub inputs: Vec<f64>,
}

impl BoundGrid {
    pub fn len(&self) -> usize {
        self.states.len() / self.n_x.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty() || self.inputs.is_empty()
    }
}

/// Lattice points per axis: 50 in the plane, 20 in three dimensions.
pub fn default_points_per_axis(n_x: usize) -> usize {
    if n_x >= 3 {
        20
    } else {
        50
    }
}

/// `n` evenly spaced values over `[lo, hi]`; a single value is `lo`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Tensor lattice with `per_axis` points on every axis of `[lo, hi]`.
pub fn lattice(lo: &[f64], hi: &[f64], per_axis: usize) -> Vec<f64> {
    let axes: Vec<Vec<f64>> = lo.iter().zip(hi).map(|(&a, &b)| linspace(a, b, per_axis)).collect();
    let total = per_axis.pow(lo.len() as u32);
    let mut out = Vec::with_capacity(total * lo.len());
    for mut i in 0..total {
        for ax in &axes {
            out.push(ax[i % per_axis]);
            i /= per_axis;
        }
    }
    out
}

/// Grid covering the initial-condition box and the states visited by
/// `trajectories`: a lattice over the joint bounding box plus up to as
/// many visited states, taken at an even stride.
pub fn covering_grid(spec: &SystemSpec, trajectories: &[Trajectory], per_axis: usize, inputs: Vec<f64>) -> BoundGrid {
    let n_x = spec.n_x;
    let mut lo: Vec<f64> = spec.ic_box.iter().map(|b| b[0]).collect();
    let mut hi: Vec<f64> = spec.ic_box.iter().map(|b| b[1]).collect();
    let mut visited = Vec::new();
    for tr in trajectories {
        for k in 0..tr.len() {
            let x = tr.state(k);
            for i in 0..n_x {
                lo[i] = lo[i].min(x[i]);
                hi[i] = hi[i].max(x[i]);
            }
            visited.extend_from_slice(x);
        }
    }
    let mut states = lattice(&lo, &hi, per_axis);
    let budget = states.len() / n_x;
    let n_visited = visited.len() / n_x;
    if n_visited > 0 {
        let stride = n_visited.div_ceil(budget.max(1)).max(1);
        for k in (0..n_visited).step_by(stride) {
            states.extend_from_slice(&visited[k * n_x..(k + 1) * n_x]);
        }
    }
    BoundGrid { n_x, states, inputs }
}

fn chunks(n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(CHUNK).map(move |s| s..(s + CHUNK).min(n))
}

fn row_norms(t: &Tensor<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..t.rows()).map(|i| t.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn max_finite(acc: f64, v: f64, what: &str) -> Result<f64> {
    if !v.is_finite() {
        return Err(KklError::NonFinite(what.into()));
    }
    Ok(acc.max(v))
}

/// Which learned map a Jacobian is taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Encoder,
    Decoder,
}

/// Spectral norms of the Jacobians of the encoder or decoder at the rows
/// of `points`, by power iteration on each Jacobian. `windows` selects the
/// modulated maps of a hypernetwork bundle.
pub fn jacobian_norms(
    bundle: &ModelBundle,
    map: MapKind,
    points: &Tensor<f64>,
    windows: Option<&Tensor<f64>>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = g.leaf("p");
    let ctx = match windows {
        Some(_) => {
            let w = g.leaf("window");
            bundle.build_context(&mut g, w)
        }
        None => None,
    };
    let out = match map {
        MapKind::Encoder => bundle.build_encoder(&mut g, p, ctx),
        MapKind::Decoder => bundle.build_decoder(&mut g, p, ctx),
    };
    let (n, n_in) = (points.rows(), points.cols());
    let n_out = match map {
        MapKind::Encoder => bundle.n_z(),
        MapKind::Decoder => bundle.n_x(),
    };
    let mut tangents = Vec::with_capacity(n_in);
    for j in 0..n_in {
        let d = g.leaf(&format!("dp{j}"));
        tangents.push(g.push_jvp(out, &[(p, d)])?);
    }
    let params = bundle.params().to_bindings();
    let mut norms = Vec::with_capacity(n);
    let mut v = Vec::new();
    for range in chunks(n) {
        let rows = range.len();
        let mut b = Bindings::new();
        let sel: Vec<f64> = range.clone().flat_map(|i| points.row_slice(i).to_vec()).collect();
        b.insert("p".into(), Tensor::matrix(rows, n_in, sel)?);
        if let Some(w) = windows {
            let sel: Vec<f64> = range.clone().flat_map(|i| w.row_slice(i).to_vec()).collect();
            b.insert("window".into(), Tensor::matrix(rows, w.cols(), sel)?);
        }
        for j in 0..n_in {
            let mut e = vec![0.0; rows * n_in];
            for r in 0..rows {
                e[r * n_in + j] = 1.0;
            }
            b.insert(format!("dp{j}"), Tensor::matrix(rows, n_in, e)?);
        }
        let exec = g.forward(&[&params, &b], &tangents)?;
        for r in 0..rows {
            let mut jac = vec![0.0; n_out * n_in];
            for (j, &t) in tangents.iter().enumerate() {
                let col = exec.value(t).row_slice(r);
                for (i, &c) in col.iter().enumerate() {
                    jac[i * n_in + j] = c;
                }
            }
            let jm = Tensor::matrix(n_out, n_in, jac)?;
            norms.push(top_singular_value(&jm, &mut v, JACOBIAN_ITERATIONS));
        }
    }
    Ok(norms)
}

/// Noise levels entering [`noisy_bound`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub w_bar: f64,
    pub v_bar: f64,
}

/// Grid maxima of the PDE residual, the round-trip error and the
/// Jacobian norms of the bundle's maps.
///
/// The residual is the one governing the bundle's latent error: the
/// modulated maps use constant windows at each grid input (zero window
/// rate), and the injection variant subtracts `Φ(T̂(x), window)`.
pub fn estimate_constants(bundle: &ModelBundle, grid: &BoundGrid, noise: NoiseLevels) -> Result<BoundConstants> {
    if grid.is_empty() {
        return Err(KklError::EmptyGrid);
    }
    if grid.n_x != bundle.n_x() {
        return Err(KklError::Dimension(format!(
            "grid has {} state components, bundle expects {}",
            grid.n_x,
            bundle.n_x()
        )));
    }
    let report = check_matrices(&bundle.matrices);
    let n = grid.len();
    let n_u = bundle.n_u();
    let wcols = bundle.window * n_u;
    let mut eps_pde: f64 = 0.0;
    let mut eps_rt: f64 = 0.0;
    let mut ell_dec: f64 = 0.0;
    let mut ell_enc: f64 = 0.0;
    let conditioned = bundle.variant == Variant::Dyn;
    for range in chunks(n) {
        let rows = range.len();
        let x = Tensor::matrix(rows, grid.n_x, grid.states[range.start * grid.n_x..range.end * grid.n_x].to_vec())?;
        let mut static_done = false;
        for &u in &grid.inputs {
            let ut = Tensor::full(vec![rows, n_u], u);
            let w = Tensor::full(vec![rows, wcols], u);
            let r = match bundle.variant {
                Variant::Dyn => pde_residual(bundle, &x, &ut, Some(&w), Some(&w))?,
                Variant::Obs => {
                    let r = pde_residual(bundle, &x, &ut, None, None)?;
                    let inj = bundle.injection.as_ref().expect("validated obs bundle");
                    let phi = inj.forward(&bundle.encoder.forward(&x)?, &w)?;
                    r.sub(&phi)?
                }
                _ => pde_residual(bundle, &x, &ut, None, None)?,
            };
            for v in row_norms(&r) {
                eps_pde = max_finite(eps_pde, v, "PDE residual")?;
            }
            if static_done && !conditioned {
                continue;
            }
            let wopt = conditioned.then_some(&w);
            let z = bundle.encode(&x, wopt)?;
            let back = bundle.decode(&z, wopt)?;
            for v in row_norms(&back.sub(&x)?) {
                eps_rt = max_finite(eps_rt, v, "round trip")?;
            }
            for v in jacobian_norms(bundle, MapKind::Decoder, &z, wopt)? {
                ell_dec = max_finite(ell_dec, v, "decoder Jacobian")?;
            }
            for v in jacobian_norms(bundle, MapKind::Encoder, &x, wopt)? {
                ell_enc = max_finite(ell_enc, v, "encoder Jacobian")?;
            }
            static_done = true;
        }
    }
    Ok(BoundConstants {
        kappa: report.kappa,
        lambda: report.lambda,
        eps_pde,
        eps_rt,
        ell_dec,
        ell_enc,
        b_norm: bundle.matrices.b_norm(),
        w_bar: noise.w_bar,
        v_bar: noise.v_bar,
    })
}

/// Outcome of comparing one noise-free run against the certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateCheck {
    /// Largest `‖x − x̂‖ / bound` over `t ≥ t_skip`.
    pub max_ratio: f64,
    pub holds: bool,
}

/// Runs the observer from `ẑ(0) = 0` along `traj` and compares the state
/// error with [`worst_case_bound`] for `t ≥ t_skip`, where the initial
/// latent error is `‖T̂(x(0))‖`.
pub fn check_certificate(
    bundle: &ModelBundle,
    c: &BoundConstants,
    traj: &Trajectory,
    t_skip: f64,
) -> Result<CertificateCheck> {
    let z0 = vec![0.0; bundle.n_z()];
    let est = run_observer(bundle, traj, &z0)?;
    let x0 = Tensor::row(traj.state(0).to_vec());
    let w0 = (bundle.variant == Variant::Dyn).then(|| Tensor::zeros(vec![1, bundle.window * bundle.n_u()]));
    let xi0 = bundle.encode(&x0, w0.as_ref())?.norm();
    let mut max_ratio: f64 = 0.0;
    for k in 0..traj.len() {
        let t = traj.times[k];
        if t < t_skip {
            continue;
        }
        let err: f64 = traj
            .state(k)
            .iter()
            .zip(est.state(k))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let bound = worst_case_bound(c, xi0, t);
        let ratio = if bound > 0.0 { err / bound } else if err == 0.0 { 0.0 } else { f64::INFINITY };
        max_ratio = max_ratio.max(if ratio.is_nan() { f64::INFINITY } else { ratio });
    }
    Ok(CertificateCheck {
        max_ratio,
        holds: max_ratio <= 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> BoundConstants {
        BoundConstants {
            kappa: 1.0,
            lambda: 1.0,
            eps_pde: 0.0,
            eps_rt: 0.0,
            ell_dec: 1.0,
            ell_enc: 1.0,
            b_norm: 1.0,
            w_bar: 0.0,
            v_bar: 0.0,
        }
    }

    #[test]
    fn unit_constants_give_pure_decay() {
        let c = unit();
        for t in [0.0, 0.5, 3.0] {
            assert!((worst_case_bound(&c, 1.0, t) - (-t).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn lattice_enumerates_every_point() {
        let l = lattice(&[0.0, 10.0], &[1.0, 11.0], 3);
        assert_eq!(l.len(), 18);
        assert_eq!(&l[..4], &[0.0, 10.0, 0.5, 10.0]);
        assert_eq!(&l[16..], &[1.0, 11.0]);
        assert_eq!(linspace(-1.0, 1.0, 16).len(), 16);
        assert_eq!(linspace(2.0, 5.0, 1), vec![2.0]);
    }
}
