use std::io::{self, Write};

use super::{ModelBundle, Variant};
use crate::diffcore::Tensor;
use crate::dynamics::Trajectory;
use crate::error::{KklError, Result};

/// Input windows ending at the grid indices `ks`, one per row.
///
/// The window for index `k` holds samples `k−ω+1 ..= k` of the flat
/// row-major `inputs` (oldest first); samples before the start of the
/// record are zero.
pub fn input_windows(inputs: &[f64], n_u: usize, window: usize, ks: &[usize]) -> Tensor<f64> {
    let mut data = vec![0.0; ks.len() * window * n_u];
    for (row, &k) in ks.iter().enumerate() {
        let out = &mut data[row * window * n_u..(row + 1) * window * n_u];
        for s in 0..window {
            // slot s holds sample k + 1 + s − ω
            if let Some(j) = (k + 1 + s).checked_sub(window) {
                out[s * n_u..(s + 1) * n_u].copy_from_slice(&inputs[j * n_u..(j + 1) * n_u]);
            }
        }
    }
    Tensor::matrix(ks.len(), window * n_u, data).expect("length matches shape")
}

/// Observer output on the measurement grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateTrace {
    pub n_z: usize,
    pub n_x: usize,
    pub times: Vec<f64>,
    /// `ẑ(t_k)`, row-major.
    pub latent: Vec<f64>,
    /// `x̂(t_k)`, row-major.
    pub states: Vec<f64>,
    /// Optional per-step diagnostic, e.g. `‖R_pde‖` along the true path.
    pub residual: Option<Vec<f64>>,
}

impl EstimateTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn latent_at(&self, k: usize) -> &[f64] {
        &self.latent[k * self.n_z..(k + 1) * self.n_z]
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n_x..(k + 1) * self.n_x]
    }

    /// CSV with columns `t, zhat.., xhat..`, then `x..` when `truth` is
    /// given and `residual` when present.
    pub fn write_csv<W: Write>(&self, mut w: W, truth: Option<&Trajectory>) -> io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n_z).map(|i| format!("zhat{i}")));
        header.extend((1..=self.n_x).map(|i| format!("xhat{i}")));
        if let Some(tr) = truth {
            header.extend((1..=tr.n_x).map(|i| format!("x{i}")));
        }
        if self.residual.is_some() {
            header.push("residual".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row: Vec<f64> = vec![self.times[k]];
            row.extend_from_slice(self.latent_at(k));
            row.extend_from_slice(self.state(k));
            if let Some(tr) = truth {
                row.extend_from_slice(tr.state(k));
            }
            if let Some(r) = &self.residual {
                row.push(r[k]);
            }
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn check_grid(bundle: &ModelBundle, traj: &Trajectory) -> Result<()> {
    if traj.len() < 2 {
        return Err(KklError::EmptyGrid);
    }
    if (traj.dt - bundle.dt).abs() > 1e-12 * bundle.dt {
        return Err(KklError::Dimension(format!(
            "trajectory step {} differs from the bundle step {}",
            traj.dt, bundle.dt
        )));
    }
    if traj.n_y != bundle.matrices.n_y || traj.n_u != bundle.n_u() {
        return Err(KklError::Dimension(format!(
            "trajectory has n_u={}, n_y={}; bundle expects n_u={}, n_y={}",
            traj.n_u,
            traj.n_y,
            bundle.n_u(),
            bundle.matrices.n_y
        )));
    }
    Ok(())
}

/// Integrates the latent observer along `traj` from `z0` with fixed-step
/// RK4 and decodes every grid point.
///
/// Outputs are linearly interpolated inside each step. The injection
/// context and the hypernetwork deltas are computed once per grid step
/// from the window ending at the step's left endpoint.
pub fn run_observer(bundle: &ModelBundle, traj: &Trajectory, z0: &[f64]) -> Result<EstimateTrace> {
    check_grid(bundle, traj)?;
    let nz = bundle.n_z();
    if z0.len() != nz {
        return Err(KklError::Dimension(format!("z0 has {} entries, expected {nz}", z0.len())));
    }
    let n = traj.len();
    let h = traj.dt;
    let ny = traj.n_y;
    let m = &bundle.matrices;
    let contexts = match (&bundle.injection, bundle.variant) {
        (Some(inj), Variant::Obs) => {
            let ks: Vec<usize> = (0..n - 1).collect();
            Some(inj.context(&input_windows(&traj.inputs, traj.n_u, bundle.window, &ks))?)
        }
        _ => None,
    };

    let mut latent = Vec::with_capacity(n * nz);
    latent.extend_from_slice(z0);
    let mut z = z0.to_vec();
    let mut stage = vec![0.0; nz];
    let mut k1 = vec![0.0; nz];
    let mut k2 = vec![0.0; nz];
    let mut k3 = vec![0.0; nz];
    let mut k4 = vec![0.0; nz];
    let mut y_mid = vec![0.0; ny];
    for k in 0..n - 1 {
        let (y0, y1) = (traj.output(k), traj.output(k + 1));
        for (ym, (a, b)) in y_mid.iter_mut().zip(y0.iter().zip(y1)) {
            *ym = 0.5 * (a + b);
        }
        let ell = match &contexts {
            Some(c) => Some(Tensor::row(c.row_slice(k).to_vec())),
            None => None,
        };
        let rhs = |zs: &[f64], y: &[f64], out: &mut [f64]| -> Result<()> {
            m.rhs(zs, y, out);
            if let (Some(inj), Some(ell)) = (&bundle.injection, &ell) {
                let phi = inj.apply(&Tensor::row(zs.to_vec()), ell)?;
                for (o, p) in out.iter_mut().zip(phi.data()) {
                    *o += p;
                }
            }
            Ok(())
        };
        rhs(&z, y0, &mut k1)?;
        for i in 0..nz {
            stage[i] = z[i] + 0.5 * h * k1[i];
        }
        rhs(&stage, &y_mid, &mut k2)?;
        for i in 0..nz {
            stage[i] = z[i] + 0.5 * h * k2[i];
        }
        rhs(&stage, &y_mid, &mut k3)?;
        for i in 0..nz {
            stage[i] = z[i] + h * k3[i];
        }
        rhs(&stage, y1, &mut k4)?;
        for i in 0..nz {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(KklError::NonFinite(format!("latent state at t={}", traj.times[k + 1])));
        }
        latent.extend_from_slice(&z);
    }

    let zt = Tensor::matrix(n, nz, latent.clone())?;
    let states = match (&bundle.hyper, bundle.variant) {
        (Some(hyper), Variant::Dyn) => {
            let ks: Vec<usize> = (0..n).collect();
            let ctx = hyper.gru.encode(&input_windows(&traj.inputs, traj.n_u, bundle.window, &ks))?;
            bundle.decode_with_context(&zt, &ctx)?
        }
        _ => bundle.decoder.forward(&zt)?,
    };
    Ok(EstimateTrace {
        n_z: nz,
        n_x: bundle.decoder.output_dim(),
        times: traj.times.clone(),
        latent,
        states: states.into_data(),
        residual: None,
    })
}
