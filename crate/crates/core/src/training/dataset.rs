use rand::Rng;

use super::TrainConfig;
use crate::diffcore::Tensor;
use crate::dynamics::{
    grid_steps, integrate, sample_input, solve_grid, InputKind, InputSignal, Method, SystemSpec, Tolerances, Trajectory,
};
use crate::error::{KklError, Result};
use crate::observer::{check_matrices, input_windows, ObserverMatrices};
use crate::rng::{self, streams};

/// Uniform draw from a per-axis box.
pub fn sample_box<R: Rng + ?Sized>(ic_box: &[[f64; 2]], rng: &mut R) -> Vec<f64> {
    ic_box
        .iter()
        .map(|&[lo, hi]| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect()
}

/// Grid steps discarded before latent targets are kept:
/// `⌈ln(10⁴) / (λ Δt)⌉`.
pub fn burn_steps(lambda: f64, dt: f64) -> usize {
    ((1e4f64).ln() / lambda / dt - 1e-9).ceil().max(0.0) as usize
}

/// One autonomous training tuple `(x_k, z_k, y_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AutonomousSample<'a> {
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub y: &'a [f64],
}

/// States paired with co-simulated latent targets, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AutonomousDataset {
    pub n_x: usize,
    pub n_z: usize,
    pub n_y: usize,
    /// Grid steps dropped from the start of every trajectory.
    pub burn_steps: usize,
    /// Samples kept per trajectory.
    pub per_trajectory: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

impl AutonomousDataset {
    pub fn len(&self) -> usize {
        self.x.len() / self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn sample(&self, i: usize) -> AutonomousSample<'_> {
        AutonomousSample {
            x: &self.x[i * self.n_x..(i + 1) * self.n_x],
            z: &self.z[i * self.n_z..(i + 1) * self.n_z],
            y: &self.y[i * self.n_y..(i + 1) * self.n_y],
        }
    }

    /// `(x, z, y)` tensors for the samples in `idx`.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            gather_rows(&self.x, self.n_x, idx),
            gather_rows(&self.z, self.n_z, idx),
            gather_rows(&self.y, self.n_y, idx),
        )
    }
}

pub(crate) fn gather_rows(data: &[f64], cols: usize, idx: &[usize]) -> Tensor<f64> {
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
    }
    Tensor::matrix(idx.len(), cols, out).expect("length matches shape")
}

/// Co-simulates `ẋ = f(x, 0)` and `ż = A z + B h(x)` from `z(0) = 0` for
/// `n_traj` initial conditions and keeps grid points after the burn-in.
pub fn build_autonomous_dataset(
    spec: &SystemSpec,
    matrices: &ObserverMatrices,
    cfg: &TrainConfig,
) -> Result<AutonomousDataset> {
    matrices.validate()?;
    let report = check_matrices(matrices);
    if !report.hurwitz {
        return Err(KklError::Config("observer matrix A is not Hurwitz".into()));
    }
    if matrices.n_y != spec.n_y {
        return Err(KklError::Dimension(format!(
            "B has {} columns for {} outputs",
            matrices.n_y, spec.n_y
        )));
    }
    let n_steps = grid_steps(cfg.t_final, cfg.dt)?;
    let burn = burn_steps(report.lambda, cfg.dt);
    if burn >= n_steps {
        return Err(KklError::Config(format!(
            "burn-in of {burn} steps leaves no samples in {n_steps} steps"
        )));
    }
    let (nx, nz, ny) = (spec.n_x, matrices.n_z, spec.n_y);
    let dim = nx + nz;
    let mut rng = rng::stream(cfg.seed, streams::AUTONOMOUS_ICS);
    let zero_u = vec![0.0; spec.n_u];
    let mut out = AutonomousDataset {
        n_x: nx,
        n_z: nz,
        n_y: ny,
        burn_steps: burn,
        per_trajectory: n_steps - burn,
        x: Vec::new(),
        z: Vec::new(),
        y: Vec::new(),
    };
    let mut yv = vec![0.0; ny];
    for _ in 0..cfg.n_traj {
        let x0 = sample_box(&spec.ic_box, &mut rng);
        let mut s0 = x0.clone();
        s0.resize(dim, 0.0);
        let path = solve_grid(
            |_t, s: &[f64], ds: &mut [f64]| {
                (spec.drift)(&s[..nx], &zero_u, &mut ds[..nx]);
                (spec.output)(&s[..nx], &mut yv);
                matrices.rhs(&s[nx..], &yv, &mut ds[nx..]);
            },
            &s0,
            n_steps,
            cfg.dt,
            Method::Rk45,
            Tolerances::default(),
        )?;
        for k in burn..n_steps {
            let s = &path[k * dim..(k + 1) * dim];
            out.x.extend_from_slice(&s[..nx]);
            out.z.extend_from_slice(&s[nx..]);
            let mut y = vec![0.0; ny];
            (spec.output)(&s[..nx], &mut y);
            out.y.extend(y);
        }
    }
    Ok(out)
}

/// One forced training tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub x_dot: Vec<f64>,
    /// Window ending at `t_k`, oldest sample first.
    pub window: Vec<f64>,
    /// Window ending at `t_{k+1}`.
    pub window_next: Vec<f64>,
}

/// Mini-batch tensors, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ForcedBatch {
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    pub u: Tensor<f64>,
    pub x_dot: Tensor<f64>,
    pub windows: Tensor<f64>,
    pub next_windows: Tensor<f64>,
}

/// Forced trajectories and the sample index into them. Windows are cut
/// from the stored input series on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct ForcedDataset {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub window: usize,
    pub dt: f64,
    pub signals: Vec<InputSignal>,
    pub trajectories: Vec<Trajectory>,
    /// `(trajectory, grid index)` of every sample.
    pub index: Vec<(usize, usize)>,
    /// `f(x_k, u_k)` per sample, row-major.
    pub x_dot: Vec<f64>,
}

impl ForcedDataset {
    /// Indexes samples `k = window .. N_step − 1` of every trajectory.
    pub fn from_trajectories(
        spec: &SystemSpec,
        trajectories: Vec<Trajectory>,
        signals: Vec<InputSignal>,
        window: usize,
    ) -> Result<Self> {
        let first = trajectories.first().ok_or(KklError::EmptyGrid)?;
        let dt = first.dt;
        if signals.len() != trajectories.len() {
            return Err(KklError::Dimension("one signal per trajectory required".into()));
        }
        let mut index = Vec::new();
        let mut x_dot = Vec::new();
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.dt != dt || tr.n_x != spec.n_x || tr.n_u != spec.n_u || tr.n_y != spec.n_y {
                return Err(KklError::Dimension(format!("trajectory {i} does not fit the dataset")));
            }
            let n_steps = tr.len() - 1;
            for k in window..n_steps {
                index.push((i, k));
                x_dot.extend(spec.eval_drift(tr.state(k), tr.input(k))?);
            }
        }
        Ok(Self {
            n_x: spec.n_x,
            n_u: spec.n_u,
            n_y: spec.n_y,
            window,
            dt,
            signals,
            trajectories,
            index,
            x_dot,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn sample(&self, i: usize) -> DatasetSample {
        let (j, k) = self.index[i];
        let tr = &self.trajectories[j];
        let w = input_windows(&tr.inputs, self.n_u, self.window, &[k, k + 1]);
        DatasetSample {
            x: tr.state(k).to_vec(),
            y: tr.output(k).to_vec(),
            u: tr.input(k).to_vec(),
            x_dot: self.x_dot[i * self.n_x..(i + 1) * self.n_x].to_vec(),
            window: w.row_slice(0).to_vec(),
            window_next: w.row_slice(1).to_vec(),
        }
    }

    /// Samples whose trajectory is driven by an input of `kind`.
    pub fn indices_of_kind(&self, kind: InputKind) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.signals[self.index[i].0].kind == kind)
            .collect()
    }

    /// States of the samples in `idx`.
    pub fn states(&self, idx: &[usize]) -> Tensor<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.n_x);
        for &i in idx {
            let (j, k) = self.index[i];
            out.extend_from_slice(self.trajectories[j].state(k));
        }
        Tensor::matrix(idx.len(), self.n_x, out).expect("length matches shape")
    }

    /// Outputs `y_k` of the samples in `idx`.
    pub fn outputs(&self, idx: &[usize]) -> Tensor<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.n_y);
        for &i in idx {
            let (j, k) = self.index[i];
            out.extend_from_slice(self.trajectories[j].output(k));
        }
        Tensor::matrix(idx.len(), self.n_y, out).expect("length matches shape")
    }

    /// Inputs `u_k` of the samples in `idx`.
    pub fn inputs(&self, idx: &[usize]) -> Tensor<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.n_u);
        for &i in idx {
            let (j, k) = self.index[i];
            out.extend_from_slice(self.trajectories[j].input(k));
        }
        Tensor::matrix(idx.len(), self.n_u, out).expect("length matches shape")
    }

    /// `f(x_k, u_k)` of the samples in `idx`.
    pub fn rates(&self, idx: &[usize]) -> Tensor<f64> {
        gather_rows(&self.x_dot, self.n_x, idx)
    }

    /// Windows ending at `t_{k+shift}` for the samples in `idx`.
    pub fn windows(&self, idx: &[usize], shift: usize) -> Tensor<f64> {
        let wl = self.window * self.n_u;
        let mut out = Vec::with_capacity(idx.len() * wl);
        for &i in idx {
            let (j, k) = self.index[i];
            let w = input_windows(&self.trajectories[j].inputs, self.n_u, self.window, &[k + shift]);
            out.extend_from_slice(w.data());
        }
        Tensor::matrix(idx.len(), wl, out).expect("length matches shape")
    }

    pub fn batch(&self, idx: &[usize]) -> ForcedBatch {
        ForcedBatch {
            x: self.states(idx),
            y: self.outputs(idx),
            u: self.inputs(idx),
            x_dot: self.rates(idx),
            windows: self.windows(idx, 0),
            next_windows: self.windows(idx, 1),
        }
    }
}

/// Input kinds of the forced dataset, cycled over the signal index so the
/// three nonzero kinds appear in equal shares.
pub fn forced_kind(j: usize) -> InputKind {
    InputKind::FORCED[j % InputKind::FORCED.len()]
}

/// Simulates every pair of `n_traj` initial conditions and `n_inp` input
/// signals and indexes the window-complete samples.
pub fn build_forced_dataset(spec: &SystemSpec, cfg: &TrainConfig) -> Result<ForcedDataset> {
    grid_steps(cfg.t_final, cfg.dt)?;
    let mut ic_rng = rng::stream(cfg.seed, streams::FORCED_ICS);
    let mut in_rng = rng::stream(cfg.seed, streams::FORCED_INPUTS);
    let ics: Vec<Vec<f64>> = (0..cfg.n_traj).map(|_| sample_box(&spec.ic_box, &mut ic_rng)).collect();
    let inputs: Vec<InputSignal> = (0..cfg.n_inp)
        .map(|j| sample_input(forced_kind(j), &cfg.input_ranges, &mut in_rng))
        .collect();
    let mut trajectories = Vec::with_capacity(ics.len() * inputs.len());
    let mut signals = Vec::with_capacity(trajectories.capacity());
    for x0 in &ics {
        for sig in &inputs {
            trajectories.push(integrate(spec, x0, sig, cfg.t_final, cfg.dt, Method::Rk45)?);
            signals.push(*sig);
        }
    }
    ForcedDataset::from_trajectories(spec, trajectories, signals, cfg.window)
}
