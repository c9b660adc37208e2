use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{InputSignal, SystemSpec, Trajectory};
use crate::error::{KklError, Result};

/// Integration scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Adaptive Dormand–Prince 5(4) with dense output on the grid.
    Rk45,
    /// Classic fixed-step Runge–Kutta at the grid step.
    Rk4,
}

/// Error tolerances for the adaptive scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-8 }
    }
}

/// States whose magnitude exceeds this are treated as escaped.
const ESCAPE_LIMIT: f64 = 1e12;
const MAX_STEPS: usize = 5_000_000;

/// Number of grid steps `T/Δt`, which must be integral.
pub fn grid_steps(t_final: f64, dt: f64) -> Result<usize> {
    if !(t_final > 0.0 && dt > 0.0) {
        return Err(KklError::Config(format!("need T > 0 and dt > 0, got T={t_final}, dt={dt}")));
    }
    let n = (t_final / dt).round();
    if (n * dt - t_final).abs() > 1e-9 * t_final {
        return Err(KklError::Config(format!("T={t_final} is not a multiple of dt={dt}")));
    }
    Ok(n as usize)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Dense-output coefficients.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

struct Dopri5 {
    tol: Tolerances,
    k: [Vec<f64>; 7],
    y_stage: Vec<f64>,
    y_new: Vec<f64>,
    cont: [Vec<f64>; 5],
}

impl Dopri5 {
    fn new(n: usize, tol: Tolerances) -> Self {
        Self {
            tol,
            k: std::array::from_fn(|_| vec![0.0; n]),
            y_stage: vec![0.0; n],
            y_new: vec![0.0; n],
            cont: std::array::from_fn(|_| vec![0.0; n]),
        }
    }

    fn norm(&self, v: &[f64], y: &[f64]) -> f64 {
        let s: f64 = v
            .iter()
            .zip(y)
            .map(|(v, y)| (v / (self.tol.atol + self.tol.rtol * y.abs())).powi(2))
            .sum();
        (s / v.len() as f64).sqrt()
    }

    /// Starting step; expects `k[0] = f(t, y)`.
    fn initial_step<F: FnMut(f64, &[f64], &mut [f64])>(&mut self, f: &mut F, t: f64, y: &[f64], h_max: f64) -> f64 {
        let d0 = self.norm(y, y);
        let d1 = self.norm(&self.k[0], y);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(h_max);
        for i in 0..y.len() {
            self.y_stage[i] = y[i] + h0 * self.k[0][i];
        }
        let mut f1 = vec![0.0; y.len()];
        f(t + h0, &self.y_stage, &mut f1);
        let diff: Vec<f64> = f1.iter().zip(&self.k[0]).map(|(a, b)| a - b).collect();
        let d2 = self.norm(&diff, y) / h0;
        let m = d1.max(d2);
        let h1 = if m <= 1e-15 || !m.is_finite() {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / m).powf(0.2)
        };
        (100.0 * h0).min(h1).min(h_max)
    }

    /// One trial step of size `h`; returns the scaled error norm. On
    /// return `y_new` holds the 5th-order solution and `k[6] = f(t+h, y_new)`.
    fn trial<F: FnMut(f64, &[f64], &mut [f64])>(&mut self, f: &mut F, t: f64, y: &[f64], h: f64) -> f64 {
        let n = y.len();
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += A[s][j] * self.k[j][i];
                }
                self.y_stage[i] = y[i] + h * acc;
            }
            f(t + C[s] * h, &self.y_stage, &mut self.k[s]);
        }
        // stage 7 input equals the 5th-order solution (FSAL)
        self.y_new.copy_from_slice(&self.y_stage);
        let mut err = vec![0.0; n];
        let mut scale = vec![0.0; n];
        for i in 0..n {
            let mut e = 0.0;
            for j in 0..7 {
                e += E[j] * self.k[j][i];
            }
            err[i] = h * e;
            scale[i] = y[i].abs().max(self.y_new[i].abs());
        }
        if !self.y_new.iter().all(|v| v.is_finite() && v.abs() < ESCAPE_LIMIT) {
            return f64::INFINITY;
        }
        let e = self.norm(&err, &scale);
        if e.is_finite() {
            e
        } else {
            f64::INFINITY
        }
    }

    /// Prepares interpolation over the accepted step `[t, t+h]`.
    fn build_dense(&mut self, y: &[f64], h: f64) {
        for i in 0..y.len() {
            let ydiff = self.y_new[i] - y[i];
            let bspl = h * self.k[0][i] - ydiff;
            self.cont[0][i] = y[i];
            self.cont[1][i] = ydiff;
            self.cont[2][i] = bspl;
            self.cont[3][i] = ydiff - h * self.k[6][i] - bspl;
            let mut d = 0.0;
            for j in 0..7 {
                d += D[j] * self.k[j][i];
            }
            self.cont[4][i] = h * d;
        }
    }

    fn interpolate(&self, theta: f64, out: &mut [f64]) {
        let theta1 = 1.0 - theta;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.cont[0][i]
                + theta
                    * (self.cont[1][i]
                        + theta1 * (self.cont[2][i] + theta * (self.cont[3][i] + theta1 * self.cont[4][i])));
        }
    }
}

fn step_factor(err: f64, accepted: bool) -> f64 {
    if err == 0.0 {
        return 10.0;
    }
    let fac = 0.9 * err.powf(-0.2);
    if accepted {
        fac.clamp(0.2, 10.0)
    } else {
        fac.clamp(0.2, 1.0)
    }
}

fn underflow(t: f64, h: f64, error_was_finite: bool) -> Option<KklError> {
    if h.abs() < 1e-14 * t.abs().max(1.0) {
        Some(if error_was_finite {
            KklError::StepSizeUnderflow { t }
        } else {
            KklError::Escape { t }
        })
    } else {
        None
    }
}

/// Solves `ẏ = f(t, y)` from `y(0) = y0` and samples the solution on the
/// grid `kΔt`, `k = 0..=n_steps`. Returns the samples row-major.
pub fn solve_grid<F>(mut f: F, y0: &[f64], n_steps: usize, dt: f64, method: Method, tol: Tolerances) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    match method {
        Method::Rk4 => solve_rk4(&mut f, y0, n_steps, dt),
        Method::Rk45 => solve_dense(&mut f, y0, n_steps, dt, tol),
    }
}

fn check_state(y: &[f64], t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite() && v.abs() < ESCAPE_LIMIT) {
        Ok(())
    } else {
        Err(KklError::Escape { t })
    }
}

/// One classic RK4 step from `(t, y)` of size `h`, written into `out`.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &[f64], h: f64, out: &mut [f64])
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(t, y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, &tmp, &mut k4);
    for i in 0..n {
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn solve_rk4<F>(f: &mut F, y0: &[f64], n_steps: usize, dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut out = Vec::with_capacity((n_steps + 1) * n);
    out.extend_from_slice(y0);
    let mut y = y0.to_vec();
    let mut next = vec![0.0; n];
    for k in 0..n_steps {
        let t = k as f64 * dt;
        rk4_step(f, t, &y, dt, &mut next);
        check_state(&next, t + dt)?;
        std::mem::swap(&mut y, &mut next);
        out.extend_from_slice(&y);
    }
    Ok(out)
}

fn solve_dense<F>(f: &mut F, y0: &[f64], n_steps: usize, dt: f64, tol: Tolerances) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    check_state(y0, 0.0)?;
    let mut out = Vec::with_capacity((n_steps + 1) * n);
    out.extend_from_slice(y0);
    if n_steps == 0 {
        return Ok(out);
    }
    let t_end = n_steps as f64 * dt;
    let mut solver = Dopri5::new(n, tol);
    let mut t = 0.0;
    let mut y = y0.to_vec();
    f(t, &y, &mut solver.k[0]);
    let mut h = solver.initial_step(f, t, &y, t_end);
    let mut next = 1;
    let mut sample = vec![0.0; n];
    let mut last_rejected = false;
    for _ in 0..MAX_STEPS {
        let last = t + h >= t_end;
        let h_try = if last { t_end - t } else { h };
        let err = solver.trial(f, t, &y, h_try);
        if err <= 1.0 {
            let t_new = if last { t_end } else { t + h_try };
            solver.build_dense(&y, h_try);
            while next <= n_steps {
                let tk = next as f64 * dt;
                if tk > t_new && !(last && next == n_steps) {
                    break;
                }
                if next == n_steps && last {
                    out.extend_from_slice(&solver.y_new);
                } else {
                    solver.interpolate((tk - t) / h_try, &mut sample);
                    out.extend_from_slice(&sample);
                }
                next += 1;
            }
            if next > n_steps {
                return Ok(out);
            }
            t = t_new;
            y.copy_from_slice(&solver.y_new);
            solver.k.swap(0, 6);
            let fac = step_factor(err, true);
            h = h_try * if last_rejected { fac.min(1.0) } else { fac };
            last_rejected = false;
        } else {
            h = h_try * step_factor(err, false);
            last_rejected = true;
            if let Some(e) = underflow(t, h, err.is_finite()) {
                return Err(e);
            }
        }
    }
    Err(KklError::StepSizeUnderflow { t })
}

/// Solves `ẏ = f(k, t, y)` where the right-hand side may switch at grid
/// points: each interval `[kΔt, (k+1)Δt]` is integrated on its own with the
/// interval index `k` passed to `f`. The adaptive scheme carries its step
/// size across intervals.
pub fn solve_grid_piecewise<F>(
    mut f: F,
    y0: &[f64],
    n_steps: usize,
    dt: f64,
    method: Method,
    tol: Tolerances,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    check_state(y0, 0.0)?;
    let mut out = Vec::with_capacity((n_steps + 1) * n);
    out.extend_from_slice(y0);
    let mut y = y0.to_vec();
    let mut next = vec![0.0; n];
    let mut solver = Dopri5::new(n, tol);
    let mut h = f64::NAN;
    for k in 0..n_steps {
        let t0 = k as f64 * dt;
        let t1 = (k + 1) as f64 * dt;
        let mut g = |t: f64, y: &[f64], dy: &mut [f64]| f(k, t, y, dy);
        match method {
            Method::Rk4 => {
                rk4_step(&mut g, t0, &y, dt, &mut next);
                check_state(&next, t1)?;
                std::mem::swap(&mut y, &mut next);
            }
            Method::Rk45 => {
                let mut t = t0;
                g(t, &y, &mut solver.k[0]);
                if !h.is_finite() {
                    h = solver.initial_step(&mut g, t, &y, dt);
                }
                let mut steps = 0;
                while t < t1 {
                    steps += 1;
                    if steps > MAX_STEPS {
                        return Err(KklError::StepSizeUnderflow { t });
                    }
                    let last = t + h >= t1;
                    let h_try = if last { t1 - t } else { h };
                    let err = solver.trial(&mut g, t, &y, h_try);
                    if err <= 1.0 {
                        t = if last { t1 } else { t + h_try };
                        y.copy_from_slice(&solver.y_new);
                        solver.k.swap(0, 6);
                        // keep the free-running step size when the last
                        // step was only shortened to hit the boundary
                        if !last || h_try >= h {
                            h = h_try * step_factor(err, true);
                        }
                    } else {
                        h = h_try * step_factor(err, false);
                        if let Some(e) = underflow(t, h, err.is_finite()) {
                            return Err(e);
                        }
                    }
                }
            }
        }
        out.extend_from_slice(&y);
    }
    Ok(out)
}

/// Simulates `spec` under `signal` from `x0` over `[0, T]` and samples
/// states, inputs and outputs on the grid `kΔt`.
pub fn integrate(
    spec: &SystemSpec,
    x0: &[f64],
    signal: &InputSignal,
    t_final: f64,
    dt: f64,
    method: Method,
) -> Result<Trajectory> {
    integrate_inner(spec, x0, signal, t_final, dt, method, None)
}

/// Like [`integrate`], with process noise `w ~ N(0, σ²I)` held constant
/// over each grid interval and added to the drift.
pub fn integrate_with_process_noise<R: Rng + ?Sized>(
    spec: &SystemSpec,
    x0: &[f64],
    signal: &InputSignal,
    t_final: f64,
    dt: f64,
    method: Method,
    sigma2: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if sigma2 == 0.0 {
        return integrate(spec, x0, signal, t_final, dt, method);
    }
    let n_steps = grid_steps(t_final, dt)?;
    let w = normal_draws(n_steps * spec.n_x, sigma2, rng)?;
    integrate_inner(spec, x0, signal, t_final, dt, method, Some(&w))
}

fn normal_draws<R: Rng + ?Sized>(n: usize, sigma2: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma2 >= 0.0) {
        return Err(KklError::Config(format!("noise variance must be non-negative, got {sigma2}")));
    }
    let normal = Normal::new(0.0, sigma2.sqrt()).map_err(|e| KklError::Config(e.to_string()))?;
    Ok((0..n).map(|_| normal.sample(rng)).collect())
}

fn integrate_inner(
    spec: &SystemSpec,
    x0: &[f64],
    signal: &InputSignal,
    t_final: f64,
    dt: f64,
    method: Method,
    process_noise: Option<&[f64]>,
) -> Result<Trajectory> {
    if x0.len() != spec.n_x {
        return Err(KklError::Dimension(format!(
            "{}: initial state has length {}, expected {}",
            spec.name,
            x0.len(),
            spec.n_x
        )));
    }
    let n_steps = grid_steps(t_final, dt)?;
    let n_u = spec.n_u;
    let mut u = vec![0.0; n_u];
    let states = match process_noise {
        None => {
            let rhs = |t: f64, x: &[f64], dx: &mut [f64]| {
                u.fill(signal.eval(t));
                (spec.drift)(x, &u, dx);
            };
            solve_grid(rhs, x0, n_steps, dt, method, Tolerances::default())?
        }
        Some(w) => {
            let n_x = spec.n_x;
            let rhs = |k: usize, t: f64, x: &[f64], dx: &mut [f64]| {
                u.fill(signal.eval(t));
                (spec.drift)(x, &u, dx);
                for (d, wi) in dx.iter_mut().zip(&w[k * n_x..(k + 1) * n_x]) {
                    *d += wi;
                }
            };
            solve_grid_piecewise(rhs, x0, n_steps, dt, method, Tolerances::default())?
        }
    };
    let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * dt).collect();
    let inputs: Vec<f64> = times.iter().flat_map(|&t| std::iter::repeat_n(signal.eval(t), n_u)).collect();
    let mut outputs = vec![0.0; (n_steps + 1) * spec.n_y];
    for k in 0..=n_steps {
        (spec.output)(
            &states[k * spec.n_x..(k + 1) * spec.n_x],
            &mut outputs[k * spec.n_y..(k + 1) * spec.n_y],
        );
    }
    Ok(Trajectory {
        dt,
        n_x: spec.n_x,
        n_u,
        n_y: spec.n_y,
        times,
        states,
        inputs,
        outputs,
    })
}

/// Adds i.i.d. `N(0, σ²)` measurement noise to every output sample.
pub fn add_noise<R: Rng + ?Sized>(traj: &Trajectory, sigma2: f64, rng: &mut R) -> Result<Trajectory> {
    let mut out = traj.clone();
    if sigma2 == 0.0 {
        return Ok(out);
    }
    let v = normal_draws(out.outputs.len(), sigma2, rng)?;
    for (y, v) in out.outputs.iter_mut().zip(v) {
        *y += v;
    }
    Ok(out)
}
