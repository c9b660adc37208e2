use serde::{Deserialize, Serialize};

use crate::error::{KklError, Result};

/// Right-hand side `f(x, u)` written into the last argument.
pub type DriftFn = fn(&[f64], &[f64], &mut [f64]);
/// Measurement map `h(x)` written into the last argument.
pub type OutputFn = fn(&[f64], &mut [f64]);

/// A control-affine benchmark system `ẋ = f(x, u)`, `y = h(x)`.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    pub name: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub drift: DriftFn,
    pub output: OutputFn,
    /// Per-axis `[lo, hi]` box initial conditions are drawn from.
    pub ic_box: Vec<[f64; 2]>,
}

/// Names of the shipped systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Duffing,
    VanDerPol,
    Rossler,
    #[serde(rename = "fitzhugh_nagumo", alias = "fitz_hugh_nagumo")]
    FitzHughNagumo,
    Linear,
}

impl SystemKind {
    pub const BENCHMARKS: [SystemKind; 4] = [
        SystemKind::Duffing,
        SystemKind::VanDerPol,
        SystemKind::Rossler,
        SystemKind::FitzHughNagumo,
    ];

    pub fn spec(self) -> SystemSpec {
        match self {
            SystemKind::Duffing => SystemSpec::duffing(),
            SystemKind::VanDerPol => SystemSpec::van_der_pol(),
            SystemKind::Rossler => SystemSpec::rossler(),
            SystemKind::FitzHughNagumo => SystemSpec::fitzhugh_nagumo(),
            SystemKind::Linear => SystemSpec::linear(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Duffing => "duffing",
            SystemKind::VanDerPol => "van_der_pol",
            SystemKind::Rossler => "rossler",
            SystemKind::FitzHughNagumo => "fitzhugh_nagumo",
            SystemKind::Linear => "linear",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "duffing" => Ok(SystemKind::Duffing),
            "van_der_pol" | "vdp" => Ok(SystemKind::VanDerPol),
            "rossler" => Ok(SystemKind::Rossler),
            "fitzhugh_nagumo" | "fitz_hugh_nagumo" | "fhn" => Ok(SystemKind::FitzHughNagumo),
            "linear" => Ok(SystemKind::Linear),
            other => Err(KklError::Config(format!("unknown system `{other}`"))),
        }
    }
}

fn duffing_drift(x: &[f64], u: &[f64], dx: &mut [f64]) {
    dx[0] = x[1];
    dx[1] = -x[0] - x[0] * x[0] * x[0] + u[0];
}

fn van_der_pol_drift(x: &[f64], u: &[f64], dx: &mut [f64]) {
    dx[0] = x[1];
    dx[1] = (1.0 - x[0] * x[0]) * x[1] - x[0] + u[0];
}

fn rossler_drift(x: &[f64], u: &[f64], dx: &mut [f64]) {
    dx[0] = -(x[1] + x[2]);
    dx[1] = x[0] + 0.1 * x[1] + u[0];
    dx[2] = 0.1 + x[2] * (x[0] - 14.0);
}

fn fitzhugh_nagumo_drift(x: &[f64], u: &[f64], dx: &mut [f64]) {
    dx[0] = 10.0 * (x[0] - x[0] * x[0] * x[0] - x[1]) + u[0];
    dx[1] = 1.5 * x[0] - x[1] + 0.8;
}

fn linear_drift(x: &[f64], u: &[f64], dx: &mut [f64]) {
    dx[0] = -x[0] + u[0];
}

fn first_coordinate(x: &[f64], y: &mut [f64]) {
    y[0] = x[0];
}

fn second_coordinate(x: &[f64], y: &mut [f64]) {
    y[0] = x[1];
}

impl SystemSpec {
    /// `ẋ₁ = x₂`, `ẋ₂ = −x₁ − x₁³ + u`, `y = x₁`.
    pub fn duffing() -> Self {
        Self {
            name: "duffing".into(),
            n_x: 2,
            n_u: 1,
            n_y: 1,
            drift: duffing_drift,
            output: first_coordinate,
            ic_box: vec![[-1.0, 1.0]; 2],
        }
    }

    /// `ẋ₁ = x₂`, `ẋ₂ = (1 − x₁²)x₂ − x₁ + u`, `y = x₁`.
    pub fn van_der_pol() -> Self {
        Self {
            name: "van_der_pol".into(),
            n_x: 2,
            n_u: 1,
            n_y: 1,
            drift: van_der_pol_drift,
            output: first_coordinate,
            ic_box: vec![[-1.0, 1.0]; 2],
        }
    }

    /// Rössler with `a = b = 0.1`, `c = 14`, input on the second axis and
    /// `y = x₂`.
    pub fn rossler() -> Self {
        Self {
            name: "rossler".into(),
            n_x: 3,
            n_u: 1,
            n_y: 1,
            drift: rossler_drift,
            output: second_coordinate,
            ic_box: vec![[-5.0, 5.0], [-5.0, 5.0], [0.0, 2.0]],
        }
    }

    /// `ẋ₁ = 10(x₁ − x₁³ − x₂) + u`, `ẋ₂ = 1.5x₁ − x₂ + 0.8`, `y = x₁`.
    pub fn fitzhugh_nagumo() -> Self {
        Self {
            name: "fitzhugh_nagumo".into(),
            n_x: 2,
            n_u: 1,
            n_y: 1,
            drift: fitzhugh_nagumo_drift,
            output: first_coordinate,
            ic_box: vec![[-1.0, 1.0]; 2],
        }
    }

    /// Scalar sanity system `ẋ = −x + u`, `y = x`.
    ///
    /// The initial-condition box is wide so that, after the latent burn-in,
    /// the retained states still cover `[−1, 1]`.
    pub fn linear() -> Self {
        Self {
            name: "linear".into(),
            n_x: 1,
            n_u: 1,
            n_y: 1,
            drift: linear_drift,
            output: first_coordinate,
            ic_box: vec![[-100.0, 100.0]],
        }
    }

    fn check(&self, what: &str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(KklError::Dimension(format!(
                "{}: {what} has length {got}, expected {want}",
                self.name
            )));
        }
        Ok(())
    }

    /// Drift with dimension checks.
    pub fn eval_drift(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check("state", x.len(), self.n_x)?;
        self.check("input", u.len(), self.n_u)?;
        let mut dx = vec![0.0; self.n_x];
        (self.drift)(x, u, &mut dx);
        Ok(dx)
    }

    /// Output map with dimension checks.
    pub fn eval_output(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check("state", x.len(), self.n_x)?;
        let mut y = vec![0.0; self.n_y];
        (self.output)(x, &mut y);
        Ok(y)
    }
}
