use std::io::{self, Write};

/// Samples of a simulation on the uniform grid `t_k = kΔt`, stored
/// row-major (one row per grid point).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub inputs: Vec<f64>,
    pub outputs: Vec<f64>,
}

impl Trajectory {
    /// Number of grid points (`N_step + 1`).
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n_x..(k + 1) * self.n_x]
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k * self.n_u..(k + 1) * self.n_u]
    }

    pub fn output(&self, k: usize) -> &[f64] {
        &self.outputs[k * self.n_y..(k + 1) * self.n_y]
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().chain(&self.outputs).all(|v| v.is_finite())
    }

    /// Columnar CSV: `t, x1.., u1.., y1..`, one row per grid point.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n_x).map(|i| format!("x{i}")));
        header.extend((1..=self.n_u).map(|i| format!("u{i}")));
        header.extend((1..=self.n_y).map(|i| format!("y{i}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let row: Vec<String> = std::iter::once(self.times[k])
                .chain(self.state(k).iter().copied())
                .chain(self.input(k).iter().copied())
                .chain(self.output(k).iter().copied())
                .map(|v| v.to_string())
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}
