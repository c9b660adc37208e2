use rand::Rng;

use super::uniform;
use crate::diffcore::{Graph, NodeId, ParamSet, Tensor};
use crate::error::{KklError, Result};
use crate::scalar::Scalar;

/// Gated recurrent unit without bias terms.
///
/// Gate blocks are stacked along columns in the order reset, update,
/// candidate: `w_input ∈ ℝ^{n_u×3H}`, `w_hidden ∈ ℝ^{H×3H}`. One step is
///
/// ```text
/// r = σ(x W_ir + h W_hr)
/// z = σ(x W_iz + h W_hz)
/// n = tanh(x W_in + r ⊙ (h W_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// Without biases, a zero window starting from `h = 0` stays at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gru<S> {
    pub w_input: Tensor<S>,
    pub w_hidden: Tensor<S>,
}

impl<S: Scalar> Gru<S> {
    pub fn new<R: Rng + ?Sized>(n_u: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_input: uniform(rng, n_u, 3 * hidden, bound),
            w_hidden: uniform(rng, hidden, 3 * hidden, bound),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.rows()
    }

    /// Window length `ω` of a batch of flattened windows.
    fn steps(&self, windows: &Tensor<S>) -> Result<usize> {
        let n_u = self.input_dim();
        if windows.rank() != 2 || windows.cols() % n_u != 0 || windows.cols() == 0 {
            return Err(KklError::ShapeMismatch {
                context: "GRU window".into(),
                expected: vec![windows.shape().first().copied().unwrap_or(1), n_u],
                got: windows.shape().to_vec(),
            });
        }
        Ok(windows.cols() / n_u)
    }

    /// Final hidden state for each window. `windows` has one window per row,
    /// time-major (oldest sample first), `ω·n_u` columns.
    pub fn encode(&self, windows: &Tensor<S>) -> Result<Tensor<S>> {
        let steps = self.steps(windows)?;
        let (n_u, hid) = (self.input_dim(), self.hidden());
        let mut h = Tensor::zeros(vec![windows.rows(), hid]);
        for t in 0..steps {
            let x = windows.slice_cols(t * n_u, n_u)?;
            let xg = x.matmul(&self.w_input)?;
            let hg = h.matmul(&self.w_hidden)?;
            let r = xg.slice_cols(0, hid)?.add(&hg.slice_cols(0, hid)?)?.sigmoid();
            let z = xg.slice_cols(hid, hid)?.add(&hg.slice_cols(hid, hid)?)?.sigmoid();
            let n = xg
                .slice_cols(2 * hid, hid)?
                .add(&r.mul(&hg.slice_cols(2 * hid, hid)?)?)?
                .tanh();
            let keep = z.map(|e| -e + S::one());
            h = keep.mul(&n)?.add(&z.mul(&h)?)?;
        }
        Ok(h)
    }

    /// Graph counterpart of [`Gru::encode`] for `steps` time steps, with
    /// parameter leaves `{prefix}.wi` and `{prefix}.wh`.
    pub fn build(&self, g: &mut Graph<S>, prefix: &str, windows: NodeId, steps: usize) -> NodeId {
        let (n_u, hid) = (self.input_dim(), self.hidden());
        let wi = g.leaf(&format!("{prefix}.wi"));
        let wh = g.leaf(&format!("{prefix}.wh"));
        let mut h: Option<NodeId> = None;
        for t in 0..steps {
            let x = g.slice_cols(windows, t * n_u, n_u);
            let xg = g.matmul(x, wi);
            let hprev = match h {
                Some(h) => h,
                None => {
                    let first = g.slice_cols(xg, 0, hid);
                    g.zeros_like(first)
                }
            };
            let hg = g.matmul(hprev, wh);
            let (xr, hr) = (g.slice_cols(xg, 0, hid), g.slice_cols(hg, 0, hid));
            let r_pre = g.add(xr, hr);
            let r = g.sigmoid(r_pre);
            let (xz, hz) = (g.slice_cols(xg, hid, hid), g.slice_cols(hg, hid, hid));
            let z_pre = g.add(xz, hz);
            let z = g.sigmoid(z_pre);
            let (xn, hn) = (g.slice_cols(xg, 2 * hid, hid), g.slice_cols(hg, 2 * hid, hid));
            let rhn = g.mul(r, hn);
            let n_pre = g.add(xn, rhn);
            let n = g.tanh(n_pre);
            let keep = g.one_minus(z);
            let a = g.mul(keep, n);
            let b = g.mul(z, hprev);
            h = Some(g.add(a, b));
        }
        h.expect("window has at least one step")
    }

    pub fn params(&self, prefix: &str) -> ParamSet<S> {
        let mut p = ParamSet::new();
        p.push(format!("{prefix}.wi"), self.w_input.clone());
        p.push(format!("{prefix}.wh"), self.w_hidden.clone());
        p
    }

    pub fn load(&mut self, prefix: &str, params: &ParamSet<S>) -> Result<()> {
        let wi = params.take(&format!("{prefix}.wi"))?;
        let wh = params.take(&format!("{prefix}.wh"))?;
        self.w_input.check_same(&wi, "load GRU input weights")?;
        self.w_hidden.check_same(&wh, "load GRU hidden weights")?;
        self.w_input = wi;
        self.w_hidden = wh;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_window_gives_zero_state() {
        let g = Gru::<f64>::new(1, 8, &mut rng::from_seed(1));
        let h = g.encode(&Tensor::zeros(vec![3, 20])).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_single_step_by_hand() {
        let g = Gru::<f64> {
            w_input: Tensor::matrix(1, 3, vec![0.5, -0.3, 0.8]).unwrap(),
            w_hidden: Tensor::matrix(1, 3, vec![0.2, 0.1, -0.4]).unwrap(),
        };
        let u = 0.7;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        // h0 = 0, so the hidden contributions vanish
        let z = sig(-0.3 * u);
        let n = (0.8 * u).tanh();
        let expect = (1.0 - z) * n;
        let h = g.encode(&Tensor::row(vec![u])).unwrap().item();
        assert!((h - expect).abs() <= 1e-12);
    }

    #[test]
    fn not_homogeneous() {
        let g = Gru::<f64>::new(1, 4, &mut rng::from_seed(5));
        let w = Tensor::row(vec![0.9, -0.4, 0.7, 1.0]);
        let h1 = g.encode(&w).unwrap();
        let h2 = g.encode(&w.scale(2.0)).unwrap();
        let diff = h2.sub(&h1.scale(2.0)).unwrap().max_abs();
        assert!(diff > 1e-6);
    }

    #[test]
    fn graph_matches_numeric_bitwise() {
        let mut r = rng::from_seed(6);
        let gru = Gru::<f64>::new(2, 5, &mut r);
        let w = uniform(&mut r, 3, 12, 1.0);
        let mut g = Graph::new();
        let wn = g.leaf("w");
        let out = gru.build(&mut g, "gru", wn, 6);
        g.set_output(out);
        let mut b = gru.params("gru").to_bindings();
        b.insert("w".into(), w.clone());
        assert_eq!(crate::diffcore::evaluate(&g, &b).unwrap(), gru.encode(&w).unwrap());
    }
}
