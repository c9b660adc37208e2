use rand::Rng;

use super::{uniform, Gru, Mlp};
use crate::diffcore::{Graph, NodeId, ParamSet, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

/// Input-injection term `Φ(ẑ, window)` for the latent observer dynamics.
///
/// The window is summarised by the GRU and a bias-free projection
/// `ℓ = h·P`. Then `Φ = φ([ẑ, ℓ]) ⊙ (ℓ·G)` where `φ` is a `tanh` MLP with a
/// bias-free output layer and `G` is a bias-free gate. Both factors vanish
/// with `ℓ`, so a zero window yields `Φ = 0` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Injection<S> {
    pub gru: Gru<S>,
    /// `P ∈ ℝ^{H×d_ℓ}`.
    pub proj: Tensor<S>,
    pub phi: Mlp<S>,
    /// `G ∈ ℝ^{d_ℓ×n_z}`.
    pub gate: Tensor<S>,
}

/// Widths of the injection network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InjectionDims {
    pub n_u: usize,
    pub n_z: usize,
    pub gru_hidden: usize,
    pub context: usize,
    pub phi_hidden: usize,
    pub phi_layers: usize,
}

impl<S: Scalar> Injection<S> {
    pub fn new<R: Rng + ?Sized>(d: InjectionDims, rng: &mut R) -> Self {
        let gru = Gru::new(d.n_u, d.gru_hidden, rng);
        let proj = uniform(rng, d.gru_hidden, d.context, 1.0 / (d.gru_hidden as f64).sqrt());
        let mut dims = vec![d.n_z + d.context];
        dims.extend(std::iter::repeat_n(d.phi_hidden, d.phi_layers));
        dims.push(d.n_z);
        let phi = Mlp::new(&dims, false, rng);
        let gate = uniform(rng, d.context, d.n_z, 1.0 / (d.context as f64).sqrt());
        Self { gru, proj, phi, gate }
    }

    pub fn n_z(&self) -> usize {
        self.gate.cols()
    }

    /// Window summaries `ℓ`, one row per window.
    pub fn context(&self, windows: &Tensor<S>) -> Result<Tensor<S>> {
        self.gru.encode(windows)?.matmul(&self.proj)
    }

    /// `Φ` for latent states `z` and precomputed contexts `ℓ` (row-aligned).
    pub fn apply(&self, z: &Tensor<S>, ell: &Tensor<S>) -> Result<Tensor<S>> {
        let body = self.phi.forward(&z.concat_cols(ell)?)?;
        body.mul(&ell.matmul(&self.gate)?)
    }

    pub fn forward(&self, z: &Tensor<S>, windows: &Tensor<S>) -> Result<Tensor<S>> {
        self.apply(z, &self.context(windows)?)
    }

    /// Graph node for `ℓ`.
    pub fn build_context(&self, g: &mut Graph<S>, prefix: &str, windows: NodeId, steps: usize) -> NodeId {
        let h = self.gru.build(g, &format!("{prefix}.gru"), windows, steps);
        let p = g.leaf(&format!("{prefix}.proj"));
        g.matmul(h, p)
    }

    /// Graph node for `Φ` given nodes for `z` and `ℓ`.
    pub fn build_apply(&self, g: &mut Graph<S>, prefix: &str, z: NodeId, ell: NodeId) -> NodeId {
        let zl = g.concat_cols(z, ell);
        let body = self.phi.build(g, &format!("{prefix}.phi"), zl);
        let gw = g.leaf(&format!("{prefix}.gate"));
        let gate = g.matmul(ell, gw);
        g.mul(body, gate)
    }

    pub fn params(&self, prefix: &str) -> ParamSet<S> {
        let mut p = self.gru.params(&format!("{prefix}.gru"));
        p.push(format!("{prefix}.proj"), self.proj.clone());
        p.extend(self.phi.params(&format!("{prefix}.phi")));
        p.push(format!("{prefix}.gate"), self.gate.clone());
        p
    }

    pub fn load(&mut self, prefix: &str, params: &ParamSet<S>) -> Result<()> {
        self.gru.load(&format!("{prefix}.gru"), params)?;
        let proj = params.take(&format!("{prefix}.proj"))?;
        self.proj.check_same(&proj, "load projection")?;
        self.proj = proj;
        self.phi.load(&format!("{prefix}.phi"), params)?;
        let gate = params.take(&format!("{prefix}.gate"))?;
        self.gate.check_same(&gate, "load gate")?;
        self.gate = gate;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn dims() -> InjectionDims {
        InjectionDims {
            n_u: 1,
            n_z: 5,
            gru_hidden: 8,
            context: 4,
            phi_hidden: 16,
            phi_layers: 2,
        }
    }

    #[test]
    fn zero_window_gives_zero_injection() {
        let mut r = rng::from_seed(1);
        let inj = Injection::<f64>::new(dims(), &mut r);
        let z = uniform(&mut r, 3, 5, 3.0);
        let phi = inj.forward(&z, &Tensor::zeros(vec![3, 10])).unwrap();
        assert_eq!(phi.shape(), &[3, 5]);
        assert!(phi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonzero_window_gives_nonzero_injection() {
        let mut r = rng::from_seed(2);
        let inj = Injection::<f64>::new(dims(), &mut r);
        let z = uniform(&mut r, 1, 5, 1.0);
        let w = uniform(&mut r, 1, 10, 1.0);
        assert!(inj.forward(&z, &w).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn graph_matches_numeric_bitwise() {
        let mut r = rng::from_seed(3);
        let inj = Injection::<f64>::new(dims(), &mut r);
        let z = uniform(&mut r, 4, 5, 1.0);
        let w = uniform(&mut r, 4, 10, 1.0);
        let mut g = Graph::new();
        let (zn, wn) = (g.leaf("z"), g.leaf("w"));
        let ell = inj.build_context(&mut g, "inj", wn, 10);
        let out = inj.build_apply(&mut g, "inj", zn, ell);
        g.set_output(out);
        let mut b = inj.params("inj").to_bindings();
        b.insert("z".into(), z.clone());
        b.insert("w".into(), w.clone());
        assert_eq!(crate::diffcore::evaluate(&g, &b).unwrap(), inj.forward(&z, &w).unwrap());
        let mut other = Injection::<f64>::new(dims(), &mut r);
        other.load("inj", &inj.params("inj")).unwrap();
        assert_eq!(other, inj);
    }
}
