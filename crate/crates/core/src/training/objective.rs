use crate::diffcore::{Bindings, Graph, NodeId, Tensor};
use crate::error::{KklError, Result};
use crate::networks::{Injection, Mlp};
use crate::observer::{build_residual, latent_mismatch, leaves as rl, prefix, ModelBundle, ObserverMatrices};

/// Data leaves of the training losses, besides those shared with the
/// residual graph.
pub mod leaves {
    pub use crate::observer::leaves::{OUTPUT, STATE, STATE_RATE, WINDOW, WINDOW_RATE};
    /// Latent target (co-simulated or anchor values).
    pub const LATENT: &str = "z";
    /// Latent rate target `∂T̄/∂x · f(x, u)`.
    pub const LATENT_RATE: &str = "z_dot";
    /// `1 × 1` PDE weight.
    pub const WEIGHT: &str = "nu";
}

/// A recorded scalar loss plus named auxiliary terms.
#[derive(Clone, Debug)]
pub struct Objective {
    pub graph: Graph<f64>,
    pub loss: NodeId,
    pub terms: Vec<(String, NodeId)>,
}

/// Loss value, term values and gradients for one evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub terms: Vec<f64>,
    pub gradients: Vec<Tensor<f64>>,
}

impl Objective {
    fn outputs(&self) -> Vec<NodeId> {
        let mut out = vec![self.loss];
        out.extend(self.terms.iter().map(|t| t.1));
        out
    }

    /// Loss and term values.
    pub fn value(&self, bindings: &[&Bindings<f64>]) -> Result<(f64, Vec<f64>)> {
        let outs = self.outputs();
        let exec = self.graph.forward(bindings, &outs)?;
        let loss = exec.value(self.loss).item();
        let terms = self.terms.iter().map(|t| exec.value(t.1).item()).collect();
        Ok((loss, terms))
    }

    /// Loss, terms and gradients with respect to the leaves `wrt` (zero
    /// for leaves the loss does not reach).
    pub fn evaluate(&self, bindings: &[&Bindings<f64>], wrt: &[String]) -> Result<Evaluation> {
        let outs = self.outputs();
        let exec = self.graph.forward(bindings, &outs)?;
        let loss = exec.value(self.loss).item();
        let terms = self.terms.iter().map(|t| exec.value(t.1).item()).collect();
        let mut ids = Vec::new();
        let mut slots = Vec::new();
        for (k, name) in wrt.iter().enumerate() {
            if let Some(id) = self.graph.leaf_id(name) {
                ids.push(id);
                slots.push(k);
            }
        }
        let grads = exec.gradients(self.loss, &ids)?;
        let mut gradients = Vec::with_capacity(wrt.len());
        for name in wrt {
            let bound = bindings
                .iter()
                .find_map(|b| b.get(name))
                .ok_or_else(|| KklError::UnboundLeaf(name.clone()))?;
            gradients.push(Tensor::zeros(bound.shape().to_vec()));
        }
        for (g, k) in grads.into_iter().zip(slots) {
            if g.shape() == gradients[k].shape() {
                gradients[k] = g;
            }
        }
        Ok(Evaluation { loss, terms, gradients })
    }
}

/// Phase-1 encoder loss `‖T(x) − z‖² + ν ‖∂T/∂x·f(x) − A T(x) − B y‖²`
/// (batch means of squared row norms), with data leaves `x`, `x_dot`,
/// `y`, `z` and `nu`.
pub fn encoder_objective(encoder: &Mlp<f64>, matrices: &ObserverMatrices) -> Objective {
    let mut g = Graph::new();
    let x = g.leaf(leaves::STATE);
    let xd = g.leaf(leaves::STATE_RATE);
    let y = g.leaf(leaves::OUTPUT);
    let z = g.leaf(leaves::LATENT);
    let nu = g.leaf(leaves::WEIGHT);
    let enc = encoder.build(&mut g, prefix::ENCODER, x);
    let diff = g.sub(enc, z);
    let mse = g.mean_sq_rows(diff);
    let rate = g.push_jvp(enc, &[(x, xd)]).expect("state is a leaf");
    let r = latent_mismatch(matrices, &mut g, rate, enc, y);
    let pde = g.mean_sq_rows(r);
    let weighted = g.mul_scalar(pde, nu);
    let loss = g.add(mse, weighted);
    Objective {
        graph: g,
        loss,
        terms: vec![("mse".into(), mse), ("pde".into(), pde)],
    }
}

/// Decoder loss `‖T*(z) − x‖²` with data leaves `z` and `x`.
pub fn decoder_objective(decoder: &Mlp<f64>) -> Objective {
    let mut g = Graph::new();
    let z = g.leaf(leaves::LATENT);
    let x = g.leaf(leaves::STATE);
    let dec = decoder.build(&mut g, prefix::DECODER, z);
    let diff = g.sub(dec, x);
    let loss = g.mean_sq_rows(diff);
    Objective {
        graph: g,
        loss,
        terms: vec![("mse".into(), loss)],
    }
}

/// Injection loss `‖A z + B y + Φ(z, window) − ż_true‖²` with data leaves
/// `z`, `y`, `window` and `z_dot`.
pub fn injection_objective(injection: &Injection<f64>, matrices: &ObserverMatrices, window: usize) -> Objective {
    let mut g = Graph::new();
    let z = g.leaf(leaves::LATENT);
    let y = g.leaf(leaves::OUTPUT);
    let w = g.leaf(leaves::WINDOW);
    let target = g.leaf(leaves::LATENT_RATE);
    let ell = injection.build_context(&mut g, prefix::INJECTION, w, window);
    let phi = injection.build_apply(&mut g, prefix::INJECTION, z, ell);
    // target − (A z + B y) − Φ
    let base = latent_mismatch(matrices, &mut g, target, z, y);
    let diff = g.sub(base, phi);
    let loss = g.mean_sq_rows(diff);
    Objective {
        graph: g,
        loss,
        terms: vec![("aug".into(), loss)],
    }
}

/// Hypernetwork loss `‖T̃*(T̃(x)) − x‖² + λ ‖∂_t T̃ + ∂_x T̃·f − A T̃ − B y‖²`
/// with data leaves `x`, `x_dot`, `y`, `window`, `window_dot` and `nu`
/// (holding `λ`).
pub fn hyper_objective(bundle: &ModelBundle) -> Result<Objective> {
    if bundle.hyper.is_none() {
        return Err(KklError::Config("hyper objective needs a hypernetwork".into()));
    }
    let mut g = Graph::new();
    let nodes = build_residual(bundle, &mut g)?;
    let x = g.leaf_id(rl::STATE).expect("built by the residual");
    let xhat = bundle.build_decoder(&mut g, nodes.encoded, nodes.context);
    let diff = g.sub(xhat, x);
    let rec = g.mean_sq_rows(diff);
    let pde = g.mean_sq_rows(nodes.residual);
    let lam = g.leaf(leaves::WEIGHT);
    let weighted = g.mul_scalar(pde, lam);
    let loss = g.add(rec, weighted);
    Ok(Objective {
        graph: g,
        loss,
        terms: vec![("rec".into(), rec), ("pde".into(), pde)],
    })
}

/// `1 × 1` weight tensor.
pub fn weight(v: f64) -> Tensor<f64> {
    Tensor::matrix(1, 1, vec![v]).expect("1x1")
}
