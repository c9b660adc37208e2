use super::{ModelBundle, ObserverMatrices};
use crate::diffcore::{Bindings, Graph, NodeId, Tensor};
use crate::error::{KklError, Result};

/// Nodes of a PDE-residual graph built by [`build_residual`].
#[derive(Clone, Copy, Debug)]
pub struct ResidualNodes {
    /// `T̂(x)`.
    pub encoded: NodeId,
    /// `∂T̂/∂x · ẋ + ∂T̂/∂w · ẇ`.
    pub derivative: NodeId,
    /// `derivative − (T̂ Aᵀ + y Bᵀ)`, one residual per row.
    pub residual: NodeId,
    /// Hypernetwork window summary, for the modulated variant.
    pub context: Option<NodeId>,
}

/// Graph leaves consumed by [`build_residual`].
pub mod leaves {
    pub const STATE: &str = "x";
    pub const STATE_RATE: &str = "x_dot";
    pub const WINDOW: &str = "window";
    pub const WINDOW_RATE: &str = "window_dot";
    pub const OUTPUT: &str = "y";
}

/// Adds `r = ∂T̂/∂x·f + ∂T̂/∂t − (A T̂ + B y)` to `g`, with data leaves named
/// in [`leaves`] and parameter leaves named as in the bundle.
///
/// The spatial and temporal terms are one forward-mode tangent seeded at
/// the state (direction `x_dot`) and, for the modulated variant, the input
/// window (direction `window_dot`). Static variants ignore the window.
pub fn build_residual(bundle: &ModelBundle, g: &mut Graph<f64>) -> Result<ResidualNodes> {
    let x = g.leaf(leaves::STATE);
    let xd = g.leaf(leaves::STATE_RATE);
    let y = g.leaf(leaves::OUTPUT);
    let mut seeds = vec![(x, xd)];
    let ctx = if bundle.hyper.is_some() {
        let w = g.leaf(leaves::WINDOW);
        let wd = g.leaf(leaves::WINDOW_RATE);
        seeds.push((w, wd));
        bundle.build_context(g, w)
    } else {
        None
    };
    let encoded = bundle.build_encoder(g, x, ctx);
    let derivative = g.push_jvp(encoded, &seeds)?;
    let residual = latent_mismatch(&bundle.matrices, g, derivative, encoded, y);
    Ok(ResidualNodes {
        encoded,
        derivative,
        residual,
        context: ctx,
    })
}

/// `rate − (z Aᵀ + y Bᵀ)` on row batches.
pub fn latent_mismatch(m: &ObserverMatrices, g: &mut Graph<f64>, rate: NodeId, z: NodeId, y: NodeId) -> NodeId {
    let at = g.constant(m_t(&m.a, m.n_z, m.n_z));
    let bt = g.constant(m_t(&m.b, m.n_z, m.n_y));
    let za = g.matmul(z, at);
    let yb = g.matmul(y, bt);
    let lin = g.add(za, yb);
    g.sub(rate, lin)
}

fn m_t(data: &[f64], rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, data.to_vec())
        .and_then(|t| t.transpose())
        .expect("validated matrix")
}

/// PDE residual of the bundle's encoder at states `x` (one per row) under
/// inputs `u`.
///
/// `windows` and `next_windows` are the input windows ending at the
/// current and the next grid point; their difference over `dt` is the
/// window rate. They are only used by the modulated variant and may be
/// `None` otherwise (a missing window means the zero window).
pub fn pde_residual(
    bundle: &ModelBundle,
    x: &Tensor<f64>,
    u: &Tensor<f64>,
    windows: Option<&Tensor<f64>>,
    next_windows: Option<&Tensor<f64>>,
) -> Result<Tensor<f64>> {
    let spec = bundle.system.spec();
    let n = x.rows();
    if x.rank() != 2 || x.cols() != spec.n_x || u.rank() != 2 || u.cols() != spec.n_u || u.rows() != n {
        return Err(KklError::Dimension(format!(
            "pde_residual takes x [n×{}] and u [n×{}], got {:?} and {:?}",
            spec.n_x,
            spec.n_u,
            x.shape(),
            u.shape()
        )));
    }
    let mut xdot = Vec::with_capacity(n * spec.n_x);
    let mut ys = Vec::with_capacity(n * spec.n_y);
    for i in 0..n {
        xdot.extend(spec.eval_drift(x.row_slice(i), u.row_slice(i))?);
        ys.extend(spec.eval_output(x.row_slice(i))?);
    }
    let mut b = bundle.params().to_bindings();
    b.insert(leaves::STATE.into(), x.clone());
    b.insert(leaves::STATE_RATE.into(), Tensor::matrix(n, spec.n_x, xdot)?);
    b.insert(leaves::OUTPUT.into(), Tensor::matrix(n, spec.n_y, ys)?);
    if bundle.hyper.is_some() {
        let cols = bundle.window * spec.n_u;
        let zero = Tensor::zeros(vec![n, cols]);
        let w = windows.unwrap_or(&zero);
        let wn = next_windows.unwrap_or(w);
        if w.shape() != [n, cols] || wn.shape() != [n, cols] {
            return Err(KklError::Dimension(format!(
                "windows must be [{n}×{cols}], got {:?} and {:?}",
                w.shape(),
                wn.shape()
            )));
        }
        b.insert(leaves::WINDOW.into(), w.clone());
        b.insert(leaves::WINDOW_RATE.into(), wn.sub(w)?.scale(1.0 / bundle.dt));
    }
    let mut g = Graph::new();
    let nodes = build_residual(bundle, &mut g)?;
    let exec = g.forward(&[&b as &Bindings<f64>], &[nodes.residual])?;
    Ok(exec.value(nodes.residual).clone())
}
