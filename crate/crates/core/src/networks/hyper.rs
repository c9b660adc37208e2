use std::ops::Range;

use rand::Rng;

use super::{uniform, FactorNodes, Gru, LayerFactors, Mlp};
use crate::diffcore::{Graph, NodeId, ParamSet, Tensor};
use crate::error::{KklError, Result};
use crate::scalar::Scalar;

/// Widths of the hypernetwork.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperDims {
    pub n_u: usize,
    pub gru_hidden: usize,
    pub embedding: usize,
    pub backbone: usize,
    pub rank: usize,
    pub scale_init: f64,
    /// `(d_in, d_out)` of every modulated layer, in order.
    pub layers: Vec<(usize, usize)>,
}

/// Hypernetwork producing per-layer low-rank weight deltas from an input
/// window.
///
/// With `h` the GRU summary of the window and `e_l` a learned embedding of
/// layer `l`:
///
/// ```text
/// f_l = tanh(tanh(h·B_h + e_l·B_e + c_1)·B_2 + c_2)
/// b_l = f_l·H_l + d_l          (r × d_out, right factor)
/// a_l = h·L_l                  (d_in × r, left factor, bias-free)
/// ΔW_l = s·a_l·b_l
/// ```
///
/// The left factor is linear in `h` alone, so a zero window gives
/// `ΔW_l = 0` exactly for every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNet<S> {
    pub gru: Gru<S>,
    pub embeddings: Vec<Tensor<S>>,
    pub backbone_h: Tensor<S>,
    pub backbone_e: Tensor<S>,
    pub backbone_b1: Tensor<S>,
    pub backbone_w2: Tensor<S>,
    pub backbone_b2: Tensor<S>,
    pub head_w: Vec<Tensor<S>>,
    pub head_b: Vec<Tensor<S>>,
    pub left: Vec<Tensor<S>>,
    /// `1 × 1` global scale `s`.
    pub scale: Tensor<S>,
    pub rank: usize,
    pub layers: Vec<(usize, usize)>,
}

/// Explicit low-rank deltas for one context: `ΔW_l = s·a_l·b_l` with
/// `a_l ∈ ℝ^{d_in×r}`, `b_l ∈ ℝ^{r×d_out}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankDelta<S> {
    pub scale: S,
    pub a: Vec<Tensor<S>>,
    pub b: Vec<Tensor<S>>,
}

impl<S: Scalar> LowRankDelta<S> {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Dense `ΔW_l`.
    pub fn matrix(&self, l: usize) -> Result<Tensor<S>> {
        Ok(self.a[l].matmul(&self.b[l])?.scale(self.scale))
    }
}

/// `W'_l = W_l + ΔW_l` on every layer; biases are copied unchanged.
pub fn apply_delta<S: Scalar>(base: &Mlp<S>, delta: &LowRankDelta<S>) -> Result<Mlp<S>> {
    if delta.len() != base.num_layers() {
        return Err(KklError::Dimension(format!(
            "{} deltas for {} layers",
            delta.len(),
            base.num_layers()
        )));
    }
    let mut out = base.clone();
    for l in 0..base.num_layers() {
        out.weights[l] = base.weights[l].add(&delta.matrix(l)?)?;
    }
    Ok(out)
}

impl<S: Scalar> HyperNet<S> {
    pub fn new<R: Rng + ?Sized>(d: &HyperDims, rng: &mut R) -> Self {
        let gru = Gru::new(d.n_u, d.gru_hidden, rng);
        let embeddings = d.layers.iter().map(|_| uniform(rng, 1, d.embedding, 1.0)).collect();
        let b_in = 1.0 / ((d.gru_hidden + d.embedding) as f64).sqrt();
        let backbone_h = uniform(rng, d.gru_hidden, d.backbone, b_in);
        let backbone_e = uniform(rng, d.embedding, d.backbone, b_in);
        let backbone_b1 = uniform(rng, 1, d.backbone, b_in);
        let b_hid = 1.0 / (d.backbone as f64).sqrt();
        let backbone_w2 = uniform(rng, d.backbone, d.backbone, b_hid);
        let backbone_b2 = uniform(rng, 1, d.backbone, b_hid);
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        let mut left = Vec::new();
        let b_h = 1.0 / (d.gru_hidden as f64).sqrt();
        for &(d_in, d_out) in &d.layers {
            head_w.push(uniform(rng, d.backbone, d.rank * d_out, b_hid));
            head_b.push(uniform(rng, 1, d.rank * d_out, b_hid));
            left.push(uniform(rng, d.gru_hidden, d_in * d.rank, b_h));
        }
        Self {
            gru,
            embeddings,
            backbone_h,
            backbone_e,
            backbone_b1,
            backbone_w2,
            backbone_b2,
            head_w,
            head_b,
            left,
            scale: Tensor::matrix(1, 1, vec![S::lit(d.scale_init)]).expect("1x1"),
            rank: d.rank,
            layers: d.layers.clone(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-sample factors for every modulated layer, one window per row.
    pub fn factors(&self, windows: &Tensor<S>) -> Result<Vec<LayerFactors<S>>> {
        let h = self.gru.encode(windows)?;
        self.factors_from_context(&h)
    }

    /// Factors from precomputed GRU summaries `h` (one per row).
    pub fn factors_from_context(&self, h: &Tensor<S>) -> Result<Vec<LayerFactors<S>>> {
        self.factors_for(h, 0..self.num_layers())
    }

    /// Factors for the modulated layers in `layers` only.
    pub fn factors_for(&self, h: &Tensor<S>, layers: Range<usize>) -> Result<Vec<LayerFactors<S>>> {
        let hb = h.matmul(&self.backbone_h)?;
        layers
            .map(|l| {
                let c = self.embeddings[l].matmul(&self.backbone_e)?.add_row(&self.backbone_b1)?;
                let f1 = hb.add_row(&c)?.tanh();
                let f2 = f1.matmul(&self.backbone_w2)?.add_row(&self.backbone_b2)?.tanh();
                let b = f2.matmul(&self.head_w[l])?.add_row(&self.head_b[l])?;
                let a = h.matmul(&self.left[l])?;
                Ok(LayerFactors { a, b })
            })
            .collect()
    }

    /// Explicit deltas for a single window (`1 × ω·n_u`).
    pub fn generate(&self, window: &Tensor<S>) -> Result<LowRankDelta<S>> {
        if window.rank() != 2 || window.rows() != 1 {
            return Err(KklError::Dimension("generate takes exactly one window".into()));
        }
        let factors = self.factors(window)?;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (f, &(d_in, d_out)) in factors.into_iter().zip(&self.layers) {
            a.push(f.a.reshape(vec![d_in, self.rank])?);
            b.push(f.b.reshape(vec![self.rank, d_out])?);
        }
        Ok(LowRankDelta {
            scale: self.scale.item(),
            a,
            b,
        })
    }

    /// Graph nodes for the GRU summary of `windows`.
    pub fn build_context(&self, g: &mut Graph<S>, prefix: &str, windows: NodeId, steps: usize) -> NodeId {
        self.gru.build(g, &format!("{prefix}.gru"), windows, steps)
    }

    /// Graph nodes for every layer's factors plus the scale leaf.
    pub fn build_factors(&self, g: &mut Graph<S>, prefix: &str, h: NodeId) -> (Vec<FactorNodes>, NodeId) {
        self.build_factors_for(g, prefix, h, 0..self.num_layers())
    }

    /// Graph nodes for the factors of the layers in `layers`.
    pub fn build_factors_for(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        h: NodeId,
        layers: Range<usize>,
    ) -> (Vec<FactorNodes>, NodeId) {
        let bh = g.leaf(&format!("{prefix}.bb_h"));
        let be = g.leaf(&format!("{prefix}.bb_e"));
        let b1 = g.leaf(&format!("{prefix}.bb_b1"));
        let w2 = g.leaf(&format!("{prefix}.bb_w2"));
        let b2 = g.leaf(&format!("{prefix}.bb_b2"));
        let hb = g.matmul(h, bh);
        let mut out = Vec::with_capacity(layers.len());
        for l in layers {
            let e = g.leaf(&format!("{prefix}.emb{l}"));
            let ce = g.matmul(e, be);
            let c = g.add_row(ce, b1);
            let pre1 = g.add_row(hb, c);
            let f1 = g.tanh(pre1);
            let m2 = g.matmul(f1, w2);
            let pre2 = g.add_row(m2, b2);
            let f2 = g.tanh(pre2);
            let hw = g.leaf(&format!("{prefix}.head_w{l}"));
            let hbias = g.leaf(&format!("{prefix}.head_b{l}"));
            let bm = g.matmul(f2, hw);
            let b = g.add_row(bm, hbias);
            let lw = g.leaf(&format!("{prefix}.left{l}"));
            let a = g.matmul(h, lw);
            out.push(FactorNodes { a, b });
        }
        let s = g.leaf(&format!("{prefix}.scale"));
        (out, s)
    }

    pub fn params(&self, prefix: &str) -> ParamSet<S> {
        let mut p = self.gru.params(&format!("{prefix}.gru"));
        p.push(format!("{prefix}.bb_h"), self.backbone_h.clone());
        p.push(format!("{prefix}.bb_e"), self.backbone_e.clone());
        p.push(format!("{prefix}.bb_b1"), self.backbone_b1.clone());
        p.push(format!("{prefix}.bb_w2"), self.backbone_w2.clone());
        p.push(format!("{prefix}.bb_b2"), self.backbone_b2.clone());
        for l in 0..self.num_layers() {
            p.push(format!("{prefix}.emb{l}"), self.embeddings[l].clone());
            p.push(format!("{prefix}.head_w{l}"), self.head_w[l].clone());
            p.push(format!("{prefix}.head_b{l}"), self.head_b[l].clone());
            p.push(format!("{prefix}.left{l}"), self.left[l].clone());
        }
        p.push(format!("{prefix}.scale"), self.scale.clone());
        p
    }

    pub fn load(&mut self, prefix: &str, params: &ParamSet<S>) -> Result<()> {
        fn set<S: Scalar>(slot: &mut Tensor<S>, params: &ParamSet<S>, name: String) -> Result<()> {
            let t = params.take(&name)?;
            slot.check_same(&t, &name)?;
            *slot = t;
            Ok(())
        }
        self.gru.load(&format!("{prefix}.gru"), params)?;
        set(&mut self.backbone_h, params, format!("{prefix}.bb_h"))?;
        set(&mut self.backbone_e, params, format!("{prefix}.bb_e"))?;
        set(&mut self.backbone_b1, params, format!("{prefix}.bb_b1"))?;
        set(&mut self.backbone_w2, params, format!("{prefix}.bb_w2"))?;
        set(&mut self.backbone_b2, params, format!("{prefix}.bb_b2"))?;
        for l in 0..self.num_layers() {
            set(&mut self.embeddings[l], params, format!("{prefix}.emb{l}"))?;
            set(&mut self.head_w[l], params, format!("{prefix}.head_w{l}"))?;
            set(&mut self.head_b[l], params, format!("{prefix}.head_b{l}"))?;
            set(&mut self.left[l], params, format!("{prefix}.left{l}"))?;
        }
        set(&mut self.scale, params, format!("{prefix}.scale"))
    }
}
