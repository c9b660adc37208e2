use rand::Rng;

use super::uniform;
use crate::diffcore::{Graph, NodeId, ParamSet, Tensor};
use crate::error::{KklError, Result};
use crate::scalar::Scalar;

/// Fully connected network with `tanh` hidden layers.
///
/// Weights use the row-vector convention: layer `l` maps a batch
/// `x ∈ ℝ^{n×d_in}` to `x·W_l + b_l` with `W_l ∈ ℝ^{d_in×d_out}` and
/// `b_l ∈ ℝ^{1×d_out}`. Any layer may be bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<S> {
    pub weights: Vec<Tensor<S>>,
    pub biases: Vec<Option<Tensor<S>>>,
    /// Apply `tanh` to the output layer as well.
    pub output_activation: bool,
}

/// Per-sample low-rank factors for one layer: row `i` of `a` is a
/// row-major `d_in × r` matrix and row `i` of `b` a row-major `r × d_out`
/// matrix, so sample `i` sees `W + s·a_i·b_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFactors<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

/// Graph nodes holding per-sample factors for one layer.
#[derive(Clone, Copy, Debug)]
pub struct FactorNodes {
    pub a: NodeId,
    pub b: NodeId,
}

pub fn weight_name(prefix: &str, l: usize) -> String {
    format!("{prefix}.w{l}")
}

pub fn bias_name(prefix: &str, l: usize) -> String {
    format!("{prefix}.b{l}")
}

impl<S: Scalar> Mlp<S> {
    /// Random network with layer widths `dims`; weights and biases are drawn
    /// from `U(−1/√d_in, 1/√d_in)`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], output_bias: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output width");
        let n = dims.len() - 1;
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for l in 0..n {
            let bound = 1.0 / (dims[l] as f64).sqrt();
            weights.push(uniform(rng, dims[l], dims[l + 1], bound));
            let with_bias = l + 1 < n || output_bias;
            biases.push(with_bias.then(|| uniform(rng, 1, dims[l + 1], bound)));
        }
        Self {
            weights,
            biases,
            output_activation: false,
        }
    }

    /// All-zero network of the given widths, with biases everywhere.
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.len() - 1;
        Self {
            weights: (0..n).map(|l| Tensor::zeros(vec![dims[l], dims[l + 1]])).collect(),
            biases: (0..n).map(|l| Some(Tensor::zeros(vec![1, dims[l + 1]]))).collect(),
            output_activation: false,
        }
    }

    /// Checks that layer shapes chain and biases match their layers.
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(KklError::Dimension("MLP needs one bias slot per layer".into()));
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.rank() != 2 {
                return Err(KklError::Dimension(format!("layer {l} weight is not a matrix")));
            }
            if l > 0 && self.weights[l - 1].cols() != w.rows() {
                return Err(KklError::ShapeMismatch {
                    context: format!("MLP layer {l} input"),
                    expected: vec![self.weights[l - 1].cols(), w.cols()],
                    got: w.shape().to_vec(),
                });
            }
            if let Some(b) = &self.biases[l] {
                if b.shape() != [1, w.cols()] {
                    return Err(KklError::ShapeMismatch {
                        context: format!("MLP layer {l} bias"),
                        expected: vec![1, w.cols()],
                        got: b.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Layer widths `[d_in, h_1, …, d_out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].rows()];
        d.extend(self.weights.iter().map(|w| w.cols()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].cols()
    }

    /// `(d_in, d_out)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.weights.iter().map(|w| (w.rows(), w.cols())).collect()
    }

    fn activates(&self, l: usize) -> bool {
        l + 1 < self.weights.len() || self.output_activation
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(KklError::ShapeMismatch {
                context: "MLP input".into(),
                expected: vec![x.shape().first().copied().unwrap_or(1), self.input_dim()],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Batched forward pass, one sample per row.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in 0..self.weights.len() {
            h = h.matmul(&self.weights[l])?;
            if let Some(b) = &self.biases[l] {
                h = h.add_row(b)?;
            }
            if self.activates(l) {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    /// Forward pass where sample `i` uses weights `W_l + s·a_{l,i}·b_{l,i}`
    /// on every layer. Biases are not modulated.
    pub fn forward_modulated(&self, x: &Tensor<S>, factors: &[LayerFactors<S>], scale: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        if factors.len() != self.weights.len() {
            return Err(KklError::Dimension(format!(
                "{} factor pairs for {} layers",
                factors.len(),
                self.weights.len()
            )));
        }
        let s = scale.item();
        let mut h = x.clone();
        for l in 0..self.weights.len() {
            let mut base = h.matmul(&self.weights[l])?;
            if let Some(b) = &self.biases[l] {
                base = base.add_row(b)?;
            }
            let delta = h.row_vec_mat(&factors[l].a)?.row_vec_mat(&factors[l].b)?.scale(s);
            h = base.add(&delta)?;
            if self.activates(l) {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    /// Adds the network to `g` with parameter leaves `{prefix}.w{l}` and
    /// `{prefix}.b{l}`; returns the output node.
    pub fn build(&self, g: &mut Graph<S>, prefix: &str, x: NodeId) -> NodeId {
        let mut h = x;
        for l in 0..self.weights.len() {
            let w = g.leaf(&weight_name(prefix, l));
            h = g.matmul(h, w);
            if self.biases[l].is_some() {
                let b = g.leaf(&bias_name(prefix, l));
                h = g.add_row(h, b);
            }
            if self.activates(l) {
                h = g.tanh(h);
            }
        }
        h
    }

    /// Graph counterpart of [`Mlp::forward_modulated`].
    pub fn build_modulated(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        x: NodeId,
        factors: &[FactorNodes],
        scale: NodeId,
    ) -> NodeId {
        assert_eq!(factors.len(), self.weights.len(), "one factor pair per layer");
        let mut h = x;
        for l in 0..self.weights.len() {
            let w = g.leaf(&weight_name(prefix, l));
            let mut base = g.matmul(h, w);
            if self.biases[l].is_some() {
                let b = g.leaf(&bias_name(prefix, l));
                base = g.add_row(base, b);
            }
            let xa = g.row_vec_mat(h, factors[l].a);
            let xab = g.row_vec_mat(xa, factors[l].b);
            let delta = g.mul_scalar(xab, scale);
            h = g.add(base, delta);
            if self.activates(l) {
                h = g.tanh(h);
            }
        }
        h
    }

    /// Parameters named as in [`Mlp::build`].
    pub fn params(&self, prefix: &str) -> ParamSet<S> {
        let mut p = ParamSet::new();
        for l in 0..self.weights.len() {
            p.push(weight_name(prefix, l), self.weights[l].clone());
            if let Some(b) = &self.biases[l] {
                p.push(bias_name(prefix, l), b.clone());
            }
        }
        p
    }

    /// Overwrites weights from `params` (names as in [`Mlp::params`]).
    pub fn load(&mut self, prefix: &str, params: &ParamSet<S>) -> Result<()> {
        for l in 0..self.weights.len() {
            let w = params.take(&weight_name(prefix, l))?;
            self.weights[l].check_same(&w, "load weight")?;
            self.weights[l] = w;
            if let Some(b) = &mut self.biases[l] {
                let nb = params.take(&bias_name(prefix, l))?;
                b.check_same(&nb, "load bias")?;
                *b = nb;
            }
        }
        Ok(())
    }
}
