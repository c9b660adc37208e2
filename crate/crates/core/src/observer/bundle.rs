use serde::{Deserialize, Serialize};

use super::ObserverMatrices;
use crate::diffcore::{Graph, NodeId, ParamSet, Tensor};
use crate::dynamics::SystemKind;
use crate::error::{KklError, Result};
use crate::networks::{HyperNet, Injection, Mlp};

/// Parameter-name prefixes used by [`ModelBundle::params`] and the graph
/// builders.
pub mod prefix {
    pub const ENCODER: &str = "enc";
    pub const DECODER: &str = "dec";
    pub const INJECTION: &str = "inj";
    pub const HYPER: &str = "hyp";
}

/// Observer variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Static maps, `ż = A z + B y`.
    Autonomous,
    /// Static maps plus a learned input-injection term in the latent ODE.
    Obs,
    /// Maps modulated by hypernetwork-generated low-rank deltas.
    Dyn,
    /// Static maps fine-tuned on forced data.
    Curriculum,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Autonomous, Variant::Obs, Variant::Dyn, Variant::Curriculum];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Autonomous => "autonomous",
            Variant::Obs => "obs",
            Variant::Dyn => "dyn",
            Variant::Curriculum => "curriculum",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == name)
            .ok_or_else(|| KklError::Config(format!("unknown variant '{name}'")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything needed to run one observer variant.
///
/// The hypernetwork, when present, modulates the encoder layers first and
/// then the decoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub variant: Variant,
    pub system: SystemKind,
    pub encoder: Mlp<f64>,
    pub decoder: Mlp<f64>,
    pub injection: Option<Injection<f64>>,
    pub hyper: Option<HyperNet<f64>>,
    pub matrices: ObserverMatrices,
    /// Input window length in grid steps.
    pub window: usize,
    pub dt: f64,
}

impl ModelBundle {
    /// Bundle with static maps only.
    pub fn autonomous(
        system: SystemKind,
        encoder: Mlp<f64>,
        decoder: Mlp<f64>,
        matrices: ObserverMatrices,
        window: usize,
        dt: f64,
    ) -> Result<Self> {
        let b = Self {
            variant: Variant::Autonomous,
            system,
            encoder,
            decoder,
            injection: None,
            hyper: None,
            matrices,
            window,
            dt,
        };
        b.validate()?;
        Ok(b)
    }

    /// Same base maps with an injection network attached.
    pub fn with_injection(&self, injection: Injection<f64>) -> Result<Self> {
        let b = Self {
            variant: Variant::Obs,
            injection: Some(injection),
            hyper: None,
            ..self.clone()
        };
        b.validate()?;
        Ok(b)
    }

    /// Same base maps with a hypernetwork attached.
    pub fn with_hyper(&self, hyper: HyperNet<f64>) -> Result<Self> {
        let b = Self {
            variant: Variant::Dyn,
            injection: None,
            hyper: Some(hyper),
            ..self.clone()
        };
        b.validate()?;
        Ok(b)
    }

    /// Fine-tuned static maps.
    pub fn with_curriculum(&self, encoder: Mlp<f64>, decoder: Mlp<f64>) -> Result<Self> {
        let b = Self {
            variant: Variant::Curriculum,
            encoder,
            decoder,
            injection: None,
            hyper: None,
            ..self.clone()
        };
        b.validate()?;
        Ok(b)
    }

    pub fn n_x(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn n_z(&self) -> usize {
        self.matrices.n_z
    }

    pub fn n_u(&self) -> usize {
        self.system.spec().n_u
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.matrices.validate()?;
        let spec = self.system.spec();
        let (n_x, n_z) = (spec.n_x, self.matrices.n_z);
        if self.encoder.input_dim() != n_x || self.encoder.output_dim() != n_z {
            return Err(KklError::Dimension(format!(
                "encoder maps {}→{}, expected {n_x}→{n_z}",
                self.encoder.input_dim(),
                self.encoder.output_dim()
            )));
        }
        if self.decoder.input_dim() != n_z || self.decoder.output_dim() != n_x {
            return Err(KklError::Dimension(format!(
                "decoder maps {}→{}, expected {n_z}→{n_x}",
                self.decoder.input_dim(),
                self.decoder.output_dim()
            )));
        }
        if self.matrices.n_y != spec.n_y {
            return Err(KklError::Dimension(format!(
                "B has {} columns for {} outputs",
                self.matrices.n_y, spec.n_y
            )));
        }
        if self.window == 0 || !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(KklError::Config("window must be >= 1 step and dt > 0".into()));
        }
        let expects_inj = self.variant == Variant::Obs;
        let expects_hyp = self.variant == Variant::Dyn;
        if self.injection.is_some() != expects_inj || self.hyper.is_some() != expects_hyp {
            return Err(KklError::Config(format!(
                "variant {} does not match the attached networks",
                self.variant
            )));
        }
        if let Some(inj) = &self.injection {
            if inj.n_z() != n_z || inj.gru.input_dim() != spec.n_u {
                return Err(KklError::Dimension("injection network does not fit the system".into()));
            }
        }
        if let Some(h) = &self.hyper {
            let mut shapes = self.encoder.layer_shapes();
            shapes.extend(self.decoder.layer_shapes());
            if h.layers != shapes || h.gru.input_dim() != spec.n_u {
                return Err(KklError::Dimension(
                    "hypernetwork heads do not match the encoder and decoder layers".into(),
                ));
            }
        }
        Ok(())
    }

    fn encoder_layers(&self) -> std::ops::Range<usize> {
        0..self.encoder.num_layers()
    }

    fn decoder_layers(&self) -> std::ops::Range<usize> {
        let n = self.encoder.num_layers();
        n..n + self.decoder.num_layers()
    }

    /// `T̂(x)`, one state per row. For the modulated variant `windows`
    /// supplies one window per row; `None` means the static maps.
    pub fn encode(&self, x: &Tensor<f64>, windows: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
        match (&self.hyper, windows) {
            (Some(h), Some(w)) => {
                let ctx = h.gru.encode(w)?;
                self.encoder
                    .forward_modulated(x, &h.factors_for(&ctx, self.encoder_layers())?, &h.scale)
            }
            _ => self.encoder.forward(x),
        }
    }

    /// `T̂*(z)`, one latent state per row; see [`ModelBundle::encode`].
    pub fn decode(&self, z: &Tensor<f64>, windows: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
        match (&self.hyper, windows) {
            (Some(h), Some(w)) => {
                let ctx = h.gru.encode(w)?;
                self.decode_with_context(z, &ctx)
            }
            _ => self.decoder.forward(z),
        }
    }

    /// Modulated decode from precomputed GRU summaries.
    pub(crate) fn decode_with_context(&self, z: &Tensor<f64>, ctx: &Tensor<f64>) -> Result<Tensor<f64>> {
        let h = self
            .hyper
            .as_ref()
            .ok_or_else(|| KklError::Config("bundle has no hypernetwork".into()))?;
        self.decoder
            .forward_modulated(z, &h.factors_for(ctx, self.decoder_layers())?, &h.scale)
    }

    /// Graph node for the hypernetwork's window summary, if present.
    pub fn build_context(&self, g: &mut Graph<f64>, windows: NodeId) -> Option<NodeId> {
        self.hyper
            .as_ref()
            .map(|h| h.build_context(g, prefix::HYPER, windows, self.window))
    }

    /// Graph node for the encoder; modulated when `ctx` is given.
    pub fn build_encoder(&self, g: &mut Graph<f64>, x: NodeId, ctx: Option<NodeId>) -> NodeId {
        match (&self.hyper, ctx) {
            (Some(h), Some(c)) => {
                let (f, s) = h.build_factors_for(g, prefix::HYPER, c, self.encoder_layers());
                self.encoder.build_modulated(g, prefix::ENCODER, x, &f, s)
            }
            _ => self.encoder.build(g, prefix::ENCODER, x),
        }
    }

    /// Graph node for the decoder; modulated when `ctx` is given.
    pub fn build_decoder(&self, g: &mut Graph<f64>, z: NodeId, ctx: Option<NodeId>) -> NodeId {
        match (&self.hyper, ctx) {
            (Some(h), Some(c)) => {
                let (f, s) = h.build_factors_for(g, prefix::HYPER, c, self.decoder_layers());
                self.decoder.build_modulated(g, prefix::DECODER, z, &f, s)
            }
            _ => self.decoder.build(g, prefix::DECODER, z),
        }
    }

    pub fn base_params(&self) -> ParamSet<f64> {
        let mut p = self.encoder.params(prefix::ENCODER);
        p.extend(self.decoder.params(prefix::DECODER));
        p
    }

    /// Parameters of the attached injection network or hypernetwork.
    pub fn conditioning_params(&self) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        if let Some(i) = &self.injection {
            p.extend(i.params(prefix::INJECTION));
        }
        if let Some(h) = &self.hyper {
            p.extend(h.params(prefix::HYPER));
        }
        p
    }

    /// All parameters.
    pub fn params(&self) -> ParamSet<f64> {
        let mut p = self.base_params();
        p.extend(self.conditioning_params());
        p
    }

    /// Overwrites every parameter from `params`, checking shapes.
    pub fn load(&mut self, params: &ParamSet<f64>) -> Result<()> {
        self.encoder.load(prefix::ENCODER, params)?;
        self.decoder.load(prefix::DECODER, params)?;
        if let Some(i) = &mut self.injection {
            i.load(prefix::INJECTION, params)?;
        }
        if let Some(h) = &mut self.hyper {
            h.load(prefix::HYPER, params)?;
        }
        Ok(())
    }
}
