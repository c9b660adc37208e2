use serde::{Deserialize, Serialize};

use crate::dynamics::{InputRanges, SystemKind};
use crate::error::{KklError, Result};
use crate::networks::{HyperDims, InjectionDims};

/// Training and data-generation settings. Every field has a desk-scale
/// default, so partial JSON documents deserialize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Initial conditions per dataset.
    pub n_traj: usize,
    /// Input signals per initial condition in the forced dataset.
    pub n_inp: usize,
    /// Simulation horizon in seconds.
    pub t_final: f64,
    pub dt: f64,
    /// Input window length in grid steps.
    pub window: usize,
    pub input_ranges: InputRanges,
    /// Encoder epochs in Phase 1.
    pub epochs_encoder: usize,
    /// Decoder epochs in Phase 1.
    pub epochs_decoder: usize,
    /// Epochs for the input-conditioned trainers and the curriculum.
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the mini-batches drawn per epoch by the forced-data trainers
    /// (injection, hypernetwork, curriculum); `None` uses the whole shuffled
    /// dataset. Phase 1 always makes full passes.
    pub max_batches_per_epoch: Option<usize>,
    pub lr_phase1: f64,
    pub lr: f64,
    /// Cap of the PDE weight during the Phase-1 warmup.
    pub nu_max: f64,
    /// Epochs of linear PDE-weight warmup.
    pub nu_warmup: usize,
    /// PDE weight for the hypernetwork and curriculum losses.
    pub lambda_pde: f64,
    pub grad_clip: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub lr_min: f64,
    /// Hidden width of the encoder and decoder; `None` picks the
    /// per-system default.
    pub hidden: Option<usize>,
    pub hidden_layers: usize,
    pub injection: InjectionConfig,
    pub hyper: HyperConfig,
    pub spectral_norm_decoder: bool,
    pub spectral_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub gru_hidden: usize,
    pub context: usize,
    pub phi_hidden: usize,
    pub phi_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub gru_hidden: usize,
    pub embedding: usize,
    pub backbone: usize,
    pub rank: usize,
    pub scale_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_traj: 20,
            n_inp: 15,
            t_final: 50.0,
            dt: 0.05,
            window: 100,
            input_ranges: InputRanges::default(),
            epochs_encoder: 200,
            epochs_decoder: 200,
            epochs: 100,
            batch_size: 256,
            max_batches_per_epoch: None,
            lr_phase1: 1e-3,
            lr: 1e-4,
            nu_max: 0.1,
            nu_warmup: 5,
            lambda_pde: 1.0,
            grad_clip: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 10,
            lr_min: 1e-6,
            hidden: None,
            hidden_layers: 3,
            injection: InjectionConfig::default(),
            hyper: HyperConfig::default(),
            spectral_norm_decoder: false,
            spectral_iterations: 30,
        }
    }
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            gru_hidden: 32,
            context: 16,
            phi_hidden: 64,
            phi_layers: 2,
        }
    }
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            gru_hidden: 64,
            embedding: 16,
            backbone: 128,
            rank: 4,
            scale_init: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_traj", self.n_traj),
            ("n_inp", self.n_inp),
            ("window", self.window),
            ("batch_size", self.batch_size),
            ("hidden_layers", self.hidden_layers),
            ("injection.gru_hidden", self.injection.gru_hidden),
            ("injection.context", self.injection.context),
            ("injection.phi_hidden", self.injection.phi_hidden),
            ("hyper.gru_hidden", self.hyper.gru_hidden),
            ("hyper.embedding", self.hyper.embedding),
            ("hyper.backbone", self.hyper.backbone),
            ("hyper.rank", self.hyper.rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(KklError::Config(format!("{name} must be positive")));
            }
        }
        if self.max_batches_per_epoch == Some(0) || self.hidden == Some(0) {
            return Err(KklError::Config("batch cap and hidden width must be positive".into()));
        }
        let reals = [
            ("t_final", self.t_final),
            ("dt", self.dt),
            ("lr_phase1", self.lr_phase1),
            ("lr", self.lr),
            ("grad_clip", self.grad_clip),
            ("plateau_factor", self.plateau_factor),
            ("lr_min", self.lr_min),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(KklError::Config(format!("{name} must be positive and finite")));
            }
        }
        for (name, v) in [("nu_max", self.nu_max), ("lambda_pde", self.lambda_pde)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(KklError::Config(format!("{name} must be non-negative")));
            }
        }
        if self.spectral_norm_decoder && self.spectral_iterations == 0 {
            return Err(KklError::Config("spectral_iterations must be positive".into()));
        }
        crate::dynamics::grid_steps(self.t_final, self.dt)?;
        Ok(())
    }

    /// Encoder/decoder width: the configured value or 150 for the planar
    /// benchmarks and 350 for Rössler and FitzHugh–Nagumo.
    pub fn hidden_width(&self, system: SystemKind) -> usize {
        self.hidden.unwrap_or(match system {
            SystemKind::Rossler | SystemKind::FitzHughNagumo => 350,
            _ => 150,
        })
    }

    /// Encoder layer widths `n_x → hidden… → n_z`.
    pub fn encoder_dims(&self, system: SystemKind, n_z: usize) -> Vec<usize> {
        let spec = system.spec();
        let mut d = vec![spec.n_x];
        d.extend(std::iter::repeat_n(self.hidden_width(system), self.hidden_layers));
        d.push(n_z);
        d
    }

    /// Decoder layer widths `n_z → hidden… → n_x`.
    pub fn decoder_dims(&self, system: SystemKind, n_z: usize) -> Vec<usize> {
        let mut d = self.encoder_dims(system, n_z);
        d.reverse();
        d
    }

    pub fn injection_dims(&self, n_u: usize, n_z: usize) -> InjectionDims {
        InjectionDims {
            n_u,
            n_z,
            gru_hidden: self.injection.gru_hidden,
            context: self.injection.context,
            phi_hidden: self.injection.phi_hidden,
            phi_layers: self.injection.phi_layers,
        }
    }

    pub fn hyper_dims(&self, n_u: usize, layers: Vec<(usize, usize)>) -> HyperDims {
        HyperDims {
            n_u,
            gru_hidden: self.hyper.gru_hidden,
            embedding: self.hyper.embedding,
            backbone: self.hyper.backbone,
            rank: self.hyper.rank,
            scale_init: self.hyper.scale_init,
            layers,
        }
    }

    /// PDE weight in Phase-1 epoch `epoch` (counted from 0):
    /// `ν_max · min(1, epoch / warmup)`.
    pub fn nu_at(&self, epoch: usize) -> f64 {
        if self.nu_warmup == 0 {
            return self.nu_max;
        }
        self.nu_max * (epoch as f64 / self.nu_warmup as f64).min(1.0)
    }
}
