//! Adam, global-norm clipping and learning-rate schedules.

use crate::error::{KklError, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: S) -> S {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<S>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamConfig<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamConfig<S> {
    pub fn with_lr(lr: S) -> Self {
        Self {
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
        }
    }
}

/// Adam optimizer state: one pair of moment accumulators per parameter.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig<S>,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig<S>, params: &[Tensor<S>]) -> Result<Self> {
        if !(config.lr > S::zero()) {
            return Err(KklError::Config("learning rate must be positive".into()));
        }
        let zeros: Vec<_> = params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Ok(Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> S {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: S) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(KklError::Dimension(format!(
                "adam: {} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config.clone();
        let t = self.step as i32;
        let bc1 = S::one() - beta1.powi(t);
        let bc2 = S::one() - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            p.check_same(g, "adam param/grad")?;
            p.check_same(m, "adam param/moment")?;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = beta1 * *mv + (S::one() - beta1) * gv;
                *vv = beta2 * *vv + (S::one() - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Epoch-level learning-rate schedule.
#[derive(Clone, Debug)]
pub enum LrSchedule<S> {
    Constant,
    /// `lr_min + (lr0 - lr_min) (1 + cos(pi e / E)) / 2`.
    Cosine { lr0: S, lr_min: S, epochs: usize },
    /// Multiply by `factor` once the monitored loss has failed to improve
    /// (relative threshold 1e-4) for more than `patience` epochs.
    Plateau {
        factor: S,
        patience: usize,
        min_lr: S,
        best: Option<S>,
        bad_epochs: usize,
    },
}

impl<S: Scalar> LrSchedule<S> {
    pub fn cosine(lr0: S, lr_min: S, epochs: usize) -> Self {
        Self::Cosine {
            lr0,
            lr_min,
            epochs,
        }
    }

    pub fn plateau(factor: S, patience: usize, min_lr: S) -> Self {
        Self::Plateau {
            factor,
            patience,
            min_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Cosine value at epoch `e`.
    pub fn cosine_at(lr0: S, lr_min: S, epochs: usize, e: usize) -> S {
        let frac = if epochs == 0 {
            S::one()
        } else {
            S::from_usize_(e.min(epochs)) / S::from_usize_(epochs)
        };
        lr_min + S::lit(0.5) * (lr0 - lr_min) * (S::one() + (S::PI() * frac).cos())
    }

    /// Advances the schedule after `epochs_done` completed epochs and
    /// returns the learning rate to use next.
    pub fn step(&mut self, current: S, epochs_done: usize, monitored: S) -> S {
        match self {
            LrSchedule::Constant => current,
            LrSchedule::Cosine {
                lr0,
                lr_min,
                epochs,
            } => Self::cosine_at(*lr0, *lr_min, *epochs, epochs_done),
            LrSchedule::Plateau {
                factor,
                patience,
                min_lr,
                best,
                bad_epochs,
            } => {
                let improved = match *best {
                    None => true,
                    Some(b) => monitored < b * (S::one() - S::lit(1e-4)),
                };
                if improved {
                    *best = Some(monitored);
                    *bad_epochs = 0;
                    current
                } else {
                    *bad_epochs += 1;
                    if *bad_epochs > *patience {
                        *bad_epochs = 0;
                        (current * *factor).max(*min_lr)
                    } else {
                        current
                    }
                }
            }
        }
    }
}
