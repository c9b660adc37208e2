use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::objective::Objective;
use super::TrainConfig;
use crate::diffcore::{clip_global_norm, Adam, AdamConfig, Bindings, LrSchedule, ParamSet};
use crate::error::{KklError, Result};
use crate::rng::RunRng;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    /// Sample-weighted mean loss over the epoch's mini-batches.
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Largest pre-clip gradient norm of the epoch.
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// Loss on a fixed evaluation subset before and after one stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub epochs: usize,
    pub samples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Stage-specific diagnostics, e.g. the zero-injection baseline.
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stages: Vec<StageSummary>,
}

impl TrainSummary {
    pub fn stage(&self, name: &str) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Receives one [`EpochMetrics`] per completed epoch.
pub type MetricsSink<'a> = &'a mut dyn FnMut(&EpochMetrics);

/// Samples used for the before/after loss of a stage.
const EVAL_SAMPLES: usize = 2048;

/// Evenly strided subset of `0..n` with at most `max` entries.
pub fn strided_subset(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

pub(crate) fn divergence(stage: &str, epoch: usize, e: KklError) -> KklError {
    match e {
        KklError::NonFinite(what) => {
            KklError::Divergence(format!("{stage}, epoch {epoch}: non-finite value in {what}"))
        }
        other => other,
    }
}

/// Builds the data bindings of a mini-batch from sample positions and the
/// epoch index.
pub(crate) type BatchData<'a> = dyn FnMut(&[usize], usize) -> Result<Bindings<f64>> + 'a;
/// Runs after every optimiser step, e.g. to re-normalise weights.
pub(crate) type PostStep<'a> = dyn FnMut(&mut ParamSet<f64>) -> Result<()> + 'a;

/// One optimisation stage.
pub(crate) struct Stage<'a> {
    pub name: &'a str,
    pub objective: &'a Objective,
    pub frozen: &'a Bindings<f64>,
    pub n_samples: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub schedule: LrSchedule<f64>,
    /// Epoch index handed to the data closure for the before/after
    /// evaluation.
    pub eval_epoch: usize,
}

/// Mean loss over `idx` in batches, weighted by batch size.
fn eval_loss(
    st: &Stage<'_>,
    params: &ParamSet<f64>,
    data: &mut BatchData<'_>,
    idx: &[usize],
    batch: usize,
) -> Result<f64> {
    let pb = params.to_bindings();
    let mut sum = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let d = data(chunk, st.eval_epoch)?;
        let (loss, _) = st
            .objective
            .value(&[st.frozen, &pb, &d])
            .map_err(|e| divergence(st.name, st.eval_epoch, e))?;
        sum += loss * chunk.len() as f64;
    }
    Ok(sum / idx.len().max(1) as f64)
}

/// Mini-batch Adam over `params` with global-norm clipping and an
/// epoch-level schedule. Non-finite losses or gradients abort with
/// [`KklError::Divergence`].
pub(crate) fn run_stage(
    st: Stage<'_>,
    params: &mut ParamSet<f64>,
    cfg: &TrainConfig,
    rng: &mut RunRng,
    data: &mut BatchData<'_>,
    post_step: &mut PostStep<'_>,
    sink: MetricsSink<'_>,
) -> Result<StageSummary> {
    if st.n_samples == 0 {
        return Err(KklError::Config(format!("stage {} has no samples", st.name)));
    }
    let names: Vec<String> = params.names().to_vec();
    let eval_idx = strided_subset(st.n_samples, EVAL_SAMPLES);
    let initial_loss = eval_loss(&st, params, data, &eval_idx, cfg.batch_size)?;
    let mut adam = Adam::new(AdamConfig::with_lr(st.lr0), params.tensors())?;
    let mut schedule = st.schedule.clone();
    let mut lr = st.lr0;
    let mut order: Vec<usize> = (0..st.n_samples).collect();
    for epoch in 0..st.epochs {
        let started = Instant::now();
        order.shuffle(rng);
        let cap = cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
        let mut seen = 0usize;
        let mut loss_sum = 0.0;
        let mut term_sums = vec![0.0; st.objective.terms.len()];
        let mut grad_norm: f64 = 0.0;
        for batch in order.chunks(cfg.batch_size).take(cap) {
            let d = data(batch, epoch)?;
            let pb = params.to_bindings();
            let mut ev = st
                .objective
                .evaluate(&[st.frozen, &pb, &d], &names)
                .map_err(|e| divergence(st.name, epoch, e))?;
            if !ev.loss.is_finite() {
                return Err(KklError::Divergence(format!("{}, epoch {epoch}: loss {}", st.name, ev.loss)));
            }
            let norm = clip_global_norm(&mut ev.gradients, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(KklError::Divergence(format!(
                    "{}, epoch {epoch}: gradient norm {norm}",
                    st.name
                )));
            }
            grad_norm = grad_norm.max(norm);
            adam.step(params.tensors_mut(), &ev.gradients)?;
            post_step(params)?;
            let w = batch.len() as f64;
            loss_sum += ev.loss * w;
            for (s, t) in term_sums.iter_mut().zip(&ev.terms) {
                *s += t * w;
            }
            seen += batch.len();
        }
        let n = seen.max(1) as f64;
        let loss = loss_sum / n;
        let terms = st
            .objective
            .terms
            .iter()
            .zip(&term_sums)
            .map(|((name, _), s)| (name.clone(), s / n))
            .collect();
        sink(&EpochMetrics {
            stage: st.name.to_string(),
            epoch,
            loss,
            terms,
            lr,
            grad_norm,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        lr = schedule.step(lr, epoch + 1, loss);
        adam.set_lr(lr);
    }
    let final_loss = eval_loss(&st, params, data, &eval_idx, cfg.batch_size)?;
    Ok(StageSummary {
        stage: st.name.to_string(),
        epochs: st.epochs,
        samples: st.n_samples,
        initial_loss,
        final_loss,
        extra: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_subset_is_even_and_bounded() {
        assert_eq!(strided_subset(5, 10), vec![0, 1, 2, 3, 4]);
        let s = strided_subset(100, 4);
        assert_eq!(s, vec![0, 25, 50, 75]);
    }

    #[test]
    fn non_finite_maps_to_divergence() {
        let e = divergence("enc", 3, KklError::NonFinite("tanh".into()));
        assert!(matches!(e, KklError::Divergence(m) if m.contains("epoch 3")));
        assert_eq!(divergence("enc", 0, KklError::EmptyGrid), KklError::EmptyGrid);
    }
}
