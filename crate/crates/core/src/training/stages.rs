use super::dataset::{gather_rows, AutonomousDataset, ForcedDataset};
use super::objective::{
    decoder_objective, encoder_objective, hyper_objective, injection_objective, leaves, weight,
};
use super::trainer::{run_stage, strided_subset, MetricsSink, Stage, TrainSummary};
use super::TrainConfig;
use crate::diffcore::{Bindings, Graph, LrSchedule, ParamSet, Tensor};
use crate::dynamics::{InputKind, SystemKind};
use crate::error::{KklError, Result};
use crate::networks::{spectral_normalize, HyperNet, Injection, Mlp, SpectralState};
use crate::observer::{prefix, ModelBundle, ObserverMatrices, Variant};
use crate::rng::{self, streams};

/// Stage names reported in metrics and summaries.
pub mod stage {
    pub const ENCODER: &str = "encoder";
    pub const DECODER: &str = "decoder";
    pub const INJECTION: &str = "injection";
    pub const HYPER: &str = "hyper";
}

const CHUNK: usize = 4096;

fn no_post(_: &mut ParamSet<f64>) -> Result<()> {
    Ok(())
}

fn bind(pairs: Vec<(&str, Tensor<f64>)>) -> Bindings<f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// `T(x)` and `∂T/∂x · ẋ` for the rows of `x`, evaluated in chunks.
pub fn encoder_rates(encoder: &Mlp<f64>, x: &Tensor<f64>, x_dot: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut g = Graph::new();
    let xl = g.leaf(leaves::STATE);
    let xdl = g.leaf(leaves::STATE_RATE);
    let enc = encoder.build(&mut g, prefix::ENCODER, xl);
    let rate = g.push_jvp(enc, &[(xl, xdl)])?;
    let pb = encoder.params(prefix::ENCODER).to_bindings();
    let (n, nx, nz) = (x.rows(), x.cols(), encoder.output_dim());
    let mut z = Vec::with_capacity(n * nz);
    let mut zd = Vec::with_capacity(n * nz);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK) {
        let d = bind(vec![
            (leaves::STATE, gather_rows(x.data(), nx, chunk)),
            (leaves::STATE_RATE, gather_rows(x_dot.data(), nx, chunk)),
        ]);
        let exec = g.forward(&[&pb, &d], &[enc, rate])?;
        z.extend_from_slice(exec.value(enc).data());
        zd.extend_from_slice(exec.value(rate).data());
    }
    Ok((Tensor::matrix(n, nz, z)?, Tensor::matrix(n, nz, zd)?))
}

fn forward_chunked(net: &Mlp<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = x.rows();
    let mut out = Vec::with_capacity(n * net.output_dim());
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(CHUNK) {
        out.extend_from_slice(net.forward(&gather_rows(x.data(), x.cols(), chunk))?.data());
    }
    Tensor::matrix(n, net.output_dim(), out)
}

/// Phase 1: fits the encoder to the co-simulated latent targets with a
/// warmed-up PDE penalty, then fits the decoder to the encoder's own
/// images `T(x)`.
pub fn train_phase1(
    system: SystemKind,
    matrices: &ObserverMatrices,
    data: &AutonomousDataset,
    cfg: &TrainConfig,
    sink: MetricsSink<'_>,
) -> Result<(ModelBundle, TrainSummary)> {
    cfg.validate()?;
    // the batch cap only bounds the forced-data trainers
    let cfg = &TrainConfig {
        max_batches_per_epoch: None,
        ..cfg.clone()
    };
    let spec = system.spec();
    if data.n_x != spec.n_x || data.n_z != matrices.n_z || data.n_y != spec.n_y {
        return Err(KklError::Dimension("dataset does not match the system and matrices".into()));
    }
    let n = data.len();
    let mut init = rng::stream(cfg.seed, streams::INIT_PHASE1);
    let mut encoder = Mlp::new(&cfg.encoder_dims(system, matrices.n_z), true, &mut init);
    let mut decoder = Mlp::new(&cfg.decoder_dims(system, matrices.n_z), true, &mut init);
    let mut shuffle = rng::stream(cfg.seed, streams::SHUFFLE_PHASE1);
    let frozen = Bindings::new();
    let zero_u = vec![0.0; spec.n_u];
    let mut x_dot = Vec::with_capacity(n * spec.n_x);
    for i in 0..n {
        x_dot.extend(spec.eval_drift(data.sample(i).x, &zero_u)?);
    }
    let mut summary = TrainSummary::default();

    let obj = encoder_objective(&encoder, matrices);
    let mut params = encoder.params(prefix::ENCODER);
    let mut batch = |b: &[usize], epoch: usize| -> Result<Bindings<f64>> {
        let (x, z, y) = data.gather(b);
        Ok(bind(vec![
            (leaves::STATE, x),
            (leaves::STATE_RATE, gather_rows(&x_dot, spec.n_x, b)),
            (leaves::OUTPUT, y),
            (leaves::LATENT, z),
            (leaves::WEIGHT, weight(cfg.nu_at(epoch))),
        ]))
    };
    let st = Stage {
        name: stage::ENCODER,
        objective: &obj,
        frozen: &frozen,
        n_samples: n,
        epochs: cfg.epochs_encoder,
        lr0: cfg.lr_phase1,
        schedule: LrSchedule::plateau(cfg.plateau_factor, cfg.plateau_patience, cfg.lr_min),
        eval_epoch: cfg.nu_warmup,
    };
    summary
        .stages
        .push(run_stage(st, &mut params, cfg, &mut shuffle, &mut batch, &mut no_post, sink)?);
    encoder.load(prefix::ENCODER, &params)?;

    let x_all = Tensor::matrix(n, spec.n_x, data.x.clone())?;
    let z_star = forward_chunked(&encoder, &x_all)?;
    let obj = decoder_objective(&decoder);
    let mut params = decoder.params(prefix::DECODER);
    let mut batch = |b: &[usize], _: usize| -> Result<Bindings<f64>> {
        Ok(bind(vec![
            (leaves::LATENT, gather_rows(z_star.data(), matrices.n_z, b)),
            (leaves::STATE, gather_rows(&data.x, spec.n_x, b)),
        ]))
    };
    let mut spectral = SpectralState::default();
    let mut shape = decoder.clone();
    let mut normalise = |p: &mut ParamSet<f64>| -> Result<()> {
        if cfg.spectral_norm_decoder {
            shape.load(prefix::DECODER, p)?;
            *p = spectral_normalize(&shape, cfg.spectral_iterations, &mut spectral)?.params(prefix::DECODER);
        }
        Ok(())
    };
    normalise(&mut params)?;
    let st = Stage {
        name: stage::DECODER,
        objective: &obj,
        frozen: &frozen,
        n_samples: n,
        epochs: cfg.epochs_decoder,
        lr0: cfg.lr_phase1,
        schedule: LrSchedule::plateau(cfg.plateau_factor, cfg.plateau_patience, cfg.lr_min),
        eval_epoch: 0,
    };
    summary
        .stages
        .push(run_stage(st, &mut params, cfg, &mut shuffle, &mut batch, &mut normalise, sink)?);
    decoder.load(prefix::DECODER, &params)?;

    let bundle = ModelBundle::autonomous(system, encoder, decoder, matrices.clone(), cfg.window, cfg.dt)?;
    Ok((bundle, summary))
}

fn check_forced(base: &ModelBundle, data: &ForcedDataset) -> Result<()> {
    if base.variant != Variant::Autonomous {
        return Err(KklError::Config(format!(
            "input-conditioned training starts from an autonomous bundle, got {}",
            base.variant
        )));
    }
    if data.window != base.window || (data.dt - base.dt).abs() > 1e-12 * base.dt {
        return Err(KklError::Dimension(format!(
            "dataset window/step ({}, {}) differ from the bundle's ({}, {})",
            data.window, data.dt, base.window, base.dt
        )));
    }
    if data.n_x != base.n_x() || data.n_u != base.n_u() || data.n_y != base.matrices.n_y {
        return Err(KklError::Dimension("dataset does not match the bundle".into()));
    }
    if data.is_empty() {
        return Err(KklError::Config("forced dataset is empty".into()));
    }
    Ok(())
}

/// Trains the injection network `Φ` against the frozen encoder's latent
/// rates `∂T̄/∂x · f(x, u)`. The base maps are not modified.
pub fn train_obs(
    base: &ModelBundle,
    data: &ForcedDataset,
    cfg: &TrainConfig,
    sink: MetricsSink<'_>,
) -> Result<(ModelBundle, TrainSummary)> {
    cfg.validate()?;
    check_forced(base, data)?;
    let n = data.len();
    let nz = base.n_z();
    let all: Vec<usize> = (0..n).collect();
    let (z, z_dot) = encoder_rates(&base.encoder, &data.states(&all), &data.rates(&all))?;
    let y = data.outputs(&all);
    let mut injection = Injection::new(
        cfg.injection_dims(base.n_u(), nz),
        &mut rng::stream(cfg.seed, streams::INIT_OBS),
    );
    let obj = injection_objective(&injection, &base.matrices, base.window);
    let mut params = injection.params(prefix::INJECTION);
    let frozen = Bindings::new();
    let mut batch = |b: &[usize], _: usize| -> Result<Bindings<f64>> {
        Ok(bind(vec![
            (leaves::LATENT, gather_rows(z.data(), nz, b)),
            (leaves::LATENT_RATE, gather_rows(z_dot.data(), nz, b)),
            (leaves::OUTPUT, gather_rows(y.data(), data.n_y, b)),
            (leaves::WINDOW, data.windows(b, 0)),
        ]))
    };
    let st = Stage {
        name: stage::INJECTION,
        objective: &obj,
        frozen: &frozen,
        n_samples: n,
        epochs: cfg.epochs,
        lr0: cfg.lr,
        schedule: LrSchedule::cosine(cfg.lr, cfg.lr_min, cfg.epochs),
        eval_epoch: 0,
    };
    let mut shuffle = rng::stream(cfg.seed, streams::SHUFFLE_OBS);
    let mut s = run_stage(st, &mut params, cfg, &mut shuffle, &mut batch, &mut no_post, sink)?;
    s.extra.insert(
        "zero_injection_loss".into(),
        zero_injection_loss(&base.matrices, &z, &z_dot, &y, &strided_subset(n, 2048)),
    );
    injection.load(prefix::INJECTION, &params)?;
    let bundle = base.with_injection(injection)?;
    Ok((bundle, TrainSummary { stages: vec![s] }))
}

/// Mean `‖ż − A z − B y‖²` over `idx`: the injection loss with `Φ ≡ 0`.
fn zero_injection_loss(m: &ObserverMatrices, z: &Tensor<f64>, z_dot: &Tensor<f64>, y: &Tensor<f64>, idx: &[usize]) -> f64 {
    let mut lin = vec![0.0; m.n_z];
    let mut sum = 0.0;
    for &i in idx {
        m.rhs(z.row_slice(i), y.row_slice(i), &mut lin);
        sum += z_dot
            .row_slice(i)
            .iter()
            .zip(&lin)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    sum / idx.len().max(1) as f64
}

/// Trains the hypernetwork on round-trip reconstruction plus the
/// time-varying PDE residual. The base maps are frozen.
pub fn train_dyn(
    base: &ModelBundle,
    data: &ForcedDataset,
    cfg: &TrainConfig,
    sink: MetricsSink<'_>,
) -> Result<(ModelBundle, TrainSummary)> {
    cfg.validate()?;
    check_forced(base, data)?;
    let mut layers = base.encoder.layer_shapes();
    layers.extend(base.decoder.layer_shapes());
    let hyper = HyperNet::new(
        &cfg.hyper_dims(base.n_u(), layers),
        &mut rng::stream(cfg.seed, streams::INIT_DYN),
    );
    let mut bundle = base.with_hyper(hyper)?;
    let obj = hyper_objective(&bundle)?;
    let frozen = base.base_params().to_bindings();
    let mut params = bundle.conditioning_params();
    let inv_dt = 1.0 / data.dt;
    let mut batch = |b: &[usize], _: usize| -> Result<Bindings<f64>> {
        let w = data.windows(b, 0);
        let wd = data.windows(b, 1).sub(&w)?.scale(inv_dt);
        Ok(bind(vec![
            (leaves::STATE, data.states(b)),
            (leaves::STATE_RATE, data.rates(b)),
            (leaves::OUTPUT, data.outputs(b)),
            (leaves::WINDOW, w),
            (leaves::WINDOW_RATE, wd),
            (leaves::WEIGHT, weight(cfg.lambda_pde)),
        ]))
    };
    let st = Stage {
        name: stage::HYPER,
        objective: &obj,
        frozen: &frozen,
        n_samples: data.len(),
        epochs: cfg.epochs,
        lr0: cfg.lr,
        schedule: LrSchedule::cosine(cfg.lr, cfg.lr_min, cfg.epochs),
        eval_epoch: 0,
    };
    let mut shuffle = rng::stream(cfg.seed, streams::SHUFFLE_DYN);
    let s = run_stage(st, &mut params, cfg, &mut shuffle, &mut batch, &mut no_post, sink)?;
    if let Some(h) = &mut bundle.hyper {
        h.load(prefix::HYPER, &params)?;
    }
    Ok((bundle, TrainSummary { stages: vec![s] }))
}

/// Epochs of each curriculum stage: equal thirds, remainder to the last.
pub fn curriculum_epochs(total: usize) -> [usize; 3] {
    let third = total / 3;
    [third, third, total - 2 * third]
}

/// Name of a curriculum sub-stage, e.g. `curriculum_sinusoid_encoder`.
pub fn curriculum_stage(kind: InputKind, part: &str) -> String {
    format!("curriculum_{}_{part}", kind.as_str())
}

/// Fine-tunes the static maps on constant, then sinusoidal, then square
/// inputs. Each stage trains the encoder on `‖T(x) − T̄(x)‖²` plus the
/// forced PDE residual, then the decoder on `‖T*(T(x)) − x‖²`.
pub fn train_curriculum(
    base: &ModelBundle,
    data: &ForcedDataset,
    cfg: &TrainConfig,
    sink: MetricsSink<'_>,
) -> Result<(ModelBundle, TrainSummary)> {
    cfg.validate()?;
    check_forced(base, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let anchor = forward_chunked(&base.encoder, &data.states(&all))?;
    let nz = base.n_z();
    let mut encoder = base.encoder.clone();
    let mut decoder = base.decoder.clone();
    let frozen = Bindings::new();
    let mut shuffle = rng::stream(cfg.seed, streams::SHUFFLE_CURRICULUM);
    let mut summary = TrainSummary::default();
    for (kind, epochs) in InputKind::FORCED.into_iter().zip(curriculum_epochs(cfg.epochs)) {
        let idx = data.indices_of_kind(kind);
        if idx.is_empty() {
            return Err(KklError::Config(format!("no {} trajectories in the dataset", kind.as_str())));
        }
        let pick = |b: &[usize]| -> Vec<usize> { b.iter().map(|&p| idx[p]).collect() };

        let name = curriculum_stage(kind, stage::ENCODER);
        let obj = encoder_objective(&encoder, &base.matrices);
        let mut params = encoder.params(prefix::ENCODER);
        let mut batch = |b: &[usize], _: usize| -> Result<Bindings<f64>> {
            let s = pick(b);
            Ok(bind(vec![
                (leaves::STATE, data.states(&s)),
                (leaves::STATE_RATE, data.rates(&s)),
                (leaves::OUTPUT, data.outputs(&s)),
                (leaves::LATENT, gather_rows(anchor.data(), nz, &s)),
                (leaves::WEIGHT, weight(cfg.lambda_pde)),
            ]))
        };
        let st = Stage {
            name: &name,
            objective: &obj,
            frozen: &frozen,
            n_samples: idx.len(),
            epochs,
            lr0: cfg.lr,
            schedule: LrSchedule::cosine(cfg.lr, cfg.lr_min, epochs),
            eval_epoch: 0,
        };
        summary
            .stages
            .push(run_stage(st, &mut params, cfg, &mut shuffle, &mut batch, &mut no_post, sink)?);
        encoder.load(prefix::ENCODER, &params)?;

        let name = curriculum_stage(kind, stage::DECODER);
        let xs = data.states(&idx);
        let zs = forward_chunked(&encoder, &xs)?;
        let obj = decoder_objective(&decoder);
        let mut params = decoder.params(prefix::DECODER);
        let mut batch = |b: &[usize], _: usize| -> Result<Bindings<f64>> {
            Ok(bind(vec![
                (leaves::LATENT, gather_rows(zs.data(), nz, b)),
                (leaves::STATE, gather_rows(xs.data(), data.n_x, b)),
            ]))
        };
        let st = Stage {
            name: &name,
            objective: &obj,
            frozen: &frozen,
            n_samples: idx.len(),
            epochs,
            lr0: cfg.lr,
            schedule: LrSchedule::cosine(cfg.lr, cfg.lr_min, epochs),
            eval_epoch: 0,
        };
        summary
            .stages
            .push(run_stage(st, &mut params, cfg, &mut shuffle, &mut batch, &mut no_post, sink)?);
        decoder.load(prefix::DECODER, &params)?;
    }
    let bundle = base.with_curriculum(encoder, decoder)?;
    Ok((bundle, summary))
}
