use std::collections::HashMap;

use kkl_core::Tensor;
use kkl_core::diffcore::Bindings;
use kkl_core::dynamics::{InputKind, SystemKind, SystemSpec};
use kkl_core::networks::{HyperDims, HyperNet, Injection, Mlp};
use kkl_core::observer::{build_matrices, input_windows, prefix, ModelBundle, ObserverMatrices};
use kkl_core::rng::{self, streams};
use kkl_core::training::{
    build_autonomous_dataset, build_forced_dataset, burn_steps, decoder_objective, encoder_objective, encoder_rates,
    hyper_objective, injection_objective, leaves, sample_box, train_curriculum, train_dyn, train_obs, train_phase1,
    weight, EpochMetrics, ForcedDataset, InjectionConfig, HyperConfig, Objective, TrainConfig,
};
use kkl_core::KklError;
use rand::Rng;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        seed: 7,
        n_traj: 2,
        n_inp: 3,
        t_final: 12.0,
        dt: 0.05,
        window: 5,
        epochs_encoder: 3,
        epochs_decoder: 3,
        epochs: 3,
        batch_size: 32,
        max_batches_per_epoch: Some(4),
        hidden: Some(8),
        hidden_layers: 2,
        injection: InjectionConfig {
            gru_hidden: 4,
            context: 3,
            phi_hidden: 8,
            phi_layers: 1,
        },
        hyper: HyperConfig {
            gru_hidden: 4,
            embedding: 3,
            backbone: 8,
            rank: 2,
            scale_init: 0.1,
        },
        ..TrainConfig::default()
    }
}

fn matrices() -> ObserverMatrices {
    build_matrices(2, 1).unwrap()
}

fn random(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn bind(pairs: Vec<(&str, Tensor)>) -> Bindings<f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Central differences on a few entries of every trainable tensor.
fn check_gradients(obj: &Objective, params: &Bindings<f64>, data: &Bindings<f64>, frozen: &Bindings<f64>) {
    let mut names: Vec<String> = params.keys().cloned().collect();
    names.sort();
    let ev = obj.evaluate(&[frozen, params, data], &names).unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for (name, grad) in names.iter().zip(&ev.gradients) {
        let n = grad.numel();
        for k in [0, n / 2, n - 1] {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[k] += h;
            let (up, _) = obj.value(&[frozen, &p, data]).unwrap();
            p.get_mut(name).unwrap().data_mut()[k] -= 2.0 * h;
            let (down, _) = obj.value(&[frozen, &p, data]).unwrap();
            let fd = (up - down) / (2.0 * h);
            let an = grad.data()[k];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                "{name}[{k}]: analytic {an}, finite difference {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

fn static_bundle(seed: u64) -> ModelBundle {
    let cfg = tiny_config();
    let mut r = rng::from_seed(seed);
    let enc = Mlp::new(&cfg.encoder_dims(SystemKind::Duffing, 5), true, &mut r);
    let dec = Mlp::new(&cfg.decoder_dims(SystemKind::Duffing, 5), true, &mut r);
    ModelBundle::autonomous(SystemKind::Duffing, enc, dec, matrices(), cfg.window, cfg.dt).unwrap()
}

fn hyper_bundle(base: &ModelBundle, seed: u64) -> ModelBundle {
    let cfg = tiny_config();
    let mut layers = base.encoder.layer_shapes();
    layers.extend(base.decoder.layer_shapes());
    let dims: HyperDims = cfg.hyper_dims(1, layers);
    base.with_hyper(HyperNet::new(&dims, &mut rng::from_seed(seed))).unwrap()
}

/// Hand-rolled fixed-step RK4 for `ẋ = f(x, 0)`, `ż = A z + B x₁`.
fn reference_cosim(spec: &SystemSpec, m: &ObserverMatrices, x0: &[f64], steps: usize, dt: f64, sub: usize) -> Vec<Vec<f64>> {
    let nx = spec.n_x;
    let f = |s: &[f64]| -> Vec<f64> {
        let mut d = spec.eval_drift(&s[..nx], &[0.0]).unwrap();
        let y = spec.eval_output(&s[..nx]).unwrap();
        let z = &s[nx..];
        for i in 0..m.n_z {
            let mut v = m.b[i] * y[0];
            for j in 0..m.n_z {
                v += m.a[i * m.n_z + j] * z[j];
            }
            d.push(v);
        }
        d
    };
    let h = dt / sub as f64;
    let mut s: Vec<f64> = x0.to_vec();
    s.resize(nx + m.n_z, 0.0);
    let mut out = vec![s.clone()];
    let axpy = |a: &[f64], k: &[f64], c: f64| -> Vec<f64> { a.iter().zip(k).map(|(x, y)| x + c * y).collect() };
    for _ in 0..steps {
        for _ in 0..sub {
            let k1 = f(&s);
            let k2 = f(&axpy(&s, &k1, h / 2.0));
            let k3 = f(&axpy(&s, &k2, h / 2.0));
            let k4 = f(&axpy(&s, &k3, h));
            for i in 0..s.len() {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(s.clone());
    }
    out
}

#[test]
fn autonomous_dataset_matches_reference_cosimulation() {
    let cfg = tiny_config();
    let spec = SystemSpec::duffing();
    let m = matrices();
    let data = build_autonomous_dataset(&spec, &m, &cfg).unwrap();
    let n_steps = 240;
    let burn = burn_steps(1.0, cfg.dt);
    assert_eq!(burn, 185);
    assert_eq!(data.burn_steps, burn);
    assert_eq!(data.per_trajectory, n_steps - burn);
    assert_eq!(data.len(), cfg.n_traj * (n_steps - burn));

    let mut ics = rng::stream(cfg.seed, streams::AUTONOMOUS_ICS);
    for j in 0..cfg.n_traj {
        let x0 = sample_box(&spec.ic_box, &mut ics);
        let reference = reference_cosim(&spec, &m, &x0, n_steps - 1, cfg.dt, 20);
        for k in burn..n_steps {
            let s = data.sample(j * data.per_trajectory + k - burn);
            let r = &reference[k];
            for i in 0..2 {
                assert!((s.x[i] - r[i]).abs() < 1e-6, "x mismatch at traj {j}, k {k}");
            }
            for i in 0..5 {
                assert!((s.z[i] - r[2 + i]).abs() < 1e-6, "z mismatch at traj {j}, k {k}");
            }
            assert_eq!(s.y, &[s.x[0]]);
        }
    }
}

#[test]
fn autonomous_dataset_rejects_short_horizons_and_bad_matrices() {
    let spec = SystemSpec::duffing();
    let mut cfg = tiny_config();
    cfg.t_final = 5.0;
    assert!(matches!(
        build_autonomous_dataset(&spec, &matrices(), &cfg),
        Err(KklError::Config(_))
    ));
    let cfg = tiny_config();
    let mut m = matrices();
    m.a[0] = 1.0;
    assert!(matches!(build_autonomous_dataset(&spec, &m, &cfg), Err(KklError::Config(_))));
}

fn forced() -> (TrainConfig, ForcedDataset) {
    let mut cfg = tiny_config();
    cfg.t_final = 3.0;
    let data = build_forced_dataset(&SystemSpec::duffing(), &cfg).unwrap();
    (cfg, data)
}

#[test]
fn forced_dataset_layout() {
    let (cfg, data) = forced();
    let spec = SystemSpec::duffing();
    let n_steps = 60;
    assert_eq!(data.trajectories.len(), cfg.n_traj * cfg.n_inp);
    assert_eq!(data.len(), cfg.n_traj * cfg.n_inp * (n_steps - cfg.window));
    for kind in InputKind::FORCED {
        assert_eq!(data.indices_of_kind(kind).len(), cfg.n_traj * (n_steps - cfg.window));
    }
    let idx: Vec<usize> = (0..data.len()).step_by(7).collect();
    let b = data.batch(&idx);
    for (row, &i) in idx.iter().enumerate() {
        let (j, k) = data.index[i];
        let tr = &data.trajectories[j];
        assert!(k >= cfg.window && k + 1 < tr.len());
        assert_eq!(b.x.row_slice(row), tr.state(k));
        assert_eq!(b.u.row_slice(row), tr.input(k));
        let fx = spec.eval_drift(tr.state(k), tr.input(k)).unwrap();
        assert_eq!(b.x_dot.row_slice(row), &fx[..]);
        let w = b.windows.row_slice(row);
        let wn = b.next_windows.row_slice(row);
        // the next window drops the oldest sample and appends u_{k+1}
        assert_eq!(&wn[..cfg.window - 1], &w[1..]);
        assert_eq!(wn[cfg.window - 1], tr.input(k + 1)[0]);
        assert_eq!(w[cfg.window - 1], tr.input(k)[0]);
        let s = data.sample(i);
        assert_eq!(s.window, w);
        assert_eq!(s.window_next, wn);
    }
}

#[test]
fn forced_dataset_is_deterministic() {
    let (_, a) = forced();
    let (_, b) = forced();
    assert_eq!(a, b);
}

#[test]
fn encoder_objective_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut r = rng::from_seed(1);
    let enc = Mlp::new(&cfg.encoder_dims(SystemKind::Duffing, 5), true, &mut r);
    let obj = encoder_objective(&enc, &matrices());
    let data = bind(vec![
        (leaves::STATE, random(&mut r, 6, 2, 1.0)),
        (leaves::STATE_RATE, random(&mut r, 6, 2, 1.0)),
        (leaves::OUTPUT, random(&mut r, 6, 1, 1.0)),
        (leaves::LATENT, random(&mut r, 6, 5, 1.0)),
        (leaves::WEIGHT, weight(0.3)),
    ]);
    check_gradients(&obj, &enc.params(prefix::ENCODER).to_bindings(), &data, &HashMap::new());
}

#[test]
fn decoder_objective_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut r = rng::from_seed(2);
    let dec = Mlp::new(&cfg.decoder_dims(SystemKind::Duffing, 5), true, &mut r);
    let obj = decoder_objective(&dec);
    let data = bind(vec![
        (leaves::LATENT, random(&mut r, 6, 5, 1.0)),
        (leaves::STATE, random(&mut r, 6, 2, 1.0)),
    ]);
    check_gradients(&obj, &dec.params(prefix::DECODER).to_bindings(), &data, &HashMap::new());
}

#[test]
fn injection_objective_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut r = rng::from_seed(3);
    let inj = Injection::new(cfg.injection_dims(1, 5), &mut r);
    let obj = injection_objective(&inj, &matrices(), cfg.window);
    let data = bind(vec![
        (leaves::LATENT, random(&mut r, 6, 5, 1.0)),
        (leaves::LATENT_RATE, random(&mut r, 6, 5, 1.0)),
        (leaves::OUTPUT, random(&mut r, 6, 1, 1.0)),
        (leaves::WINDOW, random(&mut r, 6, cfg.window, 1.0)),
    ]);
    check_gradients(&obj, &inj.params(prefix::INJECTION).to_bindings(), &data, &HashMap::new());
}

#[test]
fn hyper_objective_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let base = static_bundle(4);
    let bundle = hyper_bundle(&base, 5);
    let obj = hyper_objective(&bundle).unwrap();
    let mut r = rng::from_seed(6);
    let data = bind(vec![
        (leaves::STATE, random(&mut r, 5, 2, 1.0)),
        (leaves::STATE_RATE, random(&mut r, 5, 2, 1.0)),
        (leaves::OUTPUT, random(&mut r, 5, 1, 1.0)),
        (leaves::WINDOW, random(&mut r, 5, cfg.window, 1.0)),
        (leaves::WINDOW_RATE, random(&mut r, 5, cfg.window, 1.0)),
        (leaves::WEIGHT, weight(0.7)),
    ]);
    check_gradients(
        &obj,
        &bundle.conditioning_params().to_bindings(),
        &data,
        &base.base_params().to_bindings(),
    );
}

#[test]
fn zero_pde_weight_leaves_only_the_fit_term() {
    let cfg = tiny_config();
    let mut r = rng::from_seed(8);
    let enc = Mlp::new(&cfg.encoder_dims(SystemKind::Duffing, 5), true, &mut r);
    let obj = encoder_objective(&enc, &matrices());
    let mut data = bind(vec![
        (leaves::STATE, random(&mut r, 6, 2, 1.0)),
        (leaves::STATE_RATE, random(&mut r, 6, 2, 1.0)),
        (leaves::OUTPUT, random(&mut r, 6, 1, 1.0)),
        (leaves::LATENT, random(&mut r, 6, 5, 1.0)),
        (leaves::WEIGHT, weight(0.0)),
    ]);
    let p = enc.params(prefix::ENCODER).to_bindings();
    let (loss, terms) = obj.value(&[&p, &data]).unwrap();
    assert_eq!(loss, terms[0]);
    data.insert(leaves::WEIGHT.into(), weight(0.25));
    let (loss, terms) = obj.value(&[&p, &data]).unwrap();
    assert!((loss - (terms[0] + 0.25 * terms[1])).abs() < 1e-14);
}

#[test]
fn nu_warmup_is_linear_then_flat() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.nu_at(0), 0.0);
    assert!((cfg.nu_at(1) - cfg.nu_max / cfg.nu_warmup as f64).abs() < 1e-15);
    assert_eq!(cfg.nu_at(cfg.nu_warmup), cfg.nu_max);
    assert_eq!(cfg.nu_at(10 * cfg.nu_warmup), cfg.nu_max);
}

#[test]
fn zero_scale_hyper_loss_equals_static_loss() {
    let cfg = tiny_config();
    let base = static_bundle(9);
    let mut bundle = hyper_bundle(&base, 10);
    bundle.hyper.as_mut().unwrap().scale = weight(0.0);
    let obj = hyper_objective(&bundle).unwrap();
    let mut r = rng::from_seed(11);
    let x = random(&mut r, 6, 2, 1.0);
    let xd = random(&mut r, 6, 2, 1.0);
    let y = random(&mut r, 6, 1, 1.0);
    let data = bind(vec![
        (leaves::STATE, x.clone()),
        (leaves::STATE_RATE, xd.clone()),
        (leaves::OUTPUT, y.clone()),
        (leaves::WINDOW, random(&mut r, 6, cfg.window, 1.0)),
        (leaves::WINDOW_RATE, random(&mut r, 6, cfg.window, 1.0)),
        (leaves::WEIGHT, weight(1.0)),
    ]);
    let (_, terms) = obj.value(&[&bundle.params().to_bindings(), &data]).unwrap();

    let z = base.encoder.forward(&x).unwrap();
    let rec = base.decoder.forward(&z).unwrap().sub(&x).unwrap();
    let rec = rec.sq_norm() / 6.0;
    let sobj = encoder_objective(&base.encoder, &base.matrices);
    let sdata = bind(vec![
        (leaves::STATE, x),
        (leaves::STATE_RATE, xd),
        (leaves::OUTPUT, y),
        (leaves::LATENT, z),
        (leaves::WEIGHT, weight(1.0)),
    ]);
    let (_, sterms) = sobj.value(&[&base.params().to_bindings(), &sdata]).unwrap();
    assert_eq!(terms[0].to_bits(), rec.to_bits());
    assert_eq!(terms[1].to_bits(), sterms[1].to_bits());
}

#[test]
fn zero_window_gives_zero_injection_gradient() {
    let cfg = tiny_config();
    let mut r = rng::from_seed(12);
    let inj = Injection::new(cfg.injection_dims(1, 5), &mut r);
    let obj = injection_objective(&inj, &matrices(), cfg.window);
    let data = bind(vec![
        (leaves::LATENT, random(&mut r, 6, 5, 1.0)),
        (leaves::LATENT_RATE, random(&mut r, 6, 5, 1.0)),
        (leaves::OUTPUT, random(&mut r, 6, 1, 1.0)),
        (leaves::WINDOW, Tensor::zeros(vec![6, cfg.window])),
    ]);
    let p = inj.params(prefix::INJECTION);
    let ev = obj.evaluate(&[&p.to_bindings(), &data], p.names()).unwrap();
    assert!(ev.loss > 0.0);
    for g in &ev.gradients {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn encoder_rates_match_finite_differences() {
    let base = static_bundle(13);
    let mut r = rng::from_seed(14);
    let x = random(&mut r, 5, 2, 1.0);
    let xd = random(&mut r, 5, 2, 1.0);
    let (z, zd) = encoder_rates(&base.encoder, &x, &xd).unwrap();
    assert_eq!(z, base.encoder.forward(&x).unwrap());
    let h = 1e-6;
    let up = base.encoder.forward(&x.add(&xd.scale(h)).unwrap()).unwrap();
    let down = base.encoder.forward(&x.sub(&xd.scale(h)).unwrap()).unwrap();
    let fd = up.sub(&down).unwrap().scale(0.5 / h);
    for (a, b) in zd.data().iter().zip(fd.data()) {
        assert!((a - b).abs() < 1e-7);
    }
}

fn phase1() -> (ModelBundle, Vec<EpochMetrics>) {
    let cfg = tiny_config();
    let data = build_autonomous_dataset(&SystemSpec::duffing(), &matrices(), &cfg).unwrap();
    let mut log = Vec::new();
    let (b, s) = train_phase1(SystemKind::Duffing, &matrices(), &data, &cfg, &mut |m| log.push(m.clone())).unwrap();
    assert_eq!(s.stages.len(), 2);
    (b, log)
}

#[test]
fn phase1_logs_every_epoch_and_is_deterministic() {
    let cfg = tiny_config();
    let (a, log) = phase1();
    let (b, _) = phase1();
    assert_eq!(a, b);
    assert_eq!(log.len(), cfg.epochs_encoder + cfg.epochs_decoder);
    assert!(log[..3].iter().all(|m| m.stage == "encoder" && m.terms.contains_key("pde")));
    assert_eq!(log[0].epoch, 0);
    assert!(log.iter().all(|m| m.loss.is_finite() && m.grad_norm >= 0.0 && m.lr > 0.0));
}

#[test]
fn phase1_reduces_the_encoder_loss() {
    let mut cfg = tiny_config();
    cfg.epochs_encoder = 30;
    cfg.epochs_decoder = 30;
    cfg.max_batches_per_epoch = None;
    let data = build_autonomous_dataset(&SystemSpec::duffing(), &matrices(), &cfg).unwrap();
    let (_, s) = train_phase1(SystemKind::Duffing, &matrices(), &data, &cfg, &mut |_| {}).unwrap();
    for st in &s.stages {
        assert!(st.final_loss < st.initial_loss, "{st:?}");
    }
}

#[test]
fn conditioned_trainers_keep_the_base_frozen() {
    let (cfg, data) = forced();
    let base = static_bundle(15);
    let before = base.base_params();

    let (obs, s) = train_obs(&base, &data, &cfg, &mut |_| {}).unwrap();
    assert_eq!(obs.base_params(), before);
    assert!(s.stages[0].extra.contains_key("zero_injection_loss"));
    let (obs2, _) = train_obs(&base, &data, &cfg, &mut |_| {}).unwrap();
    assert_eq!(obs, obs2);

    let (dyn_b, s) = train_dyn(&base, &data, &cfg, &mut |_| {}).unwrap();
    assert_eq!(dyn_b.base_params(), before);
    assert_eq!(s.stages[0].stage, "hyper");
    assert_ne!(dyn_b.conditioning_params(), hyper_bundle(&base, 0).conditioning_params());

    assert!(matches!(train_obs(&obs, &data, &cfg, &mut |_| {}), Err(KklError::Config(_))));
}

#[test]
fn curriculum_runs_three_stages_in_order() {
    let (mut cfg, data) = forced();
    cfg.epochs = 6;
    let base = static_bundle(16);
    let mut log = Vec::new();
    let (b, s) = train_curriculum(&base, &data, &cfg, &mut |m| log.push(m.stage.clone())).unwrap();
    let names: Vec<&str> = s.stages.iter().map(|st| st.stage.as_str()).collect();
    assert_eq!(
        names,
        [
            "curriculum_constant_encoder",
            "curriculum_constant_decoder",
            "curriculum_sinusoid_encoder",
            "curriculum_sinusoid_decoder",
            "curriculum_square_encoder",
            "curriculum_square_decoder",
        ]
    );
    assert_eq!(log.len(), 12);
    assert_ne!(b.encoder, base.encoder);
    assert!(b.injection.is_none() && b.hyper.is_none());
}

#[test]
fn trainers_reject_mismatched_windows() {
    let (mut cfg, data) = forced();
    let mut base = static_bundle(17);
    base.window = cfg.window + 1;
    assert!(train_dyn(&base, &data, &cfg, &mut |_| {}).is_err());
    cfg.batch_size = 0;
    assert!(train_obs(&static_bundle(17), &data, &cfg, &mut |_| {}).is_err());
}

#[test]
fn windows_in_batches_match_the_trajectory_inputs() {
    let (_, data) = forced();
    let tr = &data.trajectories[4];
    let i = data.index.iter().position(|&(j, _)| j == 4).unwrap();
    let (_, k) = data.index[i];
    assert_eq!(data.windows(&[i], 0), input_windows(&tr.inputs, 1, data.window, &[k]));
}
