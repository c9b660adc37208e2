//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line
//! each; exits non-zero when any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test -p kkl-cli --test acceptance -- 5 8`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use kkl_cli::artifacts::{Checkpoint, Layout};
use kkl_cli::commands::BoundReport;
use kkl_cli::RunConfig;
use kkl_core::analysis::{smape, smape_values, SmapeReport};
use kkl_core::diffcore::{Bindings, Graph, NodeId};
use kkl_core::dynamics::{
    add_noise, integrate, solve_grid, InputKind, InputSignal, Method, SystemKind, SystemSpec, Tolerances,
};
use kkl_core::networks::{HyperNet, Injection, Mlp};
use kkl_core::observer::{
    build_matrices, check_matrices, latent_dim, pde_residual, prefix, run_observer, ModelBundle, ObserverMatrices,
    Variant,
};
use kkl_core::rng;
use kkl_core::training::{
    build_autonomous_dataset, decoder_objective, encoder_objective, hyper_objective, injection_objective, leaves,
    weight, HyperConfig, InjectionConfig, Objective, TrainConfig,
};
use kkl_core::Tensor;
use rand::Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("{e:#}")
}

// ---------------------------------------------------------------------------
// running the binary

fn kkl(out: &Path, args: &[&str], sets: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kkl"));
    cmd.args(args).arg("--out").arg(out);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    let o = cmd.output().map_err(fail)?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!(
            "kkl {} exited with {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).lines().last().unwrap_or("")
        ))
    }
}

const PIPELINE: [&str; 6] = ["gen-data", "train-phase1", "train-obs", "train-dyn", "train-curriculum", "evaluate"];

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(fail)
}

fn read_smape(layout: &Layout) -> Result<SmapeReport, String> {
    let mut doc = read_json(&layout.smape_json())?;
    serde_json::from_value(doc["report"].take()).map_err(fail)
}

fn read_bound(layout: &Layout, v: Variant) -> Result<BoundReport, String> {
    let mut doc = read_json(&layout.bound(v))?;
    doc.as_object_mut().map(|m| m.remove("config"));
    serde_json::from_value(doc).map_err(fail)
}

fn bundle(layout: &Layout, v: Variant) -> Result<ModelBundle, String> {
    Checkpoint::load(&layout.checkpoint(v)).map_err(fail)?.bundle().map_err(fail)
}

/// The desk-scale Duffing run shared by several criteria.
struct DuffingRun {
    _dir: tempfile::TempDir,
    layout: Layout,
    seconds: f64,
}

/// Default config with the benchmark held at the required trial count.
const DESK: &[&str] = &["eval.n_trials=50"];

fn duffing_run(cache: &mut Option<Result<DuffingRun, String>>) -> Result<&DuffingRun, String> {
    if cache.is_none() {
        let run = (|| {
            let dir = tempfile::tempdir().map_err(fail)?;
            let start = Instant::now();
            for step in PIPELINE {
                let t = Instant::now();
                kkl(dir.path(), &[step], DESK)?;
                eprintln!("    duffing {step}: {:.0} s", t.elapsed().as_secs_f64());
            }
            let seconds = start.elapsed().as_secs_f64();
            Ok(DuffingRun {
                layout: Layout::new(dir.path()),
                _dir: dir,
                seconds,
            })
        })();
        *cache = Some(run);
    }
    match cache.as_ref().expect("filled above") {
        Ok(r) => Ok(r),
        Err(e) => Err(format!("desk-scale Duffing pipeline failed: {e}")),
    }
}

// ---------------------------------------------------------------------------
// 1. differentiation oracles

fn random(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn scalar_of(g: &Graph<f64>, out: NodeId, b: &[&Bindings<f64>]) -> f64 {
    g.forward(b, &[out]).unwrap().value(out).item()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-12)
}

/// Largest relative error between reverse-mode gradients of the scalar
/// `out` and central differences, over every entry of the `wrt` leaves.
fn graph_grad_error(g: &Graph<f64>, out: NodeId, b: &Bindings<f64>, wrt: &[&str]) -> f64 {
    let ids: Vec<NodeId> = wrt.iter().map(|n| g.leaf_id(n).unwrap()).collect();
    let grads = g.forward(&[b], &[out]).unwrap().gradients(out, &ids).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, grad) in wrt.iter().zip(grads) {
        let n = b[*name].numel();
        let fd: Vec<f64> = (0..n)
            .map(|i| {
                let mut p = b.clone();
                p.get_mut(*name).unwrap().data_mut()[i] += h;
                let up = scalar_of(g, out, &[&p]);
                p.get_mut(*name).unwrap().data_mut()[i] -= 2.0 * h;
                let down = scalar_of(g, out, &[&p]);
                (up - down) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(grad.data(), &fd));
    }
    worst
}

type Build = fn(&mut Graph<f64>) -> NodeId;

fn primitive_cases() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>, Build)> {
    let ab = |sa: Vec<usize>, sb: Vec<usize>| vec![("a", sa), ("b", sb)];
    vec![
        ("matmul", ab(vec![3, 4], vec![4, 2]), |g| {
            let (a, b) = (g.leaf("a"), g.leaf("b"));
            g.matmul(a, b)
        }),
        ("add", ab(vec![2, 3], vec![2, 3]), |g| {
            let (a, b) = (g.leaf("a"), g.leaf("b"));
            g.add(a, b)
        }),
        ("sub", ab(vec![2, 3], vec![2, 3]), |g| {
            let (a, b) = (g.leaf("a"), g.leaf("b"));
            g.sub(a, b)
        }),
        ("mul", ab(vec![2, 3], vec![2, 3]), |g| {
            let (a, b) = (g.leaf("a"), g.leaf("b"));
            g.mul(a, b)
        }),
        ("affine", vec![("a", vec![2, 3])], |g| {
            let a = g.leaf("a");
            g.affine(a, -1.7, 0.3)
        }),
        ("scale", vec![("a", vec![2, 3])], |g| {
            let a = g.leaf("a");
            g.scale(a, 2.5)
        }),
        ("neg", vec![("a", vec![2, 3])], |g| {
            let a = g.leaf("a");
            g.neg(a)
        }),
        ("one_minus", vec![("a", vec![2, 3])], |g| {
            let a = g.leaf("a");
            g.one_minus(a)
        }),
        ("add_row", ab(vec![4, 3], vec![1, 3]), |g| {
            let (a, b) = (g.leaf("a"), g.leaf("b"));
            g.add_row(a, b)
        }),
        ("mul_scalar", ab(vec![2, 3], vec![1, 1]), |g| {
            let (a, b) = (g.leaf("a"), g.leaf("b"));
            g.mul_scalar(a, b)
        }),
        ("tanh", vec![("a", vec![3, 3])], |g| {
            let a = g.leaf("a");
            g.tanh(a)
        }),
        ("sigmoid", vec![("a", vec![3, 3])], |g| {
            let a = g.leaf("a");
            g.sigmoid(a)
        }),
        ("concat_cols", ab(vec![3, 2], vec![3, 4]), |g| {
            let (a, b) = (g.leaf("a"), g.leaf("b"));
            g.concat_cols(a, b)
        }),
        ("slice_cols", vec![("a", vec![3, 5])], |g| {
            let a = g.leaf("a");
            g.slice_cols(a, 2, 2)
        }),
        ("reshape", vec![("a", vec![2, 6])], |g| {
            let a = g.leaf("a");
            g.reshape(a, vec![4, 3])
        }),
        ("sum", vec![("a", vec![2, 3])], |g| {
            let a = g.leaf("a");
            g.sum(a)
        }),
        ("batch_mean", vec![("a", vec![4, 3])], |g| {
            let a = g.leaf("a");
            g.batch_mean(a)
        }),
        ("sq_norm", vec![("a", vec![2, 3])], |g| {
            let a = g.leaf("a");
            g.sq_norm(a)
        }),
        ("mean_sq_rows", vec![("a", vec![4, 3])], |g| {
            let a = g.leaf("a");
            g.mean_sq_rows(a)
        }),
        ("row_vec_mat", ab(vec![4, 3], vec![4, 6]), |g| {
            let (a, b) = (g.leaf("a"), g.leaf("b"));
            g.row_vec_mat(a, b)
        }),
    ]
}

fn bind(pairs: Vec<(&str, Tensor)>) -> Bindings<f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Worst relative error of the trainable gradients of `obj`, on a few
/// entries per tensor.
fn objective_grad_error(obj: &Objective, params: &Bindings<f64>, data: &Bindings<f64>, frozen: &Bindings<f64>) -> f64 {
    let mut names: Vec<String> = params.keys().cloned().collect();
    names.sort();
    let ev = obj.evaluate(&[frozen, params, data], &names).unwrap();
    let h = 1e-6;
    let (mut an, mut fd) = (Vec::new(), Vec::new());
    for (name, grad) in names.iter().zip(&ev.gradients) {
        let n = grad.numel();
        for k in [0, n / 3, n / 2, n - 1] {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[k] += h;
            let up = obj.value(&[frozen, &p, data]).unwrap().0;
            p.get_mut(name).unwrap().data_mut()[k] -= 2.0 * h;
            let down = obj.value(&[frozen, &p, data]).unwrap().0;
            an.push(grad.data()[k]);
            fd.push((up - down) / (2.0 * h));
        }
    }
    rel_err(&an, &fd)
}

fn mini_train() -> TrainConfig {
    TrainConfig {
        window: 5,
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

fn criterion_1() -> Outcome {
    let mut r = rng::from_seed(101);
    let mut worst_prim: f64 = 0.0;
    let mut worst_name = "";
    for (name, leaves_spec, build) in primitive_cases() {
        let mut g = Graph::new();
        let out = build(&mut g);
        let mut b = Bindings::new();
        for (leaf, shape) in &leaves_spec {
            b.insert(leaf.to_string(), random(&mut r, shape, 1.5));
        }
        let shape = g.forward(&[&b], &[out]).map_err(fail)?.value(out).shape().to_vec();
        let probe = g.leaf("probe");
        let prod = g.mul(out, probe);
        let loss = g.sum(prod);
        b.insert("probe".into(), random(&mut r, &shape, 1.0));
        let wrt: Vec<&str> = leaves_spec.iter().map(|l| l.0).collect();
        let e = graph_grad_error(&g, loss, &b, &wrt);
        if e > worst_prim {
            worst_prim = e;
            worst_name = name;
        }
    }

    // reverse mode through a forward-mode tangent of a small network
    let mut g = Graph::new();
    let (x, w1, b1, w2, v) = (g.leaf("x"), g.leaf("w1"), g.leaf("b1"), g.leaf("w2"), g.leaf("v"));
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.tanh(h);
    let y = g.matmul(h, w2);
    let y = g.sigmoid(y);
    let ty = g.push_jvp(y, &[(x, v)]).map_err(fail)?;
    let probe = g.leaf("probe");
    let p = g.mul(ty, probe);
    let s = g.sum(p);
    let fit = g.mean_sq_rows(y);
    let loss = g.add(s, fit);
    let b = bind(vec![
        ("x", random(&mut r, &[5, 3], 1.0)),
        ("w1", random(&mut r, &[3, 4], 1.0)),
        ("b1", random(&mut r, &[1, 4], 1.0)),
        ("w2", random(&mut r, &[4, 2], 1.0)),
        ("v", random(&mut r, &[5, 3], 1.0)),
        ("probe", random(&mut r, &[5, 2], 1.0)),
    ]);
    let jvp_err = graph_grad_error(&g, loss, &b, &["x", "w1", "b1", "w2", "v"]);

    // the full loss of every trainer on a miniature configuration
    let cfg = mini_train();
    let m = build_matrices(2, 1).map_err(fail)?;
    let nz = m.n_z;
    let enc = Mlp::new(&cfg.encoder_dims(SystemKind::Duffing, nz), true, &mut r);
    let dec = Mlp::new(&cfg.decoder_dims(SystemKind::Duffing, nz), true, &mut r);
    let none = HashMap::new();
    let mut losses = Vec::new();
    let data = bind(vec![
        (leaves::STATE, random(&mut r, &[6, 2], 1.0)),
        (leaves::STATE_RATE, random(&mut r, &[6, 2], 1.0)),
        (leaves::OUTPUT, random(&mut r, &[6, 1], 1.0)),
        (leaves::LATENT, random(&mut r, &[6, nz], 1.0)),
        (leaves::WEIGHT, weight(0.3)),
    ]);
    losses.push((
        "encoder",
        objective_grad_error(&encoder_objective(&enc, &m), &enc.params(prefix::ENCODER).to_bindings(), &data, &none),
    ));
    losses.push((
        "decoder",
        objective_grad_error(&decoder_objective(&dec), &dec.params(prefix::DECODER).to_bindings(), &data, &none),
    ));
    let inj = Injection::new(cfg.injection_dims(1, nz), &mut r);
    let data = bind(vec![
        (leaves::LATENT, random(&mut r, &[6, nz], 1.0)),
        (leaves::LATENT_RATE, random(&mut r, &[6, nz], 1.0)),
        (leaves::OUTPUT, random(&mut r, &[6, 1], 1.0)),
        (leaves::WINDOW, random(&mut r, &[6, cfg.window], 1.0)),
    ]);
    losses.push((
        "injection",
        objective_grad_error(
            &injection_objective(&inj, &m, cfg.window),
            &inj.params(prefix::INJECTION).to_bindings(),
            &data,
            &none,
        ),
    ));
    let base = ModelBundle::autonomous(SystemKind::Duffing, enc, dec, m, cfg.window, cfg.dt).map_err(fail)?;
    let mut layers = base.encoder.layer_shapes();
    layers.extend(base.decoder.layer_shapes());
    let hyp = base
        .with_hyper(HyperNet::new(&cfg.hyper_dims(1, layers), &mut r))
        .map_err(fail)?;
    let data = bind(vec![
        (leaves::STATE, random(&mut r, &[5, 2], 1.0)),
        (leaves::STATE_RATE, random(&mut r, &[5, 2], 1.0)),
        (leaves::OUTPUT, random(&mut r, &[5, 1], 1.0)),
        (leaves::WINDOW, random(&mut r, &[5, cfg.window], 1.0)),
        (leaves::WINDOW_RATE, random(&mut r, &[5, cfg.window], 1.0)),
        (leaves::WEIGHT, weight(0.7)),
    ]);
    losses.push((
        "hypernetwork",
        objective_grad_error(
            &hyper_objective(&hyp).map_err(fail)?,
            &hyp.conditioning_params().to_bindings(),
            &data,
            &base.base_params().to_bindings(),
        ),
    ));
    let worst_loss = losses.iter().map(|l| l.1).fold(0.0, f64::max);
    let detail = format!(
        "primitives max rel err {worst_prim:.1e} ({worst_name}), gradient through JVP {jvp_err:.1e}, trainer losses {}",
        losses
            .iter()
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    check(worst_prim <= 1e-6 && jvp_err <= 1e-6 && worst_loss <= 1e-4, detail)
}

// ---------------------------------------------------------------------------
// 2. integrators

fn duffing_energy(x: &[f64]) -> f64 {
    0.5 * x[1] * x[1] + 0.5 * x[0] * x[0] + 0.25 * x[0].powi(4)
}

fn rk4_error(h: f64) -> f64 {
    let spec = SystemSpec::duffing();
    let f = |_t: f64, x: &[f64], dx: &mut [f64]| (spec.drift)(x, &[0.0], dx);
    let tight = Tolerances { rtol: 1e-12, atol: 1e-12 };
    let n = (10.0 / h).round() as usize;
    let x0 = [1.0, 0.5];
    let reference = solve_grid(f, &x0, n, h, Method::Rk45, tight).unwrap();
    let fixed = solve_grid(f, &x0, n, h, Method::Rk4, tight).unwrap();
    let last = 2 * n;
    ((reference[last] - fixed[last]).powi(2) + (reference[last + 1] - fixed[last + 1]).powi(2)).sqrt()
}

fn criterion_2() -> Outcome {
    let lin = SystemSpec::linear();
    let mut lin_err: f64 = 0.0;
    for (x0, u) in [(1.0, 0.0), (-3.0, 0.0), (2.0, 0.7)] {
        let sig = InputSignal::constant(u);
        let tr = integrate(&lin, &[x0], &sig, 10.0, 0.05, Method::Rk45).map_err(fail)?;
        for k in 0..tr.len() {
            let exact = u + (x0 - u) * (-tr.times[k]).exp();
            lin_err = lin_err.max((tr.state(k)[0] - exact).abs());
        }
    }
    let duf = SystemSpec::duffing();
    let mut drift: f64 = 0.0;
    for x0 in [[1.0, 0.0], [-0.5, 0.8], [0.9, -0.9]] {
        let tr = integrate(&duf, &x0, &InputSignal::zero(), 50.0, 0.05, Method::Rk45).map_err(fail)?;
        let h0 = duffing_energy(tr.state(0));
        for k in 0..tr.len() {
            drift = drift.max((duffing_energy(tr.state(k)) - h0).abs());
        }
    }
    let ratio = rk4_error(0.1) / rk4_error(0.05);
    check(
        lin_err <= 1e-8 && drift < 1e-6 && (8.0..=32.0).contains(&ratio),
        format!("linear max err {lin_err:.1e}, Duffing energy drift {drift:.1e}, rk4 halving ratio {ratio:.2}"),
    )
}

// ---------------------------------------------------------------------------
// 3. collapse with zero input

fn bitwise(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_3(cache: &mut Option<Result<DuffingRun, String>>) -> Outcome {
    let run = duffing_run(cache)?;
    let auto = bundle(&run.layout, Variant::Autonomous)?;
    let spec = auto.system.spec();
    let mut r = rng::from_seed(303);
    let mut traces = 0;
    for trial in 0..10 {
        let x0: Vec<f64> = spec.ic_box.iter().map(|[lo, hi]| r.random_range(*lo..*hi)).collect();
        let clean = integrate(&spec, &x0, &InputSignal::zero(), 20.0, auto.dt, Method::Rk45).map_err(fail)?;
        let traj = if trial % 2 == 0 { clean } else { add_noise(&clean, 0.01, &mut r).map_err(fail)? };
        let z0 = vec![0.0; auto.n_z()];
        let reference = run_observer(&auto, &traj, &z0).map_err(fail)?;
        for v in [Variant::Obs, Variant::Dyn] {
            let est = run_observer(&bundle(&run.layout, v)?, &traj, &z0).map_err(fail)?;
            if !bitwise(&est.latent, &reference.latent) || !bitwise(&est.states, &reference.states) {
                return Err(format!("{v} trace differs from autonomous on trial {trial}"));
            }
            traces += 1;
        }
    }
    let report = read_smape(&run.layout)?;
    let a = report
        .cell(Variant::Autonomous, InputKind::Zero)
        .ok_or("no zero-regime cell")?;
    for v in [Variant::Obs, Variant::Dyn] {
        let c = report.cell(v, InputKind::Zero).ok_or("no zero-regime cell")?;
        if !bitwise(&a.trials, &c.trials) {
            return Err(format!("{v} zero-regime SMAPE trials differ from autonomous"));
        }
    }
    Ok(format!(
        "{traces} obs/dyn traces and {} benchmark trials bitwise equal to autonomous",
        2 * a.trials.len()
    ))
}

// ---------------------------------------------------------------------------
// 4. frozen base

fn criterion_4(cache: &mut Option<Result<DuffingRun, String>>) -> Outcome {
    let run = duffing_run(cache)?;
    let base = Checkpoint::load(&run.layout.checkpoint(Variant::Autonomous)).map_err(fail)?.params();
    let mut compared = 0;
    for v in [Variant::Obs, Variant::Dyn] {
        let p = Checkpoint::load(&run.layout.checkpoint(v)).map_err(fail)?.params();
        for (name, t) in base.iter() {
            let after = p.get(name).ok_or_else(|| format!("{v} checkpoint lacks {name}"))?;
            if !bitwise(t.data(), after.data()) {
                return Err(format!("{v} changed base tensor {name}"));
            }
            compared += t.numel();
        }
    }
    let cur = Checkpoint::load(&run.layout.checkpoint(Variant::Curriculum)).map_err(fail)?.params();
    let moved = base
        .iter()
        .any(|(n, t)| cur.get(n).is_some_and(|c| !bitwise(t.data(), c.data())));
    check(
        moved,
        format!("{compared} base weights bitwise unchanged by obs and dyn training (curriculum moved them: {moved})"),
    )
}

// ---------------------------------------------------------------------------
// 5. linear sanity pipeline

const LINEAR: &[&str] = &[
    "system=linear",
    "variants=[\"autonomous\"]",
    "matrices={\"n_z\":1,\"n_y\":1,\"a\":[-2.0],\"b\":[1.0]}",
    "train.n_traj=40",
    "train.t_final=20",
    "train.hidden=16",
    "train.hidden_layers=2",
    "train.epochs_encoder=150",
    "train.epochs_decoder=60",
    "train.batch_size=128",
    "train.nu_max=1.0",
    "bound.ic_box=[[-1.0,1.0]]",
    "bound.n_test=10",
    "bound.t_final=8",
    "bound.t_skip=1",
    "bound.points_per_axis=201",
];

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(fail)?;
    for step in ["gen-data", "train-phase1", "bound"] {
        kkl(dir.path(), &[step], LINEAR)?;
    }
    let layout = Layout::new(dir.path());
    let ck = Checkpoint::load(&layout.checkpoint(Variant::Autonomous)).map_err(fail)?;
    let cfg: RunConfig = ck.run_config().map_err(fail)?;
    let b = ck.bundle().map_err(fail)?;
    // held-out points: fresh initial conditions from a different seed
    let held = TrainConfig {
        seed: cfg.seed + 1_000,
        ..cfg.train()
    };
    let spec = cfg.spec();
    let data = build_autonomous_dataset(&spec, &cfg.matrices().map_err(fail)?, &held).map_err(fail)?;
    let x = Tensor::matrix(data.len(), 1, data.x.clone()).map_err(fail)?;
    let u = Tensor::zeros(vec![data.len(), 1]);
    let res = pde_residual(&b, &x, &u, None, None).map_err(fail)?;
    let norms: Vec<f64> = (0..res.rows()).map(|i| norm(res.row_slice(i))).collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    // the certificate covers [-1, 1], which is where the held-out samples live
    let in_box = (0..norms.len()).filter(|&i| data.x[i].abs() <= 1.0);
    let max = in_box.map(|i| norms[i]).fold(0.0, f64::max);
    let bound = read_bound(&layout, Variant::Autonomous)?;
    let eps = bound.constants.eps_pde;
    let secs = start.elapsed().as_secs_f64();
    check(
        mean < 1e-3 && max <= eps && eps <= 3.0 * max && secs < 120.0,
        format!(
            "held-out PDE residual mean {mean:.2e} over {} points, worst in the certified box {max:.2e}; certificate eps_pde {eps:.2e}; {secs:.0} s",
            norms.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. directional SMAPE table on Duffing

fn criterion_6(cache: &mut Option<Result<DuffingRun, String>>) -> Outcome {
    let run = duffing_run(cache)?;
    let report = read_smape(&run.layout)?;
    let mean = |v, k| report.mean(v, k).ok_or(format!("missing cell {v}/{k:?}"));
    let mut lines = Vec::new();
    let mut ok = report.config.n_trials >= 50 && run.seconds < 1800.0;
    for k in [InputKind::Constant, InputKind::Sinusoid, InputKind::Square] {
        let (a, o, c) = (
            mean(Variant::Autonomous, k)?,
            mean(Variant::Obs, k)?,
            mean(Variant::Curriculum, k)?,
        );
        let d = mean(Variant::Dyn, k)?;
        let directional = if k == InputKind::Constant { o <= 0.6 * a } else { o < a };
        ok &= directional && c >= o;
        lines.push(format!("{}: auto {a:.2} obs {o:.2} dyn {d:.2} curr {c:.2}", k.as_str()));
    }
    check(
        ok,
        format!(
            "{}; {} trials; pipeline {:.0} s",
            lines.join("; "),
            report.config.n_trials,
            run.seconds
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. certificate soundness

fn criterion_7(cache: &mut Option<Result<DuffingRun, String>>) -> Outcome {
    let run = duffing_run(cache)?;
    let mut sets = DESK.to_vec();
    sets.push("variants=[\"autonomous\"]");
    kkl(&run.layout.root, &["bound"], &sets)?;
    let b = read_bound(&run.layout, Variant::Autonomous)?;
    check(
        b.trajectories >= 50 && b.fraction >= 0.95,
        format!(
            "certificate holds on {}/{} noise-free runs (worst error/bound {:.3}); eps_pde {:.3e} eps_rt {:.3e} ell_dec {:.2}",
            b.holding, b.trajectories, b.worst_ratio, b.constants.eps_pde, b.constants.eps_rt, b.constants.ell_dec
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. metric and matrix identities

fn criterion_8() -> Outcome {
    let mut r = rng::from_seed(808);
    let v: Vec<f64> = (0..40).map(|_| r.random_range(-3.0..3.0)).collect();
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let w: Vec<f64> = (0..40).map(|_| r.random_range(-3.0..3.0)).collect();
    let times: Vec<f64> = (0..20).map(|k| k as f64 * 0.1).collect();
    let zero = smape(&v, &v, 2, &times, 0.0).map_err(fail)?;
    let flip = smape(&v, &neg, 2, &times, 0.0).map_err(fail)?;
    let sym = smape_values(&v, &w) == smape_values(&w, &v);
    let nz = [
        (SystemKind::Duffing, 5),
        (SystemKind::VanDerPol, 5),
        (SystemKind::Rossler, 7),
        (SystemKind::FitzHughNagumo, 5),
    ];
    let mut nz_ok = true;
    let mut rep_ok = true;
    for (k, expect) in nz {
        let s = k.spec();
        nz_ok &= latent_dim(s.n_x, s.n_y) == expect;
        let m: ObserverMatrices = build_matrices(s.n_x, s.n_y).map_err(fail)?;
        let rep = check_matrices(&m);
        rep_ok &= rep.hurwitz && rep.controllable && rep.kappa == 1.0 && rep.lambda == 1.0;
    }
    check(
        zero == 0.0 && flip == 200.0 && sym && nz_ok && rep_ok,
        format!(
            "smape(x,x)={zero}, smape(x,-x)={flip}, symmetric={sym}; n_z formula {}; default matrices kappa=1 lambda=1 controllable: {rep_ok}",
            if nz_ok { "5/5/7/5" } else { "wrong" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. end-to-end determinism

const SMALL: &[&str] = &[
    "train.n_traj=4",
    "train.n_inp=3",
    "train.t_final=20",
    "train.window=20",
    "train.epochs_encoder=8",
    "train.epochs_decoder=8",
    "train.epochs=4",
    "train.batch_size=64",
    "train.max_batches_per_epoch=8",
    "train.hidden=24",
    "train.hidden_layers=2",
    "eval.n_trials=4",
    "eval.t_final=15",
];

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let root: PathBuf = dir.path().join("run");
    let mut reports = Vec::new();
    for _ in 0..2 {
        if root.exists() {
            std::fs::remove_dir_all(&root).map_err(fail)?;
        }
        for step in PIPELINE.iter().chain(&["report"]) {
            kkl(&root, &[step], SMALL)?;
        }
        reports.push(std::fs::read(Layout::new(&root).report()).map_err(fail)?);
    }
    check(
        reports[0] == reports[1],
        format!("report.csv of two full pipeline runs: {} bytes, identical: {}", reports[0].len(), reports[0] == reports[1]),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut cache: Option<Result<DuffingRun, String>> = None;
    let names = [
        (1, "differentiation oracles"),
        (2, "integrators"),
        (3, "zero-input collapse"),
        (4, "frozen base"),
        (5, "linear sanity pipeline"),
        (6, "directional SMAPE on Duffing"),
        (7, "certificate soundness"),
        (8, "metric identities"),
        (9, "end-to-end determinism"),
    ];
    let mut failed = 0;
    for (n, name) in names {
        if !run(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(&mut cache),
            4 => criterion_4(&mut cache),
            5 => criterion_5(),
            6 => criterion_6(&mut cache),
            7 => criterion_7(&mut cache),
            8 => criterion_8(),
            _ => criterion_9(),
        }))
        .unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
