//! Subcommand implementations. Each reads and writes artifacts under the
//! configured run directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kkl_core::analysis::{
    asymptotic_bound, check_certificate, covering_grid, default_points_per_axis, estimate_constants, linspace,
    noisy_bound, run_benchmark, table_csv, BoundConstants, CertificateCheck, NoiseLevels, SmapeReport,
};
use kkl_core::dynamics::{integrate, InputSignal, Method, SystemSpec, Trajectory};
use kkl_core::observer::{ModelBundle, Variant};
use kkl_core::rng::{self, streams};
use kkl_core::training::{
    build_autonomous_dataset, build_forced_dataset, sample_box, train_curriculum, train_dyn, train_obs, train_phase1,
    EpochMetrics, TrainSummary,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifacts::{
    autonomous_container, autonomous_from, config_comment, ensure_variant, forced_container, forced_from, load_data,
    require, write_json, write_text, Checkpoint, Layout,
};
use crate::config::RunConfig;
use crate::container::DATA_MAGIC;
use crate::failure::{ConfigError, MissingPrerequisite};

/// Sample counts of the generated datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub system: String,
    pub seed: u64,
    pub autonomous: AutonomousCounts,
    pub forced: ForcedCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutonomousCounts {
    pub file: PathBuf,
    pub trajectories: usize,
    pub burn_steps: usize,
    pub per_trajectory: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcedCounts {
    pub file: PathBuf,
    pub initial_conditions: usize,
    pub inputs: usize,
    pub per_trajectory: usize,
    pub samples: usize,
}

pub fn gen_data(cfg: &RunConfig) -> Result<DataManifest> {
    let layout = Layout::new(&cfg.paths.out);
    let spec = cfg.spec();
    let tc = cfg.train();
    let auto = build_autonomous_dataset(&spec, &cfg.matrices()?, &tc).context("autonomous dataset")?;
    autonomous_container(&auto, cfg).save(DATA_MAGIC, &layout.autonomous_data())?;
    let forced = build_forced_dataset(&spec, &tc).context("forced dataset")?;
    forced_container(&forced, cfg).save(DATA_MAGIC, &layout.forced_data())?;
    let manifest = DataManifest {
        system: spec.name.clone(),
        seed: cfg.seed,
        autonomous: AutonomousCounts {
            file: "autonomous.kkd".into(),
            trajectories: tc.n_traj,
            burn_steps: auto.burn_steps,
            per_trajectory: auto.per_trajectory,
            samples: auto.len(),
        },
        forced: ForcedCounts {
            file: "forced.kkd".into(),
            initial_conditions: tc.n_traj,
            inputs: tc.n_inp,
            per_trajectory: forced.len() / forced.trajectories.len().max(1),
            samples: forced.len(),
        },
    };
    write_json(&layout.data_manifest(), cfg, serde_json::to_value(&manifest)?)?;
    Ok(manifest)
}

/// JSON-lines training log: the config first, then one line per epoch.
struct MetricsLog {
    out: BufWriter<File>,
    failed: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut log = Self {
            out: BufWriter::new(file),
            failed: None,
        };
        log.line(&serde_json::json!({ "config": cfg.to_value() }));
        Ok(log)
    }

    fn line<T: Serialize>(&mut self, v: &T) {
        if self.failed.is_none() {
            let text = serde_json::to_string(v).expect("metrics serialize");
            if let Err(e) = writeln!(self.out, "{text}") {
                self.failed = Some(e);
            }
        }
    }

    fn record(&mut self, m: &EpochMetrics) {
        self.line(m);
        if m.epoch % 10 == 0 {
            eprintln!("[{}] epoch {:>4}  loss {:.4e}  lr {:.2e}", m.stage, m.epoch, m.loss, m.lr);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.failed.take() {
            return Err(e).context("writing metrics log");
        }
        self.out.flush().context("writing metrics log")
    }
}

fn load_bundle(layout: &Layout, v: Variant, what: &str) -> Result<(Checkpoint, ModelBundle)> {
    let path = layout.checkpoint(v);
    require(&path, what)?;
    let ck = Checkpoint::load(&path)?;
    ensure_variant(&ck, v, &path)?;
    let bundle = ck.bundle().with_context(|| format!("rebuilding {}", path.display()))?;
    Ok((ck, bundle))
}

/// Runs the trainer of `variant` and writes its checkpoint and log. The
/// conditioned variants start from the autonomous checkpoint.
pub fn train(cfg: &RunConfig, variant: Variant) -> Result<TrainSummary> {
    let layout = Layout::new(&cfg.paths.out);
    let tc = cfg.train();
    let prepared = match variant {
        Variant::Autonomous => {
            let c = load_data(&layout.autonomous_data(), cfg)?;
            (None, Some(autonomous_from(&c)?), None)
        }
        _ => {
            let (_, base) = load_bundle(&layout, Variant::Autonomous, "base checkpoint, run train-phase1 first")?;
            let c = load_data(&layout.forced_data(), cfg)?;
            (Some(base), None, Some(forced_from(&c, &cfg.spec())?))
        }
    };
    let mut log = MetricsLog::create(&layout.metrics(variant), cfg)?;
    let mut sink = |m: &EpochMetrics| log.record(m);
    let result = match prepared {
        (None, Some(auto), None) => train_phase1(cfg.system, &cfg.matrices()?, &auto, &tc, &mut sink),
        (Some(base), None, Some(forced)) => match variant {
            Variant::Obs => train_obs(&base, &forced, &tc, &mut sink),
            Variant::Dyn => train_dyn(&base, &forced, &tc, &mut sink),
            _ => train_curriculum(&base, &forced, &tc, &mut sink),
        },
        _ => unreachable!("inputs prepared per variant"),
    };
    log.finish()?;
    let (bundle, summary) = result.with_context(|| format!("training {variant}"))?;
    Checkpoint::from_bundle(&bundle, cfg, &summary).save(&layout.checkpoint(variant))?;
    Ok(summary)
}

/// Loads the configured variants' checkpoints in config order.
pub fn load_variants(cfg: &RunConfig) -> Result<Vec<ModelBundle>> {
    let layout = Layout::new(&cfg.paths.out);
    cfg.variants
        .iter()
        .map(|&v| load_bundle(&layout, v, &format!("{v} checkpoint")).map(|b| b.1))
        .collect()
}

/// SMAPE benchmark of the configured variants.
pub fn evaluate(cfg: &RunConfig) -> Result<SmapeReport> {
    let layout = Layout::new(&cfg.paths.out);
    let bundles = load_variants(cfg)?;
    for b in &bundles {
        if b.system != cfg.system {
            return Err(ConfigError(format!("{} checkpoint was trained on another system", b.variant)).into());
        }
    }
    let report = run_benchmark(&bundles, &cfg.eval, cfg.seed)?;
    write_json(&layout.smape_json(), cfg, serde_json::json!({ "report": report }))?;
    let csv = config_comment(&cfg.to_value()) + &table_csv(std::slice::from_ref(&report));
    write_text(&layout.smape_csv(), &csv)?;
    Ok(report)
}

/// Certificate constants and their check on noise-free runs for one
/// variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub system: String,
    pub variant: Variant,
    pub grid_states: usize,
    pub grid_inputs: Vec<f64>,
    pub constants: BoundConstants,
    pub asymptotic_bound: f64,
    pub noisy_bound: f64,
    pub t_skip: f64,
    pub trajectories: usize,
    pub holding: usize,
    pub fraction: f64,
    pub worst_ratio: f64,
    pub checks: Vec<CertificateCheck>,
}

/// Noise-free test runs for the certificate. The autonomous variant runs
/// unforced; the others get constant inputs from the grid's input range.
/// Initial conditions are shared across variants.
pub fn test_trajectories(cfg: &RunConfig, spec: &SystemSpec, variant: Variant, dt: f64) -> Result<Vec<Trajectory>> {
    let b = &cfg.bound;
    let mut r = rng::stream(cfg.seed, streams::BOUND);
    let mut out = Vec::with_capacity(b.n_test);
    for _ in 0..b.n_test {
        let x0 = sample_box(&spec.ic_box, &mut r);
        let [lo, hi] = b.input_range;
        let level = if hi > lo { r.random_range(lo..hi) } else { lo };
        let signal = if variant == Variant::Autonomous {
            InputSignal::zero()
        } else {
            InputSignal::constant(level)
        };
        out.push(integrate(spec, &x0, &signal, b.t_final, dt, Method::Rk45)?);
    }
    Ok(out)
}

pub fn bound(cfg: &RunConfig) -> Result<Vec<BoundReport>> {
    let layout = Layout::new(&cfg.paths.out);
    let bundles = load_variants(cfg)?;
    let mut spec = cfg.spec();
    if let Some(bx) = &cfg.bound.ic_box {
        spec.ic_box = bx.clone();
    }
    let noise = NoiseLevels {
        w_bar: 3.0 * cfg.eval.sigma2_process.sqrt(),
        v_bar: 3.0 * cfg.eval.sigma2_measurement.sqrt(),
    };
    let per_axis = cfg.bound.points_per_axis.unwrap_or_else(|| default_points_per_axis(spec.n_x));
    let mut reports = Vec::new();
    for bundle in &bundles {
        let trajs = test_trajectories(cfg, &spec, bundle.variant, bundle.dt)?;
        let inputs = if bundle.variant == Variant::Autonomous {
            vec![0.0]
        } else {
            let [lo, hi] = cfg.bound.input_range;
            linspace(lo, hi, cfg.bound.n_inputs)
        };
        let grid = covering_grid(&spec, &trajs, per_axis, inputs);
        let constants = estimate_constants(bundle, &grid, noise)?;
        let checks = trajs
            .iter()
            .map(|t| check_certificate(bundle, &constants, t, cfg.bound.t_skip))
            .collect::<kkl_core::Result<Vec<_>>>()?;
        let holding = checks.iter().filter(|c| c.holds).count();
        let report = BoundReport {
            system: spec.name.clone(),
            variant: bundle.variant,
            grid_states: grid.len(),
            grid_inputs: grid.inputs.clone(),
            asymptotic_bound: asymptotic_bound(&constants),
            noisy_bound: noisy_bound(&constants),
            constants,
            t_skip: cfg.bound.t_skip,
            trajectories: checks.len(),
            holding,
            fraction: holding as f64 / checks.len() as f64,
            worst_ratio: checks.iter().map(|c| c.max_ratio).fold(0.0, f64::max),
            checks,
        };
        write_json(&layout.bound(bundle.variant), cfg, serde_json::to_value(&report)?)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Reads the SMAPE report of a run directory or of an `eval/smape.json`
/// file, with the config that produced it.
pub fn read_smape(path: &Path) -> Result<(SmapeReport, Value)> {
    let file = if path.is_dir() {
        Layout::new(path).smape_json()
    } else {
        path.to_path_buf()
    };
    if !file.exists() {
        return Err(MissingPrerequisite(format!("SMAPE report ({}), run evaluate first", file.display())).into());
    }
    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    let mut doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
    let report = serde_json::from_value(doc["report"].take()).with_context(|| format!("no report in {}", file.display()))?;
    Ok((report, doc["config"].take()))
}

/// Merged table over the runs in `inputs` (the configured run directory
/// when empty), written to `report.csv`.
pub fn report(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<String> {
    let layout = Layout::new(&cfg.paths.out);
    let sources = if inputs.is_empty() {
        vec![cfg.paths.out.clone()]
    } else {
        inputs.to_vec()
    };
    let mut reports = Vec::new();
    let mut csv = String::new();
    for s in &sources {
        let (r, config) = read_smape(s)?;
        csv.push_str(&config_comment(&config));
        reports.push(r);
    }
    csv.push_str(&table_csv(&reports));
    write_text(&layout.report(), &csv)?;
    Ok(csv)
}
