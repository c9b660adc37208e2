use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::smape::{smape, SMAPE_CAP};
use crate::dynamics::{add_noise, integrate_with_process_noise, sample_input, InputKind, InputRanges, Method};
use crate::error::{KklError, Result};
use crate::observer::{run_observer, ModelBundle, Variant};
use crate::rng::{self, streams};
use crate::training::sample_box;

/// Benchmark protocol settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_trials: usize,
    pub sigma2_process: f64,
    pub sigma2_measurement: f64,
    /// Start of the SMAPE window in seconds.
    pub t_skip: f64,
    pub t_final: f64,
    pub regimes: Vec<InputKind>,
    pub input_ranges: InputRanges,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_trials: 100,
            sigma2_process: 0.01,
            sigma2_measurement: 0.01,
            t_skip: 5.0,
            t_final: 50.0,
            regimes: InputKind::ALL.to_vec(),
            input_ranges: InputRanges::default(),
        }
    }
}

/// SMAPE of one variant in one regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmapeCell {
    pub variant: Variant,
    pub regime: InputKind,
    pub mean: f64,
    /// Per-trial SMAPE in trial order.
    pub trials: Vec<f64>,
    /// Trials whose observer failed and were recorded at the cap.
    pub diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmapeReport {
    pub system: String,
    pub seed: u64,
    pub config: BenchmarkConfig,
    pub cells: Vec<SmapeCell>,
}

impl SmapeReport {
    pub fn cell(&self, variant: Variant, regime: InputKind) -> Option<&SmapeCell> {
        self.cells.iter().find(|c| c.variant == variant && c.regime == regime)
    }

    pub fn mean(&self, variant: Variant, regime: InputKind) -> Option<f64> {
        self.cell(variant, regime).map(|c| c.mean)
    }
}

/// Random stream of one trial in one regime.
pub fn trial_stream(regime: InputKind, trial: usize) -> u64 {
    let r = InputKind::ALL.iter().position(|&k| k == regime).unwrap_or(0) as u64;
    streams::TRIAL_BASE + (r << 24) + trial as u64
}

/// Runs every bundle on the same noisy trials of every regime.
///
/// Each trial draws an initial condition and an input, simulates the truth
/// with process noise, adds measurement noise to the outputs, and runs
/// every observer from `ẑ(0) = 0`. Failed runs score [`SMAPE_CAP`].
pub fn run_benchmark(bundles: &[ModelBundle], cfg: &BenchmarkConfig, seed: u64) -> Result<SmapeReport> {
    let first = bundles
        .first()
        .ok_or_else(|| KklError::Config("benchmark needs at least one bundle".into()))?;
    for b in bundles {
        if b.system != first.system || b.dt != first.dt {
            return Err(KklError::Config("benchmark bundles must share system and step".into()));
        }
    }
    if cfg.n_trials == 0 {
        return Err(KklError::Config("benchmark needs at least one trial".into()));
    }
    let spec = first.system.spec();
    let mut cells: Vec<SmapeCell> = Vec::new();
    for &regime in &cfg.regimes {
        let mut scores = vec![Vec::with_capacity(cfg.n_trials); bundles.len()];
        let mut diverged = vec![0usize; bundles.len()];
        for trial in 0..cfg.n_trials {
            let mut r = rng::stream(seed, trial_stream(regime, trial));
            let x0 = sample_box(&spec.ic_box, &mut r);
            let signal = sample_input(regime, &cfg.input_ranges, &mut r);
            let truth = integrate_with_process_noise(
                &spec,
                &x0,
                &signal,
                cfg.t_final,
                first.dt,
                Method::Rk45,
                cfg.sigma2_process,
                &mut r,
            )?;
            let measured = add_noise(&truth, cfg.sigma2_measurement, &mut r)?;
            let z0 = vec![0.0; first.n_z()];
            for (i, b) in bundles.iter().enumerate() {
                let score = run_observer(b, &measured, &z0)
                    .and_then(|est| smape(&truth.states, &est.states, spec.n_x, &truth.times, cfg.t_skip));
                match score {
                    Ok(s) if s.is_finite() => scores[i].push(s.min(SMAPE_CAP)),
                    Ok(_) | Err(KklError::NonFinite(_)) => {
                        scores[i].push(SMAPE_CAP);
                        diverged[i] += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        for (i, b) in bundles.iter().enumerate() {
            let trials = std::mem::take(&mut scores[i]);
            let mean = trials.iter().sum::<f64>() / trials.len() as f64;
            cells.push(SmapeCell {
                variant: b.variant,
                regime,
                mean,
                trials,
                diverged: diverged[i],
            });
        }
    }
    Ok(SmapeReport {
        system: spec.name.clone(),
        seed,
        config: cfg.clone(),
        cells,
    })
}

/// Table with one row per variant and one column per system and regime.
/// Missing cells are left empty.
pub fn table_csv(reports: &[SmapeReport]) -> String {
    let mut columns: Vec<(usize, InputKind)> = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        for k in InputKind::ALL {
            if r.cells.iter().any(|c| c.regime == k) {
                columns.push((i, k));
            }
        }
    }
    let mut out = String::from("variant");
    for &(i, k) in &columns {
        let _ = write!(out, ",{}/{}", reports[i].system, k.as_str());
    }
    out.push('\n');
    for v in Variant::ALL {
        if !reports.iter().any(|r| r.cells.iter().any(|c| c.variant == v)) {
            continue;
        }
        out.push_str(v.as_str());
        for &(i, k) in &columns {
            out.push(',');
            if let Some(m) = reports[i].mean(v, k) {
                let _ = write!(out, "{m:.4}");
            }
        }
        out.push('\n');
    }
    out
}
