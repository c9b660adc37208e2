use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kkl_core::analysis::BenchmarkConfig;
use kkl_core::dynamics::{SystemKind, SystemSpec};
use kkl_core::observer::{build_matrices, check_matrices, ObserverMatrices, Variant};
use kkl_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::ConfigError;

/// Everything a pipeline run depends on. Serialized verbatim into every
/// artifact the run writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemKind,
    /// Master seed. Overrides `train.seed`.
    pub seed: u64,
    /// Variants evaluated and certified.
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    /// Replaces the default observer matrices when set.
    pub matrices: Option<ObserverMatrices>,
    pub eval: BenchmarkConfig,
    pub bound: BoundSettings,
    pub paths: Paths,
}

/// Settings of the `bound` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSettings {
    /// Lattice resolution; `None` picks a default from the state dimension.
    pub points_per_axis: Option<usize>,
    /// Noise-free test trajectories checked against the certificate.
    pub n_test: usize,
    pub t_final: f64,
    pub t_skip: f64,
    /// Constant input values on the grid of input-conditioned variants.
    pub n_inputs: usize,
    pub input_range: [f64; 2],
    /// Box for test initial conditions and the grid; defaults to the
    /// system's initial-condition box.
    pub ic_box: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Run directory holding data, checkpoints and reports.
    pub out: PathBuf,
}

/// Mini-batches per epoch in the default CLI configuration.
pub const DESK_BATCHES_PER_EPOCH: usize = 8;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemKind::Duffing,
            seed: 0,
            variants: Variant::ALL.to_vec(),
            // desk scale: bounded mini-batches per epoch for every trainer
            train: TrainConfig {
                max_batches_per_epoch: Some(DESK_BATCHES_PER_EPOCH),
                ..TrainConfig::default()
            },
            matrices: None,
            eval: BenchmarkConfig::default(),
            bound: BoundSettings::default(),
            paths: Paths::default(),
        }
    }
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            points_per_axis: None,
            n_test: 50,
            t_final: 20.0,
            t_skip: 5.0,
            n_inputs: 16,
            input_range: [-1.0, 1.0],
            ic_box: None,
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self { out: PathBuf::from("runs") }
    }
}

/// Command-line overrides applied on top of a config document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// `dotted.key=value` pairs; values parse as JSON, falling back to a
    /// plain string.
    pub set: Vec<String>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults), applies `overrides`
    /// and validates the result.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
            merge(&mut doc, file);
        }
        for kv in &overrides.set {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("override `{kv}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        if let Some(seed) = overrides.seed {
            set_path(&mut doc, "seed", Value::from(seed))?;
        }
        if let Some(out) = &overrides.out {
            set_path(&mut doc, "paths.out", Value::String(out.to_string_lossy().into_owned()))?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| anyhow::Error::new(ConfigError(m));
        self.train().validate().map_err(|e| bad(e.to_string()))?;
        let m = self.matrices().map_err(|e| bad(e.to_string()))?;
        if !check_matrices(&m).hurwitz {
            return Err(bad("observer matrix A is not Hurwitz".into()));
        }
        if self.variants.is_empty() {
            return Err(bad("at least one variant is required".into()));
        }
        if self.eval.n_trials == 0 || self.eval.regimes.is_empty() {
            return Err(bad("evaluation needs trials and regimes".into()));
        }
        let b = &self.bound;
        if b.n_test == 0 || b.n_inputs == 0 || !(b.t_final > b.t_skip && b.t_skip >= 0.0) {
            return Err(bad("bound needs test runs, grid inputs and t_final > t_skip >= 0".into()));
        }
        if b.points_per_axis == Some(0) {
            return Err(bad("bound.points_per_axis must be positive".into()));
        }
        if let Some(bx) = &b.ic_box {
            if bx.len() != self.spec().n_x || bx.iter().any(|[lo, hi]| !(lo <= hi)) {
                return Err(bad("bound.ic_box needs one [lo, hi] per state".into()));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> SystemSpec {
        self.system.spec()
    }

    /// Training settings with the master seed applied.
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Configured matrices, or the defaults for the system.
    pub fn matrices(&self) -> kkl_core::Result<ObserverMatrices> {
        match &self.matrices {
            Some(m) => {
                m.validate()?;
                if m.n_y != self.spec().n_y {
                    return Err(kkl_core::KklError::Dimension("matrix B does not match the outputs".into()));
                }
                Ok(m.clone())
            }
            None => {
                let s = self.spec();
                build_matrices(s.n_x, s.n_y)
            }
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Writes `value` at the dotted `key`, creating intermediate objects.
/// Overlays `patch` on `base`, recursing into objects present in both.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("bad override key `{key}`")).into());
    }
    for part in &parts[..parts.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .ok_or_else(|| ConfigError(format!("`{key}` descends into a non-object")))?
            .entry(part.to_string())
            .or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Default::default());
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| ConfigError(format!("`{key}` descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(set: &[&str]) -> Result<RunConfig> {
        RunConfig::load(
            None,
            &Overrides {
                set: set.iter().map(|s| s.to_string()).collect(),
                ..Default::default()
            },
        )
    }

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let c = with(&["train.epochs=7", "system=van_der_pol", "eval.regimes=[\"zero\"]", "train.hidden=12"]).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.system, SystemKind::VanDerPol);
        assert_eq!(c.eval.regimes.len(), 1);
        assert_eq!(c.train.hidden, Some(12));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for set in ["train.epoch=7", "seed=-1", "train.dt=0", "noequals"] {
            let e = with(&[set]).unwrap_err();
            assert_eq!(crate::failure::exit_code(&e), crate::failure::code::CONFIG, "{set}");
        }
    }

    #[test]
    fn seed_flag_wins_and_reaches_training() {
        let c = RunConfig::load(
            None,
            &Overrides {
                seed: Some(9),
                set: vec!["seed=3".into()],
                out: None,
            },
        )
        .unwrap();
        assert_eq!(c.train().seed, 9);
    }

    #[test]
    fn round_trips_through_json() {
        let c = with(&["matrices={\"n_z\":1,\"n_y\":1,\"a\":[-2.0],\"b\":[1.0]}", "system=linear"]).unwrap();
        let back: RunConfig = serde_json::from_value(c.to_value()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.matrices().unwrap().n_z, 1);
    }

    #[test]
    fn partial_files_keep_the_remaining_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"epochs": 3}, "bound": {"n_test": 4}}"#).unwrap();
        let c = RunConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.max_batches_per_epoch, Some(DESK_BATCHES_PER_EPOCH));
        assert_eq!(c.bound.n_test, 4);
        assert_eq!(c.bound.t_final, BoundSettings::default().t_final);
    }
}
