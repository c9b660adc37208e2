//! Checkpoints, dataset files and the run directory layout.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use kkl_core::dynamics::{InputSignal, SystemKind, SystemSpec, Trajectory};
use kkl_core::networks::{bias_name, weight_name, HyperDims, HyperNet, Injection, InjectionDims, Mlp};
use kkl_core::observer::{prefix, ModelBundle, ObserverMatrices, Variant};
use kkl_core::training::{AutonomousDataset, ForcedDataset, HyperConfig, InjectionConfig, TrainSummary};
use kkl_core::{rng, KklError, ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::container::{Container, CHECKPOINT_MAGIC, DATA_MAGIC};
use crate::failure::{ConfigError, MissingPrerequisite};

pub const FORMAT_VERSION: u32 = 1;

const MATRIX_A: &str = "obs.a";
const MATRIX_B: &str = "obs.b";

/// Files of one run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn autonomous_data(&self) -> PathBuf {
        self.root.join("data/autonomous.kkd")
    }

    pub fn forced_data(&self) -> PathBuf {
        self.root.join("data/forced.kkd")
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data/manifest.json")
    }

    pub fn checkpoint(&self, v: Variant) -> PathBuf {
        self.root.join(format!("checkpoints/{v}.kkc"))
    }

    pub fn metrics(&self, v: Variant) -> PathBuf {
        self.root.join(format!("metrics/{v}.jsonl"))
    }

    pub fn smape_json(&self) -> PathBuf {
        self.root.join("eval/smape.json")
    }

    pub fn smape_csv(&self) -> PathBuf {
        self.root.join("eval/smape.csv")
    }

    pub fn bound(&self, v: Variant) -> PathBuf {
        self.root.join(format!("bound/{v}.json"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.csv")
    }
}

/// Fails with [`MissingPrerequisite`] unless `path` exists.
pub fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingPrerequisite(format!("{what} ({})", path.display())).into())
    }
}

/// Architecture needed to rebuild a bundle from its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dimensions {
    pub n_x: usize,
    pub n_z: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub window: usize,
    pub dt: f64,
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    pub injection: Option<InjectionConfig>,
    pub hyper: Option<HyperConfig>,
}

/// A trained bundle with the config and metrics that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub system: SystemKind,
    pub variant: Variant,
    pub dimensions: Dimensions,
    pub config: Value,
    pub metrics: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn widths(m: &Mlp<f64>) -> Vec<usize> {
    let mut d = vec![m.input_dim()];
    d.extend(m.layer_shapes().iter().map(|s| s.1));
    d
}

fn mlp_from(params: &ParamSet, pre: &str, dims: &[usize]) -> kkl_core::Result<Mlp<f64>> {
    if dims.len() < 2 {
        return Err(KklError::Config(format!("`{pre}` needs at least two widths")));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..dims.len() - 1 {
        let w = params.take(&weight_name(pre, l))?;
        if w.shape() != [dims[l], dims[l + 1]] {
            return Err(KklError::Dimension(format!("`{}` has shape {:?}", weight_name(pre, l), w.shape())));
        }
        let b = params.get(&bias_name(pre, l)).cloned();
        if let Some(b) = &b {
            if b.shape() != [1, dims[l + 1]] {
                return Err(KklError::Dimension(format!("`{}` has shape {:?}", bias_name(pre, l), b.shape())));
            }
        }
        weights.push(w);
        biases.push(b);
    }
    Ok(Mlp {
        weights,
        biases,
        output_activation: false,
    })
}

impl Checkpoint {
    pub fn from_bundle(bundle: &ModelBundle, cfg: &RunConfig, summary: &TrainSummary) -> Self {
        let m = &bundle.matrices;
        let dimensions = Dimensions {
            n_x: bundle.n_x(),
            n_z: bundle.n_z(),
            n_u: bundle.n_u(),
            n_y: m.n_y,
            window: bundle.window,
            dt: bundle.dt,
            encoder: widths(&bundle.encoder),
            decoder: widths(&bundle.decoder),
            injection: bundle.injection.as_ref().map(|_| cfg.train.injection.clone()),
            hyper: bundle.hyper.as_ref().map(|_| cfg.train.hyper.clone()),
        };
        let params = bundle.params();
        let mut tensors: Vec<(String, Tensor)> =
            params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.push((MATRIX_A.into(), Tensor::matrix(m.n_z, m.n_z, m.a.clone()).expect("square A")));
        tensors.push((MATRIX_B.into(), Tensor::matrix(m.n_z, m.n_y, m.b.clone()).expect("B shape")));
        Self {
            format_version: FORMAT_VERSION,
            system: bundle.system,
            variant: bundle.variant,
            dimensions,
            config: cfg.to_value(),
            metrics: serde_json::to_value(summary).expect("summary serializes"),
            tensors,
        }
    }

    /// Network parameters, without the observer matrices.
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, t) in &self.tensors {
            if n != MATRIX_A && n != MATRIX_B {
                p.push(n.clone(), t.clone());
            }
        }
        p
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        serde_json::from_value(self.config.clone()).context("checkpoint config does not parse")
    }

    pub fn summary(&self) -> Result<TrainSummary> {
        serde_json::from_value(self.metrics.clone()).context("checkpoint metrics do not parse")
    }

    pub fn bundle(&self) -> kkl_core::Result<ModelBundle> {
        let d = &self.dimensions;
        let params = self.params();
        let find = |name: &str| {
            self.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| KklError::Config(format!("checkpoint lacks `{name}`")))
        };
        let matrices = ObserverMatrices::new(d.n_z, d.n_y, find(MATRIX_A)?, find(MATRIX_B)?)?;
        let encoder = mlp_from(&params, prefix::ENCODER, &d.encoder)?;
        let decoder = mlp_from(&params, prefix::DECODER, &d.decoder)?;
        let base = ModelBundle::autonomous(self.system, encoder, decoder, matrices, d.window, d.dt)?;
        // architectures are rebuilt with throwaway weights, then overwritten
        let mut scratch = rng::from_seed(0);
        match self.variant {
            Variant::Autonomous => Ok(base),
            Variant::Curriculum => base.with_curriculum(base.encoder.clone(), base.decoder.clone()),
            Variant::Obs => {
                let c = d
                    .injection
                    .as_ref()
                    .ok_or_else(|| KklError::Config("injection checkpoint lacks its widths".into()))?;
                let dims = InjectionDims {
                    n_u: d.n_u,
                    n_z: d.n_z,
                    gru_hidden: c.gru_hidden,
                    context: c.context,
                    phi_hidden: c.phi_hidden,
                    phi_layers: c.phi_layers,
                };
                let mut inj = Injection::new(dims, &mut scratch);
                inj.load(prefix::INJECTION, &params)?;
                base.with_injection(inj)
            }
            Variant::Dyn => {
                let c = d
                    .hyper
                    .as_ref()
                    .ok_or_else(|| KklError::Config("hypernetwork checkpoint lacks its widths".into()))?;
                let mut layers = base.encoder.layer_shapes();
                layers.extend(base.decoder.layer_shapes());
                let dims = HyperDims {
                    n_u: d.n_u,
                    gru_hidden: c.gru_hidden,
                    embedding: c.embedding,
                    backbone: c.backbone,
                    rank: c.rank,
                    scale_init: c.scale_init,
                    layers,
                };
                let mut h = HyperNet::new(&dims, &mut scratch);
                h.load(prefix::HYPER, &params)?;
                base.with_hyper(h)
            }
        }
    }

    pub fn to_container(&self) -> Container {
        let mut h = Map::new();
        h.insert("format_version".into(), Value::from(self.format_version));
        h.insert("system".into(), serde_json::to_value(self.system).expect("system"));
        h.insert("variant".into(), serde_json::to_value(self.variant).expect("variant"));
        h.insert("dimensions".into(), serde_json::to_value(&self.dimensions).expect("dimensions"));
        h.insert("config".into(), self.config.clone());
        h.insert("metrics".into(), self.metrics.clone());
        Container {
            header: h,
            tensors: self.tensors.clone(),
        }
    }

    pub fn from_container(c: Container) -> kkl_core::Result<Self> {
        let format_version: u32 = c.field("format_version")?;
        if format_version != FORMAT_VERSION {
            return Err(KklError::Format {
                offset: 16,
                message: format!("unsupported checkpoint version {format_version}"),
            });
        }
        Ok(Self {
            format_version,
            system: c.field("system")?,
            variant: c.field("variant")?,
            dimensions: c.field("dimensions")?,
            config: c.field("config")?,
            metrics: c.field("metrics")?,
            tensors: c.tensors,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_container().encode(CHECKPOINT_MAGIC)
    }

    pub fn decode(bytes: &[u8]) -> kkl_core::Result<Self> {
        Self::from_container(Container::decode(CHECKPOINT_MAGIC, bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(CHECKPOINT_MAGIC, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(CHECKPOINT_MAGIC, path)?;
        Ok(Self::from_container(c).with_context(|| format!("loading {}", path.display()))?)
    }
}

/// Config fields that determine the generated datasets.
pub fn data_fingerprint(cfg: &RunConfig) -> Value {
    let t = cfg.train();
    serde_json::json!({
        "system": cfg.system,
        "seed": t.seed,
        "n_traj": t.n_traj,
        "n_inp": t.n_inp,
        "t_final": t.t_final,
        "dt": t.dt,
        "window": t.window,
        "input_ranges": t.input_ranges,
        "matrices": cfg.matrices().ok(),
    })
}

fn data_header(kind: &str, cfg: &RunConfig) -> Map<String, Value> {
    let mut h = Map::new();
    h.insert("kind".into(), Value::from(kind));
    h.insert("system".into(), serde_json::to_value(cfg.system).expect("system"));
    h.insert("config".into(), cfg.to_value());
    h
}

/// Rejects a dataset generated under different data settings.
pub fn check_data_config(c: &Container, cfg: &RunConfig, path: &Path) -> Result<()> {
    let theirs: RunConfig = c
        .field("config")
        .with_context(|| format!("dataset {} has no readable config", path.display()))?;
    if data_fingerprint(&theirs) != data_fingerprint(cfg) {
        return Err(ConfigError(format!(
            "dataset {} was generated with different data settings; rerun gen-data",
            path.display()
        ))
        .into());
    }
    Ok(())
}

pub fn autonomous_container(data: &AutonomousDataset, cfg: &RunConfig) -> Container {
    let mut h = data_header("autonomous", cfg);
    h.insert("burn_steps".into(), Value::from(data.burn_steps));
    h.insert("per_trajectory".into(), Value::from(data.per_trajectory));
    h.insert("samples".into(), Value::from(data.len()));
    let n = data.len();
    let mut c = Container::new(h);
    c.push("x", Tensor::matrix(n, data.n_x, data.x.clone()).expect("x"));
    c.push("z", Tensor::matrix(n, data.n_z, data.z.clone()).expect("z"));
    c.push("y", Tensor::matrix(n, data.n_y, data.y.clone()).expect("y"));
    c
}

pub fn autonomous_from(c: &Container) -> kkl_core::Result<AutonomousDataset> {
    let (x, z, y) = (c.tensor("x")?, c.tensor("z")?, c.tensor("y")?);
    let n = x.rows();
    if z.rows() != n || y.rows() != n {
        return Err(KklError::Dimension("autonomous dataset tensors disagree on samples".into()));
    }
    Ok(AutonomousDataset {
        n_x: x.cols(),
        n_z: z.cols(),
        n_y: y.cols(),
        burn_steps: c.field("burn_steps")?,
        per_trajectory: c.field("per_trajectory")?,
        x: x.data().to_vec(),
        z: z.data().to_vec(),
        y: y.data().to_vec(),
    })
}

pub fn forced_container(data: &ForcedDataset, cfg: &RunConfig) -> Container {
    let mut h = data_header("forced", cfg);
    let points = data.trajectories.first().map_or(0, Trajectory::len);
    h.insert("window".into(), Value::from(data.window));
    h.insert("dt".into(), Value::from(data.dt));
    h.insert("points".into(), Value::from(points));
    h.insert("trajectories".into(), Value::from(data.trajectories.len()));
    h.insert("samples".into(), Value::from(data.len()));
    h.insert("signals".into(), serde_json::to_value(&data.signals).expect("signals"));
    let rows = points * data.trajectories.len();
    let cat = |f: fn(&Trajectory) -> &Vec<f64>| data.trajectories.iter().flat_map(|t| f(t).iter().copied()).collect();
    let mut c = Container::new(h);
    c.push("states", Tensor::matrix(rows, data.n_x, cat(|t| &t.states)).expect("states"));
    c.push("inputs", Tensor::matrix(rows, data.n_u, cat(|t| &t.inputs)).expect("inputs"));
    c.push("outputs", Tensor::matrix(rows, data.n_y, cat(|t| &t.outputs)).expect("outputs"));
    c
}

pub fn forced_from(c: &Container, spec: &SystemSpec) -> kkl_core::Result<ForcedDataset> {
    let window: usize = c.field("window")?;
    let dt: f64 = c.field("dt")?;
    let points: usize = c.field("points")?;
    let signals: Vec<InputSignal> = c.field("signals")?;
    let (xs, us, ys) = (c.tensor("states")?, c.tensor("inputs")?, c.tensor("outputs")?);
    let n = signals.len();
    if xs.rows() != n * points || us.rows() != n * points || ys.rows() != n * points {
        return Err(KklError::Dimension("forced dataset tensors disagree with the trajectory count".into()));
    }
    let slice = |t: &Tensor, i: usize| {
        let w = t.cols();
        t.data()[i * points * w..(i + 1) * points * w].to_vec()
    };
    let trajectories = (0..n)
        .map(|i| Trajectory {
            dt,
            n_x: xs.cols(),
            n_u: us.cols(),
            n_y: ys.cols(),
            times: (0..points).map(|k| k as f64 * dt).collect(),
            states: slice(xs, i),
            inputs: slice(us, i),
            outputs: slice(ys, i),
        })
        .collect();
    ForcedDataset::from_trajectories(spec, trajectories, signals, window)
}

/// Loads a dataset file and checks it was generated with `cfg`'s data
/// settings.
pub fn load_data(path: &Path, cfg: &RunConfig) -> Result<Container> {
    require(path, "dataset, run gen-data first")?;
    let c = Container::load(DATA_MAGIC, path)?;
    check_data_config(&c, cfg, path)?;
    Ok(c)
}

/// Writes `value` as pretty JSON with the run config embedded under
/// `config`.
pub fn write_json(path: &Path, cfg: &RunConfig, value: Value) -> Result<()> {
    let mut obj = Map::new();
    obj.insert("config".into(), cfg.to_value());
    match value {
        Value::Object(m) => obj.extend(m),
        other => {
            obj.insert("result".into(), other);
        }
    }
    write_text(path, &(serde_json::to_string_pretty(&Value::Object(obj))? + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `# config: {...}` line prefixed to CSV artifacts.
pub fn config_comment(cfg: &Value) -> String {
    format!("# config: {}\n", serde_json::to_string(cfg).expect("config serializes"))
}

pub fn ensure_variant(ck: &Checkpoint, v: Variant, path: &Path) -> Result<()> {
    ensure!(
        ck.variant == v,
        ConfigError(format!("{} holds a {} checkpoint, expected {v}", path.display(), ck.variant))
    );
    Ok(())
}
