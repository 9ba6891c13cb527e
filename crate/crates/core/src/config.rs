//! Run configuration: TOML in, validated [`Config`] out.
//!
//! Every key has a documented default; unknown keys are rejected rather
//! than ignored. Validation collects all violations before failing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::data::CalibrationSource;
use crate::error::{Error, Result};
use crate::metrics::UNITS_PER_DAY;
use crate::model::ModelSpec;
use crate::sensitivity::UnlabeledLoss;
use crate::strategy::{PsaParams, PsaVariant, Strategy};

/// Environment variable naming the directory that holds `fmnist/` and `mnist/`.
pub const DATA_DIR_ENV: &str = "FEDPSA_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedasync")]
    FedAsync,
    #[serde(rename = "fedbuff")]
    FedBuff,
    #[default]
    #[serde(rename = "fedpsa")]
    FedPsa,
    #[serde(rename = "fedpsa_no_t")]
    FedPsaNoT,
    #[serde(rename = "fedpsa_no_s")]
    FedPsaNoS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Linear,
    Mlp { hidden: usize },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Linear
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        in_dim: usize,
        per_class: usize,
    },
    /// Fashion-MNIST IDX files under `$FEDPSA_DATA_DIR/fmnist`.
    Fmnist,
    /// MNIST IDX files under `$FEDPSA_DATA_DIR/mnist`.
    Mnist,
    /// An explicit IDX image/label file pair.
    Idx { images: PathBuf, labels: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            classes: 10,
            in_dim: 20,
            per_class: 200,
        }
    }
}

impl DatasetConfig {
    pub fn name(&self) -> String {
        match self {
            DatasetConfig::Synthetic { .. } => "synthetic".into(),
            DatasetConfig::Fmnist => "fmnist".into(),
            DatasetConfig::Mnist => "mnist".into(),
            DatasetConfig::Idx { images, .. } => images
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "idx".into()),
        }
    }

    /// `(in_dim, n_classes)` when known without reading files.
    pub fn shape(&self) -> Option<(usize, usize)> {
        match *self {
            DatasetConfig::Synthetic { classes, in_dim, .. } => Some((in_dim, classes)),
            DatasetConfig::Fmnist | DatasetConfig::Mnist => Some((784, 10)),
            DatasetConfig::Idx { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyKind {
    #[default]
    Uniform,
    LongTail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub kind: LatencyKind,
    pub lo: u64,
    pub hi: u64,
    /// Pareto shape of the long-tail law.
    pub tail_shape: f64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            kind: LatencyKind::Uniform,
            lo: 10,
            hi: 500,
            tail_shape: 1.5,
        }
    }
}

impl LatencyConfig {
    pub fn label(&self) -> String {
        let kind = match self.kind {
            LatencyKind::Uniform => "uniform",
            LatencyKind::LongTail => "long_tail",
        };
        format!("{kind}_{}_{}", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub source: CalibrationSource,
    pub size: usize,
    pub unlabeled_loss: UnlabeledLoss,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            source: CalibrationSource::Gaussian,
            size: crate::data::DEFAULT_CALIBRATION_SIZE,
            unlabeled_loss: UnlabeledLoss::SelfLabel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub enabled: bool,
    pub batch_size: usize,
    pub bin_width: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            enabled: false,
            batch_size: 256,
            bin_width: 0.1,
        }
    }
}

/// A complete, validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub test_fraction: f64,
    pub alpha: f64,
    pub n_clients: usize,
    pub concurrency_rate: f64,
    pub latency: LatencyConfig,
    pub horizon_days: f64,
    /// Virtual time units between test evaluations.
    pub eval_every: u64,
    #[serde(rename = "L_s")]
    pub buffer_size: usize,
    #[serde(rename = "L_q")]
    pub queue_size: usize,
    pub gamma: f64,
    pub delta: f64,
    /// FedPSA only: when false every aggregation stays uniform.
    pub thermometer: bool,
    pub k: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub fedasync_a0: f64,
    pub fedavg_weight_by_size: bool,
    pub calibration: CalibrationConfig,
    pub probe: ProbeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            strategy: StrategyKind::FedPsa,
            seed: 0,
            model: ModelConfig::Linear,
            dataset: DatasetConfig::default(),
            test_fraction: 0.1,
            alpha: 1.0,
            n_clients: 50,
            concurrency_rate: 0.2,
            latency: LatencyConfig::default(),
            horizon_days: 10.0,
            eval_every: 8_640,
            buffer_size: 5,
            queue_size: 50,
            gamma: 5.0,
            delta: 0.5,
            thermometer: true,
            k: 16,
            lr: 0.01,
            lr_decay: 0.999,
            epochs: 5,
            batch_size: 64,
            fedasync_a0: 0.6,
            fedavg_weight_by_size: false,
            calibration: CalibrationConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl Config {
    pub fn model_spec(&self, in_dim: usize, n_classes: usize) -> ModelSpec {
        match self.model {
            ModelConfig::Linear => ModelSpec::linear(in_dim, n_classes),
            ModelConfig::Mlp { hidden } => ModelSpec::mlp(in_dim, hidden, n_classes),
        }
    }

    pub fn strategy(&self) -> Strategy {
        let psa = |variant| {
            Strategy::FedPsa(PsaParams {
                buffer: self.buffer_size,
                queue: self.queue_size,
                gamma: self.gamma,
                delta: self.delta,
                variant,
                thermometer: self.thermometer,
            })
        };
        match self.strategy {
            StrategyKind::FedAvg => Strategy::FedAvg {
                weight_by_size: self.fedavg_weight_by_size,
            },
            StrategyKind::FedAsync => Strategy::FedAsync { a0: self.fedasync_a0 },
            StrategyKind::FedBuff => Strategy::FedBuff {
                buffer: self.buffer_size,
            },
            StrategyKind::FedPsa => psa(PsaVariant::Full),
            StrategyKind::FedPsaNoT => psa(PsaVariant::NoTemperature),
            StrategyKind::FedPsaNoS => psa(PsaVariant::NoSensitivity),
        }
    }

    pub fn horizon_units(&self) -> u64 {
        (self.horizon_days * UNITS_PER_DAY as f64).round() as u64
    }

    /// Short content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn from_toml(text: &str) -> Result<Config> {
        validate_config(parse_raw(text)?)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml(&text)
    }
}

pub fn parse_raw(text: &str) -> Result<Value> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
    Ok(Value::Table(table))
}

/// Deserializes a raw TOML tree and checks every constraint, reporting all violations.
pub fn validate_config(raw: Value) -> Result<Config> {
    let config: Config = raw
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
    let mut errors = Vec::new();
    let mut need = |ok: bool, msg: String| {
        if !ok {
            errors.push(msg);
        }
    };
    let c = &config;
    need(c.delta > 0.0, format!("delta must be > 0 (got {})", c.delta));
    need(c.gamma >= 0.0, format!("gamma must be >= 0 (got {})", c.gamma));
    need(c.buffer_size >= 1, "L_s must be >= 1".into());
    need(c.queue_size >= 1, "L_q must be >= 1".into());
    need(c.k >= 1, "k must be >= 1".into());
    need(
        c.concurrency_rate > 0.0 && c.concurrency_rate <= 1.0,
        format!("concurrency_rate must be in (0, 1] (got {})", c.concurrency_rate),
    );
    need(c.alpha > 0.0 && c.alpha.is_finite(), format!("alpha must be > 0 (got {})", c.alpha));
    need(c.n_clients >= 1, "n_clients must be >= 1".into());
    need(
        c.horizon_days >= 0.0 && c.horizon_days.is_finite(),
        format!("horizon_days must be >= 0 (got {})", c.horizon_days),
    );
    need(c.eval_every >= 1, "eval_every must be >= 1".into());
    need(c.lr > 0.0, format!("lr must be > 0 (got {})", c.lr));
    need(
        c.lr_decay > 0.0 && c.lr_decay <= 1.0,
        format!("lr_decay must be in (0, 1] (got {})", c.lr_decay),
    );
    need(c.epochs >= 1, "epochs must be >= 1".into());
    need(c.batch_size >= 1, "batch_size must be >= 1".into());
    need(c.fedasync_a0 > 0.0, format!("fedasync_a0 must be > 0 (got {})", c.fedasync_a0));
    need(
        c.test_fraction > 0.0 && c.test_fraction < 1.0,
        format!("test_fraction must be in (0, 1) (got {})", c.test_fraction),
    );
    need(
        c.latency.lo >= 1 && c.latency.hi >= c.latency.lo,
        format!("latency needs 1 <= lo <= hi (got {}..{})", c.latency.lo, c.latency.hi),
    );
    need(c.latency.tail_shape > 0.0, "latency.tail_shape must be > 0".into());
    need(c.calibration.size >= 1, "calibration.size must be >= 1".into());
    need(c.probe.batch_size >= 1, "probe.batch_size must be >= 1".into());
    need(c.probe.bin_width > 0.0, "probe.bin_width must be > 0".into());
    if let ModelConfig::Mlp { hidden } = c.model {
        need(hidden >= 1, "model.hidden must be >= 1".into());
    }
    if let DatasetConfig::Synthetic {
        classes,
        in_dim,
        per_class,
    } = c.dataset
    {
        need(
            classes >= 1 && in_dim >= 1 && per_class >= 1,
            "synthetic dataset counts must be >= 1".into(),
        );
    }
    if let Some((in_dim, classes)) = c.dataset.shape() {
        let d = c.model_spec(in_dim, classes).param_count();
        need(c.k <= d, format!("k = {} exceeds parameter count d = {d}", c.k));
    }
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(errors))
    }
}

/// Sets `value` at a dotted `path` inside a TOML table, creating tables as needed.
pub fn set_dotted(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("override {path}: {part} is not a table")]))?;
        if i + 1 == parts.len() {
            table.insert((*part).to_string(), value);
            return Ok(());
        }
        node = table
            .entry((*part).to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
    }
    Ok(())
}

/// Parses `KEY=VAL`; `VAL` is read as a TOML value, falling back to a bare string.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, val) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override {spec:?} is not KEY=VAL")]))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {val}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(val.to_string()));
    Ok((key.trim().to_string(), parsed))
}

pub const MAX_MATRIX_RUNS: usize = 10_000;

/// A base configuration and named sweep axes (dotted keys with value lists).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentMatrix {
    pub name: String,
    pub base: Value,
    pub axes: Vec<(String, Vec<Value>)>,
}

impl ExperimentMatrix {
    /// Reads `name`, a `[base]` table and a `[sweep]` table of arrays.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let name = match table.remove("name") {
            Some(Value::String(s)) => s,
            None => "sweep".into(),
            Some(other) => return Err(Error::Config(vec![format!("name must be a string, got {other}")])),
        };
        let base = table
            .remove("base")
            .unwrap_or_else(|| Value::Table(toml::Table::new()));
        let mut axes = Vec::new();
        if let Some(sweep) = table.remove("sweep") {
            let Value::Table(sweep) = sweep else {
                return Err(Error::Config(vec!["[sweep] must be a table".into()]));
            };
            for (key, values) in flatten_axes(sweep, "") {
                axes.push((key, values?));
            }
        }
        if let Some(extra) = table.keys().next() {
            return Err(Error::Config(vec![format!(
                "unknown top-level key {extra:?} in matrix (expected name, base, sweep)"
            )]));
        }
        Ok(ExperimentMatrix { name, base, axes })
    }

    pub fn size(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    /// Cartesian expansion; the first axis varies slowest.
    pub fn expand(&self, overrides: &[(String, Value)]) -> Result<Vec<Config>> {
        let mut out = Vec::with_capacity(self.size());
        let mut idx = vec![0usize; self.axes.len()];
        if self.axes.iter().any(|(_, v)| v.is_empty()) {
            return Ok(out);
        }
        loop {
            let mut cell = self.base.clone();
            for ((key, values), &i) in self.axes.iter().zip(&idx) {
                set_dotted(&mut cell, key, values[i].clone())?;
            }
            for (key, value) in overrides {
                set_dotted(&mut cell, key, value.clone())?;
            }
            out.push(validate_config(cell)?);
            let mut axis = self.axes.len();
            loop {
                if axis == 0 {
                    return Ok(out);
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < self.axes[axis].1.len() {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }
}

fn flatten_axes(table: toml::Table, prefix: &str) -> Vec<(String, Result<Vec<Value>>)> {
    let mut out = Vec::new();
    for (key, value) in table {
        let path = if prefix.is_empty() {
            key
        } else {
            format!("{prefix}.{key}")
        };
        match value {
            Value::Array(values) => out.push((path, Ok(values))),
            Value::Table(inner) => out.extend(flatten_axes(inner, &path)),
            other => out.push((
                path.clone(),
                Err(Error::Config(vec![format!("sweep axis {path} must be an array, got {other}")])),
            )),
        }
    }
    out
}

/// Finds an IDX image/label pair in `dir` under the usual file names.
pub fn locate_idx_pair(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    const STEMS: [(&str, &str); 3] = [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("fmnist-images-idx3-ubyte", "fmnist-labels-idx1-ubyte"),
        ("images-idx3-ubyte", "labels-idx1-ubyte"),
    ];
    let mut tried = Vec::new();
    for (img, lab) in STEMS {
        for ext in ["", ".gz"] {
            let (i, l) = (dir.join(format!("{img}{ext}")), dir.join(format!("{lab}{ext}")));
            if i.is_file() && l.is_file() {
                return Ok((i, l));
            }
            tried.push(i.display().to_string());
        }
    }
    Err(Error::Setup(format!(
        "no IDX files found; expected one of:\n    {}\n  (set {DATA_DIR_ENV} to the directory containing fmnist/ and mnist/)",
        tried.join("\n    ")
    )))
}

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}
