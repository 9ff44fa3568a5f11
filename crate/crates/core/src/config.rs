//! Experiment configuration files.
//!
//! A config is one JSON document with the sections `dataset`, `target`,
//! `circuit`, `mapping`, `optimizer` and `run`. Unknown keys are rejected.
//! `key.path=value` overrides are applied to the parsed document before it is
//! validated; the value is read as JSON when possible and as a string
//! otherwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::mapping::{MlpMapping, MpsMapping};
use crate::qnn::CircuitSpec;
use crate::target::{param_count, LayerSpec, TargetNetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl DatasetName {
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetName::Mnist => [1, 28, 28],
            DatasetName::Cifar10 => [3, 32, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    pub data_dir: PathBuf,
    /// Original class ids to keep; all ten when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    /// Training examples kept per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_cap: Option<usize>,
    /// Test examples kept per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_class_cap: Option<usize>,
}

impl DatasetConfig {
    pub fn class_count(&self) -> usize {
        self.classes.as_ref().map_or(10, Vec::len)
    }
}

/// Target architecture: a preset name, an explicit layer list, or (for
/// parameter accounting only) a bare parameter count.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitConfig {
    /// Qubits per sub-circuit. When absent, `⌈log₂ m⌉` qubits are split
    /// near-evenly into two sub-circuits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Vec<usize>>,
    pub layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingKind {
    Mps,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingConfig {
    pub kind: MappingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bond_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

pub const DEFAULT_BOND_DIM: usize = 4;
pub const DEFAULT_HIDDEN: usize = 20;

impl MappingConfig {
    pub fn bond_dim(&self) -> usize {
        self.bond_dim.unwrap_or(DEFAULT_BOND_DIM)
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or(DEFAULT_HIDDEN)
    }

    /// Trainable mapping parameters for `n_qubits` basis bits.
    pub fn param_count(&self, n_qubits: usize) -> usize {
        match self.kind {
            MappingKind::Mps => MpsMapping::param_count_for(n_qubits + 1, self.bond_dim()),
            MappingKind::Mlp => MlpMapping::param_count_for(n_qubits + 1, self.hidden()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr_theta")]
    pub lr_theta: f64,
    #[serde(default = "default_lr_mapping")]
    pub lr_mapping: f64,
}

fn default_lr_theta() -> f64 {
    5e-3
}

fn default_lr_mapping() -> f64 {
    1e-3
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_theta: default_lr_theta(),
            lr_mapping: default_lr_mapping(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Multiply probabilities by `2^N` and clamp to `[0, 1]` before mapping.
    #[serde(default = "yes")]
    pub prob_scale: bool,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Evaluate on the test split every this many epochs; 0 disables it.
    #[serde(default = "one")]
    pub eval_every: u64,
    /// Record elapsed wall time in the metrics; when off the column is 0 and
    /// metrics files are reproducible byte for byte.
    #[serde(default = "yes")]
    pub record_wall_time: bool,
}

fn default_epochs() -> u64 {
    10
}

fn default_batch_size() -> usize {
    64
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn yes() -> bool {
    true
}

fn one() -> u64 {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            output_dir: default_output_dir(),
            prob_scale: true,
            checkpoint_every: 0,
            eval_every: 1,
            record_wall_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    pub target: TargetConfig,
    pub circuit: CircuitConfig,
    pub mapping: MappingConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub run: RunConfig,
}

/// Resolved target: either a trainable architecture or a bare count.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetModel {
    Network(TargetNetworkSpec),
    CountOnly(usize),
}

impl TargetModel {
    pub fn param_count(&self) -> Result<usize> {
        match self {
            TargetModel::Network(spec) => param_count(spec),
            TargetModel::CountOnly(m) => Ok(*m),
        }
    }
}

/// Smallest `N` with `2^N ≥ m`.
pub fn qubits_for(m: usize) -> usize {
    m.max(1).next_power_of_two().trailing_zeros() as usize
}

impl TrainConfig {
    pub fn target_model(&self) -> Result<TargetModel> {
        let classes = self.dataset.class_count();
        let t = &self.target;
        match (&t.preset, &t.layers, t.param_count) {
            (Some(name), None, None) => {
                let spec = TargetNetworkSpec::preset(name, classes)?;
                if spec.input_shape != self.dataset.name.input_shape() {
                    return Err(field_err(
                        "target.preset",
                        format!(
                            "preset '{name}' takes {:?} inputs but the dataset provides {:?}",
                            spec.input_shape,
                            self.dataset.name.input_shape()
                        ),
                    ));
                }
                Ok(TargetModel::Network(spec))
            }
            (None, Some(layers), None) => {
                let spec = TargetNetworkSpec {
                    input_shape: self.dataset.name.input_shape(),
                    layers: layers.clone(),
                    class_count: classes,
                };
                spec.validate().map_err(|e| field_err("target.layers", e.to_string()))?;
                Ok(TargetModel::Network(spec))
            }
            (None, None, Some(m)) if m > 0 => Ok(TargetModel::CountOnly(m)),
            _ => Err(field_err(
                "target",
                "give exactly one of `preset`, `layers` or a positive `param_count`".into(),
            )),
        }
    }

    pub fn target_spec(&self) -> Result<TargetNetworkSpec> {
        match self.target_model()? {
            TargetModel::Network(spec) => Ok(spec),
            TargetModel::CountOnly(_) => Err(field_err(
                "target.param_count",
                "a bare parameter count can be used for accounting but not for training".into(),
            )),
        }
    }

    pub fn circuit_spec(&self) -> Result<CircuitSpec> {
        let m = self.target_model()?.param_count()?;
        let bound = qubits_for(m);
        let spec = match &self.circuit.splits {
            Some(splits) => CircuitSpec::new(splits.clone(), self.circuit.layers)
                .map_err(|e| field_err("circuit.splits", e.to_string()))?,
            None => CircuitSpec::near_even(bound.max(1), bound.clamp(1, 2), self.circuit.layers)?,
        };
        if spec.total_qubits() < bound {
            return Err(field_err(
                "circuit.splits",
                format!(
                    "{} qubits give {} basis states but the target has m = {m} weights; at least ⌈log₂ m⌉ = {bound} qubits are needed",
                    spec.total_qubits(),
                    1u128 << spec.total_qubits()
                ),
            ));
        }
        if spec.total_qubits() > 30 {
            return Err(field_err(
                "circuit.splits",
                format!("{} qubits is too many to simulate", spec.total_qubits()),
            ));
        }
        Ok(spec)
    }

    /// Checks every constraint and fills derived defaults.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(classes) = &self.dataset.classes {
            if classes.len() < 2 {
                return Err(field_err("dataset.classes", "at least two classes are needed".into()));
            }
            if let Some(c) = classes.iter().find(|&&c| c > 9) {
                return Err(field_err("dataset.classes", format!("class {c} does not exist")));
            }
            let mut sorted = classes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != classes.len() {
                return Err(field_err("dataset.classes", "classes repeat".into()));
            }
        }
        let circuit = self.circuit_spec()?;
        self.circuit.splits = Some(circuit.splits().to_vec());
        match self.mapping.kind {
            MappingKind::Mps => {
                if self.mapping.hidden.is_some() {
                    return Err(field_err("mapping.hidden", "only valid for kind = mlp".into()));
                }
                if self.mapping.bond_dim() == 0 {
                    return Err(field_err("mapping.bond_dim", "must be at least 1".into()));
                }
                self.mapping.bond_dim = Some(self.mapping.bond_dim());
            }
            MappingKind::Mlp => {
                if self.mapping.bond_dim.is_some() {
                    return Err(field_err("mapping.bond_dim", "only valid for kind = mps".into()));
                }
                if self.mapping.hidden() == 0 {
                    return Err(field_err("mapping.hidden", "must be at least 1".into()));
                }
                self.mapping.hidden = Some(self.mapping.hidden());
            }
        }
        for (key, lr) in [
            ("optimizer.lr_theta", self.optimizer.lr_theta),
            ("optimizer.lr_mapping", self.optimizer.lr_mapping),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(field_err(key, format!("learning rate {lr} must be finite and non-negative")));
            }
        }
        if self.run.batch_size == 0 {
            return Err(field_err("run.batch_size", "must be at least 1".into()));
        }
        Ok(self)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

fn field_err(key: &str, msg: String) -> Error {
    Error::Config(format!("`{key}`: {msg}"))
}

const RUN_KEYS: [&str; 8] = [
    "epochs",
    "batch_size",
    "seed",
    "output_dir",
    "prob_scale",
    "checkpoint_every",
    "eval_every",
    "record_wall_time",
];

/// Bare run and optimizer keys such as `epochs` stand for `run.epochs`.
fn shorthand(path: &str) -> String {
    if RUN_KEYS.contains(&path) {
        format!("run.{path}")
    } else if path == "lr_theta" || path == "lr_mapping" {
        format!("optimizer.{path}")
    } else {
        path.to_string()
    }
}

/// Sets `path` (dot-separated) in a JSON document.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let path = shorthand(path);
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key '{path}' has an empty segment")));
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override '{path}': `{key}` is not inside an object")))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override '{path}' does not address an object field")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn typed(doc: Value, origin: &str) -> Result<TrainConfig> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{origin}: at `{path}`: {}", e.into_inner()))
    })
}

/// Parses config text, applies overrides, validates and fills defaults.
pub fn parse_config_str(text: &str, origin: &str, overrides: &[String]) -> Result<TrainConfig> {
    // The first pass reports type errors with line and column.
    let mut de = serde_json::Deserializer::from_str(text);
    let first: std::result::Result<TrainConfig, _> = serde_path_to_error::deserialize(&mut de);
    if overrides.is_empty() {
        return first
            .map_err(|e| {
                let path = e.path().to_string();
                Error::Config(format!("{origin}: at `{path}`: {}", e.into_inner()))
            })?
            .resolve();
    }
    let mut doc: Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    typed(doc, origin)?.resolve()
}

pub fn parse_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string(), overrides)
}

/// Re-validates a config echoed into a checkpoint.
pub fn config_from_json(doc: Value) -> Result<TrainConfig> {
    typed(doc, "config echo")?.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"name": "mnist", "data_dir": "data/mnist"},
        "target": {"preset": "mnist-dense"},
        "circuit": {"layers": 13},
        "mapping": {"kind": "mps"}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str(MINIMAL, "inline", &[]).unwrap();
        assert_eq!(cfg.circuit.splits, Some(vec![6, 7]));
        assert_eq!(cfg.mapping.bond_dim, Some(DEFAULT_BOND_DIM));
        assert_eq!(cfg.run.batch_size, 64);
        assert_eq!(cfg.optimizer.lr_theta, 5e-3);
        assert_eq!(cfg.optimizer.lr_mapping, 1e-3);
        assert!(cfg.run.prob_scale);
        assert_eq!(cfg.target_model().unwrap().param_count().unwrap(), 6370);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let text = MINIMAL.replace(r#""kind": "mps""#, r#""kind": "mps", "bond": 3"#);
        let err = parse_config_str(&text, "inline", &[]).unwrap_err().to_string();
        assert!(err.contains("mapping"), "{err}");
        assert!(err.contains("bond"), "{err}");
    }

    #[test]
    fn type_mismatch_names_the_key_and_line() {
        let text = MINIMAL.replace(r#""layers": 13"#, r#""layers": "many""#);
        let err = parse_config_str(&text, "inline", &[]).unwrap_err().to_string();
        assert!(err.contains("circuit.layers"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn too_few_qubits_reports_the_bound() {
        let err = parse_config_str(MINIMAL, "inline", &["circuit.splits=[6,6]".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("13"), "{err}");
        assert!(err.contains("6370"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = parse_config_str(
            MINIMAL,
            "inline",
            &["run.seed=42".into(), "run.output_dir=/tmp/x".into(), "dataset.classes=[0,1]".into()],
        )
        .unwrap();
        assert_eq!(cfg.run.seed, 42);
        assert_eq!(cfg.run.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.target_model().unwrap().param_count().unwrap(), 6298);
        assert!(parse_config_str(MINIMAL, "inline", &["run.seed".into()]).is_err());
        let short = parse_config_str(MINIMAL, "inline", &["epochs=0".into(), "lr_theta=0.01".into()]).unwrap();
        assert_eq!(short.run.epochs, 0);
        assert_eq!(short.optimizer.lr_theta, 0.01);
        assert!(parse_config_str(MINIMAL, "inline", &["run.nope=1".into()]).is_err());
    }

    #[test]
    fn echo_roundtrips() {
        let cfg = parse_config_str(MINIMAL, "inline", &["run.seed=42".into()]).unwrap();
        let back = config_from_json(cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn target_forms_are_exclusive() {
        let text = MINIMAL.replace(
            r#"{"preset": "mnist-dense"}"#,
            r#"{"preset": "mnist-dense", "param_count": 10}"#,
        );
        assert!(parse_config_str(&text, "inline", &[]).is_err());
        let text = MINIMAL.replace(r#"{"preset": "mnist-dense"}"#, r#"{"param_count": 285226}"#);
        let cfg = parse_config_str(&text, "inline", &[]).unwrap();
        assert_eq!(cfg.circuit.splits, Some(vec![9, 10]));
        assert!(cfg.target_spec().is_err());
    }

    #[test]
    fn layer_lists_are_validated() {
        let text = MINIMAL.replace(
            r#"{"preset": "mnist-dense"}"#,
            r#"{"layers": [{"type": "flatten"}, {"type": "dense", "inputs": 784, "outputs": 10}]}"#,
        );
        let cfg = parse_config_str(&text, "inline", &[]).unwrap();
        assert_eq!(cfg.target_model().unwrap().param_count().unwrap(), 7850);
        let bad = text.replace("784", "783");
        let err = parse_config_str(&bad, "inline", &[]).unwrap_err().to_string();
        assert!(err.contains("target.layers"), "{err}");
    }

    #[test]
    fn qubit_bound() {
        assert_eq!(qubits_for(1), 0);
        assert_eq!(qubits_for(2), 1);
        assert_eq!(qubits_for(6370), 13);
        assert_eq!(qubits_for(8192), 13);
        assert_eq!(qubits_for(285226), 19);
    }
}
