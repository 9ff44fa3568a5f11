//! Versioned, checksummed checkpoints.
//!
//! File layout: one header line `qtrain-checkpoint v<version> sha256:<hex>`
//! followed by a JSON body. The checksum covers the body bytes exactly.
//! Every array is stored with its name and shape so a reader can validate
//! it without knowing the flat layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{OptimizerConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::mapping::{Mapping, MlpMapping, MpsMapping};
use crate::optim::AdamState;
use crate::qnn::{CircuitSpec, ThetaParams};
use crate::target::TargetNetworkSpec;
use crate::trainer::TrainState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "qtrain-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn new(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Self {
        Self { name: name.into(), shape, data: data.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MappingRecord {
    kind: String,
    /// MPS sites or MLP inputs.
    inputs: usize,
    /// Bond dimension or hidden width.
    width: usize,
    tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Body {
    format_version: u32,
    epoch: u64,
    step: u64,
    seed: u64,
    prob_scale: bool,
    config: TrainConfig,
    optimizer: OptimizerConfig,
    target: TargetNetworkSpec,
    splits: Vec<usize>,
    layers: usize,
    theta: Vec<Tensor>,
    mapping: MappingRecord,
    adam_theta: AdamState,
    adam_mapping: AdamState,
}

/// A restored training state with its position in the run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub epoch: u64,
    pub config: TrainConfig,
}

fn mapping_tensors(mapping: &Mapping) -> MappingRecord {
    match mapping {
        Mapping::Mps(mps) => MappingRecord {
            kind: "mps".into(),
            inputs: mps.sites(),
            width: mps.bond_dim(),
            tensors: (0..mps.sites())
                .map(|k| {
                    let (l, r) = mps.site_dims(k);
                    Tensor::new(format!("site{k}"), vec![l, 2, r], &mps.params()[mps.site_range(k)])
                })
                .collect(),
        },
        Mapping::Mlp(mlp) => {
            let (n, h) = (mlp.inputs(), mlp.hidden());
            let shapes: [(&str, Vec<usize>); 6] = [
                ("w1", vec![h, n]),
                ("b1", vec![h]),
                ("w2", vec![h, h]),
                ("b2", vec![h]),
                ("w3", vec![h]),
                ("b3", vec![1]),
            ];
            let mut at = 0;
            let tensors = shapes
                .into_iter()
                .map(|(name, shape)| {
                    let len: usize = shape.iter().product();
                    let t = Tensor::new(name, shape, &mlp.params()[at..at + len]);
                    at += len;
                    t
                })
                .collect();
            MappingRecord { kind: "mlp".into(), inputs: n, width: h, tensors }
        }
    }
}

fn concat(tensors: &[Tensor], expected: &[Vec<usize>], what: &str) -> Result<Vec<f64>> {
    if tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {} arrays, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    let mut out = Vec::new();
    for (t, shape) in tensors.iter().zip(expected) {
        if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "{what}: array {} has shape {:?} with {} entries, expected {:?}",
                t.name,
                t.shape,
                t.data.len(),
                shape
            )));
        }
        out.extend_from_slice(&t.data);
    }
    Ok(out)
}

fn restore_mapping(rec: &MappingRecord) -> Result<Mapping> {
    let bad = |e: Error| Error::Checkpoint(format!("mapping: {e}"));
    match rec.kind.as_str() {
        "mps" => {
            let shell = MpsMapping::zeros(rec.inputs, rec.width).map_err(bad)?;
            let shapes: Vec<Vec<usize>> = (0..rec.inputs)
                .map(|k| {
                    let (l, r) = shell.site_dims(k);
                    vec![l, 2, r]
                })
                .collect();
            let params = concat(&rec.tensors, &shapes, "mapping")?;
            Ok(Mapping::Mps(MpsMapping::from_params(rec.inputs, rec.width, params).map_err(bad)?))
        }
        "mlp" => {
            let (n, h) = (rec.inputs, rec.width);
            let shapes = vec![vec![h, n], vec![h], vec![h, h], vec![h], vec![h], vec![1]];
            let params = concat(&rec.tensors, &shapes, "mapping")?;
            Ok(Mapping::Mlp(MlpMapping::from_params(n, h, params).map_err(bad)?))
        }
        other => Err(Error::Checkpoint(format!("unknown mapping kind {other:?}"))),
    }
}

fn checksum(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

/// Serialises the full resumable state.
pub fn encode_checkpoint(state: &TrainState, epoch: u64, config: &TrainConfig) -> Result<Vec<u8>> {
    let circuit = state.circuit();
    let theta = (0..circuit.splits().len())
        .map(|j| Tensor::new(format!("theta{j}"), vec![circuit.layers(), circuit.splits()[j]], state.theta().block(j)))
        .collect();
    let body = Body {
        format_version: CHECKPOINT_VERSION,
        epoch,
        step: state.step(),
        seed: state.seed(),
        prob_scale: state.prob_scale(),
        config: config.clone(),
        optimizer: *state.optimizer(),
        target: state.target().clone(),
        splits: circuit.splits().to_vec(),
        layers: circuit.layers(),
        theta,
        mapping: mapping_tensors(state.mapping()),
        adam_theta: state.adam_theta().clone(),
        adam_mapping: state.adam_mapping().clone(),
    };
    let json = serde_json::to_vec(&body).map_err(|e| Error::Checkpoint(format!("cannot encode checkpoint: {e}")))?;
    let mut out = format!("{MAGIC} v{CHECKPOINT_VERSION} sha256:{}\n", checksum(&json)).into_bytes();
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let body = &bytes[newline + 1..];
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Checkpoint("malformed version in header".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}; this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let stored = parts
        .next()
        .and_then(|c| c.strip_prefix("sha256:"))
        .ok_or_else(|| Error::Checkpoint("missing checksum in header".into()))?;
    if stored != checksum(body) {
        return Err(Error::Checkpoint("checksum mismatch: file is corrupt or truncated".into()));
    }
    let body: Body =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("malformed checkpoint body: {e}")))?;
    if body.format_version != version {
        return Err(Error::Checkpoint("header and body disagree on the format version".into()));
    }

    let circuit = CircuitSpec::new(body.splits.clone(), body.layers).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let shapes: Vec<Vec<usize>> = circuit.splits().iter().map(|&n| vec![body.layers, n]).collect();
    let theta = ThetaParams::from_flat(&circuit, concat(&body.theta, &shapes, "theta")?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mapping = restore_mapping(&body.mapping)?;
    let mut state = TrainState::new(
        circuit,
        theta,
        mapping,
        body.target,
        body.optimizer,
        body.prob_scale,
        body.seed,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    state.restore_optimizer(body.adam_theta, body.adam_mapping, body.step)?;
    Ok(Checkpoint { state, epoch: body.epoch, config: body.config })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(state: &TrainState, epoch: u64, config: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state, epoch, config)?;
    let tmp = temp_path(path);
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
