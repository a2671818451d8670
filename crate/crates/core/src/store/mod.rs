//! Persistence: the tensor container, checkpoints, factor banks, adapter
//! deltas, run configuration and metric tables.
//!
//! Structured objects are stored as a container whose first tensor,
//! `__metadata__`, is a JSON document (dtype u8) describing the rest.

mod config;
mod container;

pub use config::{FactorSpec, ModelSpec, RunConfig};
pub use container::{decode_container, encode_container, Tensor, TensorData, MAGIC, VERSION};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterDelta;
use crate::bank::{Checkpoint, DenseLayer, FactorBank, GroupMember, LayerGroup, Provenance};
use crate::error::{Result, StoreError};
use crate::numerics::Matrix;
use crate::recombinator::{FactorizationConfig, GateConfig};

pub const METADATA: &str = "__metadata__";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| StoreError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"),
        })?
        .to_string_lossy()
        .into_owned();
    let tmp: PathBuf = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path)(e)
    })?;
    Ok(())
}

pub fn write_container(path: &Path, tensors: &[Tensor]) -> Result<()> {
    write_atomic(path, &encode_container(tensors)?)
}

pub fn read_container(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_container(&bytes)?)
}

struct Named {
    tensors: BTreeMap<String, Tensor>,
}

impl Named {
    fn new(tensors: Vec<Tensor>) -> Self {
        Self {
            tensors: tensors.into_iter().map(|t| (t.name.clone(), t)).collect(),
        }
    }

    fn metadata<T: for<'de> Deserialize<'de>>(&self, format: &str) -> std::result::Result<T, StoreError> {
        let raw = self
            .tensors
            .get(METADATA)
            .and_then(Tensor::as_bytes)
            .ok_or_else(|| StoreError::Metadata("no metadata document".into()))?;
        let value: serde_json::Value = serde_json::from_slice(raw).map_err(|e| StoreError::Metadata(e.to_string()))?;
        let found = value.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if found != format {
            return Err(StoreError::Metadata(format!("expected a {format} file, found {found:?}")));
        }
        serde_json::from_value(value).map_err(|e| StoreError::Metadata(e.to_string()))
    }

    fn get(&self, name: &str) -> std::result::Result<&Tensor, StoreError> {
        self.tensors.get(name).ok_or_else(|| StoreError::MissingTensor(name.to_string()))
    }

    fn matrix(&self, name: &str) -> std::result::Result<Matrix, StoreError> {
        self.get(name)?
            .to_matrix()
            .ok_or_else(|| StoreError::Malformed(format!("{name} is not a 2-D f32 tensor")))
    }

    fn vector(&self, name: &str) -> std::result::Result<Vec<f32>, StoreError> {
        let t = self.get(name)?;
        match (t.as_f32(), t.dims.len()) {
            (Some(v), 1) => Ok(v.to_vec()),
            _ => Err(StoreError::Malformed(format!("{name} is not a 1-D f32 tensor"))),
        }
    }
}

fn metadata_tensor<T: Serialize>(meta: &T) -> Result<Tensor> {
    let json = serde_json::to_vec(meta).map_err(|e| StoreError::Metadata(e.to_string()))?;
    Ok(Tensor::bytes(METADATA, json))
}

fn weight_key(layer: &str) -> String {
    format!("layer.{layer}.weight")
}
fn bias_key(layer: &str) -> String {
    format!("layer.{layer}.bias")
}
fn mixer_key(layer: &str) -> String {
    format!("layer.{layer}.mixer")
}
fn basis_key(group: usize) -> String {
    format!("group.{group}.basis")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format: String,
    layers: Vec<String>,
}

pub fn checkpoint_tensors(ck: &Checkpoint) -> Result<Vec<Tensor>> {
    let meta = CheckpointMeta {
        format: "checkpoint".into(),
        layers: ck.layers.iter().map(|l| l.name.clone()).collect(),
    };
    let mut tensors = vec![metadata_tensor(&meta)?];
    for l in &ck.layers {
        tensors.push(Tensor::matrix(weight_key(&l.name), &l.weight));
        tensors.push(Tensor::vector(bias_key(&l.name), &l.bias));
    }
    Ok(tensors)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_container(path, &checkpoint_tensors(ck)?)
}

pub fn checkpoint_from_tensors(tensors: Vec<Tensor>) -> Result<Checkpoint> {
    let named = Named::new(tensors);
    let meta: CheckpointMeta = named.metadata("checkpoint")?;
    let mut layers = Vec::with_capacity(meta.layers.len());
    for name in &meta.layers {
        let weight = named.matrix(&weight_key(name))?;
        let bias = named.vector(&bias_key(name))?;
        if bias.len() != weight.rows() {
            return Err(StoreError::Malformed(format!("layer {name}: bias length {} for {} outputs", bias.len(), weight.rows())).into());
        }
        layers.push(DenseLayer::new(name.clone(), weight, bias));
    }
    Ok(Checkpoint::new(layers))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_tensors(read_container(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupMeta {
    id: usize,
    kind: String,
    cfg: FactorizationConfig,
    members: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankMeta {
    format: String,
    gate: GateConfig,
    provenance: Provenance,
    layer_order: Vec<String>,
    groups: Vec<GroupMeta>,
    passthrough: Vec<String>,
}

pub fn bank_tensors(bank: &FactorBank) -> Result<Vec<Tensor>> {
    bank.validate()?;
    let meta = BankMeta {
        format: "factor_bank".into(),
        gate: bank.gate,
        provenance: bank.provenance.clone(),
        layer_order: bank.layer_order.clone(),
        groups: bank
            .groups
            .iter()
            .map(|g| GroupMeta {
                id: g.id,
                kind: g.kind.clone(),
                cfg: g.cfg,
                members: g.members.iter().map(|m| m.name.clone()).collect(),
            })
            .collect(),
        passthrough: bank.passthrough.iter().map(|p| p.name.clone()).collect(),
    };
    let mut tensors = vec![metadata_tensor(&meta)?];
    for g in &bank.groups {
        tensors.push(Tensor::matrix(basis_key(g.id), &g.basis));
        for m in &g.members {
            tensors.push(Tensor::matrix(mixer_key(&m.name), &m.mixer));
            tensors.push(Tensor::vector(bias_key(&m.name), &m.bias));
        }
    }
    for p in &bank.passthrough {
        tensors.push(Tensor::matrix(weight_key(&p.name), &p.weight));
        tensors.push(Tensor::vector(bias_key(&p.name), &p.bias));
    }
    Ok(tensors)
}

pub fn save_bank(path: &Path, bank: &FactorBank) -> Result<()> {
    write_container(path, &bank_tensors(bank)?)
}

pub fn bank_from_tensors(tensors: Vec<Tensor>) -> Result<FactorBank> {
    let named = Named::new(tensors);
    let meta: BankMeta = named.metadata("factor_bank")?;
    let mut groups = Vec::with_capacity(meta.groups.len());
    for gm in &meta.groups {
        let shape_err = |detail: String| StoreError::GroupShape { group: gm.id, detail };
        gm.cfg.validate().map_err(|e| shape_err(e.to_string()))?;
        let basis = named.matrix(&basis_key(gm.id))?;
        if basis.shape() != gm.cfg.basis_shape() {
            return Err(shape_err(format!("basis is {:?}, configuration needs {:?}", basis.shape(), gm.cfg.basis_shape())).into());
        }
        let mut members = Vec::with_capacity(gm.members.len());
        for name in &gm.members {
            let mixer = named.matrix(&mixer_key(name))?;
            if mixer.shape() != gm.cfg.mixer_shape() {
                return Err(shape_err(format!(
                    "mixer of {name} is {:?}, configuration needs {:?}",
                    mixer.shape(),
                    gm.cfg.mixer_shape()
                ))
                .into());
            }
            let bias = named.vector(&bias_key(name))?;
            if bias.len() != gm.cfg.d_out {
                return Err(shape_err(format!("bias of {name} has length {}", bias.len())).into());
            }
            members.push(GroupMember {
                name: name.clone(),
                mixer,
                bias,
            });
        }
        groups.push(LayerGroup {
            id: gm.id,
            kind: gm.kind.clone(),
            cfg: gm.cfg,
            basis,
            members,
        });
    }
    let mut passthrough = Vec::with_capacity(meta.passthrough.len());
    for name in &meta.passthrough {
        passthrough.push(DenseLayer::new(
            name.clone(),
            named.matrix(&weight_key(name))?,
            named.vector(&bias_key(name))?,
        ));
    }
    let bank = FactorBank {
        groups,
        passthrough,
        layer_order: meta.layer_order,
        gate: meta.gate,
        provenance: meta.provenance,
    };
    bank.validate()?;
    Ok(bank)
}

pub fn load_bank(path: &Path) -> Result<FactorBank> {
    bank_from_tensors(read_container(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeltaMeta {
    format: String,
    mixers: Vec<String>,
    head: bool,
    biases: Vec<String>,
}

pub fn delta_tensors(delta: &AdapterDelta) -> Result<Vec<Tensor>> {
    let meta = DeltaMeta {
        format: "adapter_delta".into(),
        mixers: delta.mixers.keys().cloned().collect(),
        head: delta.head.is_some(),
        biases: delta.biases.keys().cloned().collect(),
    };
    let mut tensors = vec![metadata_tensor(&meta)?];
    for (name, m) in &delta.mixers {
        tensors.push(Tensor::matrix(mixer_key(name), m));
    }
    if let Some(h) = &delta.head {
        tensors.push(Tensor::matrix("head.weight", h));
    }
    for (name, b) in &delta.biases {
        tensors.push(Tensor::vector(bias_key(name), b));
    }
    Ok(tensors)
}

pub fn save_delta(path: &Path, delta: &AdapterDelta) -> Result<()> {
    write_container(path, &delta_tensors(delta)?)
}

pub fn load_delta(path: &Path) -> Result<AdapterDelta> {
    let named = Named::new(read_container(path)?);
    let meta: DeltaMeta = named.metadata("adapter_delta")?;
    let mut delta = AdapterDelta::default();
    for name in &meta.mixers {
        delta.mixers.insert(name.clone(), named.matrix(&mixer_key(name))?);
    }
    if meta.head {
        delta.head = Some(named.matrix("head.weight")?);
    }
    for name in &meta.biases {
        delta.biases.insert(name.clone(), named.vector(&bias_key(name))?);
    }
    Ok(delta)
}

/// RFC-4180 CSV with a header row, written atomically.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| StoreError::Csv(e.to_string()))?;
    }
    Ok(w.into_inner().map_err(|e| StoreError::Csv(e.to_string()))?)
}
