//! Dense checkpoints and the factor bank that replaces them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::recombinator::{generate_weight, linear_product, param_count, FactorizationConfig, GateConfig};

/// One dense linear layer: `y = x·Wᵀ + b` with `W` of shape (d_out, d_in).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub kind: String,
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(name: impl Into<String>, weight: Matrix, bias: Vec<f32>) -> Self {
        let name = name.into();
        let kind = kind_of(&name).to_string();
        Self { name, kind, weight, bias }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Module kind encoded in a layer name `<kind>.<index>`.
pub fn kind_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Ordered set of dense layers, e.g. a pretrained model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub layers: Vec<DenseLayer>,
}

impl Checkpoint {
    pub fn new(layers: Vec<DenseLayer>) -> Self {
        Self { layers }
    }

    pub fn get(&self, name: &str) -> Option<&DenseLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// CRC32 over names, shapes and raw little-endian values, as hex.
    pub fn content_hash(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        for l in &self.layers {
            h.update(l.name.as_bytes());
            h.update(&(l.weight.rows() as u64).to_le_bytes());
            h.update(&(l.weight.cols() as u64).to_le_bytes());
            for v in l.weight.data().iter().chain(&l.bias) {
                h.update(&v.to_le_bytes());
            }
        }
        format!("{:08x}", h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    pub name: String,
    pub mixer: Matrix,
    pub bias: Vec<f32>,
}

/// Consecutive layers of one module kind sharing a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroup {
    pub id: usize,
    pub kind: String,
    pub cfg: FactorizationConfig,
    pub basis: Matrix,
    pub members: Vec<GroupMember>,
}

impl LayerGroup {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.members.is_empty() {
            return Err(Error::Config(format!("group {} has no members", self.id)));
        }
        if self.basis.shape() != self.cfg.basis_shape() {
            return Err(Error::shape(
                "layer group",
                format!("group {}: basis {:?} vs {:?}", self.id, self.basis.shape(), self.cfg.basis_shape()),
            ));
        }
        for m in &self.members {
            if m.mixer.shape() != self.cfg.mixer_shape() {
                return Err(Error::shape(
                    "layer group",
                    format!("group {}, layer {}: mixer {:?} vs {:?}", self.id, m.name, m.mixer.shape(), self.cfg.mixer_shape()),
                ));
            }
            if m.bias.len() != self.cfg.d_out {
                return Err(Error::shape(
                    "layer group",
                    format!("group {}, layer {}: bias length {}", self.id, m.name, m.bias.len()),
                ));
            }
        }
        Ok(())
    }

    pub fn weight(&self, member: usize, gate: &GateConfig) -> Result<Matrix> {
        generate_weight(&self.basis, &self.members[member].mixer, &self.cfg, gate)
    }

    /// `B·A` before any gating.
    pub fn pre_gate_product(&self, member: usize) -> Result<Matrix> {
        linear_product(&self.basis, &self.members[member].mixer, &self.cfg)
    }

    /// Basis plus mixers, without biases.
    pub fn param_count(&self) -> usize {
        param_count(&self.cfg, self.members.len(), 1).0
    }
}

/// Retrofitted model state: shared bases, per-layer mixers and biases, and the
/// dense layers that were not factorized.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorBank {
    pub groups: Vec<LayerGroup>,
    pub passthrough: Vec<DenseLayer>,
    /// Forward order of every layer, factorized or not.
    pub layer_order: Vec<String>,
    pub gate: GateConfig,
    pub provenance: Provenance,
}

impl FactorBank {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for g in &self.groups {
            g.validate()?;
            for m in &g.members {
                if !seen.insert(m.name.as_str()) {
                    return Err(Error::Config(format!("layer {} appears in more than one group", m.name)));
                }
            }
        }
        for p in &self.passthrough {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Config(format!("layer {} is both factorized and dense", p.name)));
            }
        }
        let ordered: std::collections::BTreeSet<&str> = self.layer_order.iter().map(String::as_str).collect();
        if ordered != seen || ordered.len() != self.layer_order.len() {
            return Err(Error::Config("layer order does not list every layer exactly once".into()));
        }
        Ok(())
    }

    /// `(group index, member index)` of a factorized layer.
    pub fn locate(&self, name: &str) -> Option<(usize, usize)> {
        self.groups.iter().enumerate().find_map(|(gi, g)| {
            g.members.iter().position(|m| m.name == name).map(|mi| (gi, mi))
        })
    }

    pub fn member(&self, name: &str) -> Option<&GroupMember> {
        self.locate(name).map(|(g, m)| &self.groups[g].members[m])
    }

    pub fn member_mut(&mut self, name: &str) -> Option<&mut GroupMember> {
        self.locate(name).map(|(g, m)| &mut self.groups[g].members[m])
    }

    pub fn weight(&self, name: &str) -> Result<Matrix> {
        if let Some((g, m)) = self.locate(name) {
            return self.groups[g].weight(m, &self.gate);
        }
        self.passthrough
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.weight.clone())
            .ok_or_else(|| Error::Config(format!("no layer named {name}")))
    }

    /// Regenerated weights of factorized layers, in group/member order.
    pub fn generated_weights(&self) -> Result<Vec<(String, Matrix)>> {
        let mut out = Vec::new();
        for g in &self.groups {
            for (mi, m) in g.members.iter().enumerate() {
                out.push((m.name.clone(), g.weight(mi, &self.gate)?));
            }
        }
        Ok(out)
    }

    /// Dense equivalent of the whole bank, in forward order.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut layers = Vec::with_capacity(self.layer_order.len());
        for name in &self.layer_order {
            let layer = match self.locate(name) {
                Some((g, m)) => DenseLayer::new(
                    name.clone(),
                    self.groups[g].weight(m, &self.gate)?,
                    self.groups[g].members[m].bias.clone(),
                ),
                None => self
                    .passthrough
                    .iter()
                    .find(|p| &p.name == name)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no layer named {name}")))?,
            };
            layers.push(layer);
        }
        Ok(Checkpoint::new(layers))
    }

    /// Bases plus mixers over all groups (no biases, no dense layers).
    pub fn factor_params(&self) -> usize {
        self.groups.iter().map(LayerGroup::param_count).sum()
    }

    pub fn mixer_params(&self) -> usize {
        self.groups.iter().map(|g| g.members.len() * g.cfg.r * g.cfg.s).sum()
    }

    pub fn total_params(&self) -> usize {
        self.factor_params()
            + self.groups.iter().flat_map(|g| &g.members).map(|m| m.bias.len()).sum::<usize>()
            + self.passthrough.iter().map(|p| p.weight.len() + p.bias.len()).sum::<usize>()
    }
}
