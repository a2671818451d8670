use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{Checkpoint, DenseLayer, FactorBank, GroupMember, LayerGroup, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::recombinator::{
    basis_sharing_weight, generate_weight, layer_backward, lora_weight, recast_weight, svd_weight,
    FactorizationConfig, GateConfig, RecastConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Dense,
    Crisp,
    Lora,
    Recast,
    BasisSharing,
    Svd,
}

/// How one layer stores its weight. Indices point into [`ToyMlp::shared`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeight {
    Dense(Matrix),
    Crisp {
        basis: usize,
        cfg: FactorizationConfig,
        mixer: Matrix,
    },
    /// `b·a + frozen`, with `b` d_out×k and `a` k×d_in.
    Lora { frozen: Matrix, b: Matrix, a: Matrix },
    /// Rows of `coeffs` are the K coefficient vectors over a shared (d_in·d_out)×r basis.
    Recast { basis: usize, coeffs: Matrix },
    /// Shared d_out×r basis times a per-layer r×d_in mixer.
    BasisSharing { basis: usize, mixer: Matrix },
    Svd { u: Matrix, s: Vec<f32>, v: Matrix },
}

impl LayerWeight {
    pub fn backend(&self) -> Backend {
        match self {
            LayerWeight::Dense(_) => Backend::Dense,
            LayerWeight::Crisp { .. } => Backend::Crisp,
            LayerWeight::Lora { .. } => Backend::Lora,
            LayerWeight::Recast { .. } => Backend::Recast,
            LayerWeight::BasisSharing { .. } => Backend::BasisSharing,
            LayerWeight::Svd { .. } => Backend::Svd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub weight: LayerWeight,
    pub bias: Vec<f32>,
}

/// A basis shared by several layers, with the group id and module kind it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedBasis {
    pub id: usize,
    pub kind: String,
    pub matrix: Matrix,
}

/// Identifies one trainable tensor of a [`ToyMlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Shared(usize),
    /// `slot` numbers the layer's own weight tensors: dense `W`; crisp and
    /// basis-sharing mixer; lora `b`, `a`; recast coefficients; svd `u`, `s`, `v`.
    Factor { layer: usize, slot: usize },
    Bias(usize),
}

/// Which tensors a backward pass reports and an update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TrainMode {
    /// Every tensor.
    Full,
    /// Shared bases and per-layer factors of non-dense layers.
    Factors,
    /// Mixer-like tensors only; bases and dense layers frozen.
    Adapt { train_head: bool, train_biases: bool },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.map.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.map
            .values()
            .flatten()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }

    fn accumulate(&mut self, id: ParamId, g: &[f32]) {
        match self.map.get_mut(&id) {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => {
                self.map.insert(id, g.to_vec());
            }
        }
    }

    /// Adds `scale · other` into `self`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f32) {
        for (id, g) in other.iter() {
            let scaled: Vec<f32> = g.iter().map(|&v| v * scale).collect();
            self.accumulate(id, &scaled);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    /// Post-ReLU output of every hidden layer.
    pub features: Vec<Matrix>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    inputs: Vec<Matrix>,
    preacts: Vec<Matrix>,
    weights: Vec<Matrix>,
}

/// Small ReLU MLP whose linear layers use pluggable weight backends.
#[derive(Debug, Clone)]
pub struct ToyMlp {
    pub layers: Vec<ToyLayer>,
    pub shared: Vec<SharedBasis>,
    pub gate: GateConfig,
    pub provenance: Provenance,
    cache: Option<ForwardCache>,
}

impl PartialEq for ToyMlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.shared == other.shared
            && self.gate == other.gate
            && self.provenance == other.provenance
    }
}

/// Name of layer `i` of `n`: `embed.0`, `hidden.0`, …, `head.0`.
pub fn layer_name(i: usize, n: usize) -> String {
    if i + 1 == n {
        "head.0".into()
    } else if i == 0 {
        "embed.0".into()
    } else {
        format!("hidden.{}", i - 1)
    }
}

impl ToyMlp {
    /// Dense model with He-normal weights and zero biases.
    pub fn dense<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let std = (2.0 / dims[i] as f32).sqrt();
                ToyLayer {
                    name: layer_name(i, n),
                    d_in: dims[i],
                    d_out: dims[i + 1],
                    weight: LayerWeight::Dense(Matrix::random_normal(dims[i + 1], dims[i], std, rng)),
                    bias: vec![0.0; dims[i + 1]],
                }
            })
            .collect();
        Ok(Self::from_parts(layers, Vec::new(), GateConfig::default()))
    }

    pub fn from_parts(layers: Vec<ToyLayer>, shared: Vec<SharedBasis>, gate: GateConfig) -> Self {
        Self {
            layers,
            shared,
            gate,
            provenance: Provenance::default(),
            cache: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let layers: Vec<ToyLayer> = ck
            .layers
            .iter()
            .map(|l| ToyLayer {
                name: l.name.clone(),
                d_in: l.d_in(),
                d_out: l.d_out(),
                weight: LayerWeight::Dense(l.weight.clone()),
                bias: l.bias.clone(),
            })
            .collect();
        let model = Self::from_parts(layers, Vec::new(), GateConfig::default());
        model.validate()?;
        Ok(model)
    }

    pub fn from_bank(bank: &FactorBank) -> Result<Self> {
        bank.validate()?;
        let shared = bank
            .groups
            .iter()
            .map(|g| SharedBasis {
                id: g.id,
                kind: g.kind.clone(),
                matrix: g.basis.clone(),
            })
            .collect();
        let mut layers = Vec::with_capacity(bank.layer_order.len());
        for name in &bank.layer_order {
            let layer = match bank.locate(name) {
                Some((gi, mi)) => {
                    let g = &bank.groups[gi];
                    let m = &g.members[mi];
                    ToyLayer {
                        name: name.clone(),
                        d_in: g.cfg.d_in,
                        d_out: g.cfg.d_out,
                        weight: LayerWeight::Crisp {
                            basis: gi,
                            cfg: g.cfg,
                            mixer: m.mixer.clone(),
                        },
                        bias: m.bias.clone(),
                    }
                }
                None => {
                    let p = bank.passthrough.iter().find(|p| &p.name == name).expect("validated");
                    ToyLayer {
                        name: name.clone(),
                        d_in: p.d_in(),
                        d_out: p.d_out(),
                        weight: LayerWeight::Dense(p.weight.clone()),
                        bias: p.bias.clone(),
                    }
                }
            };
            layers.push(layer);
        }
        let mut model = Self::from_parts(layers, shared, bank.gate);
        model.provenance = bank.provenance.clone();
        model.validate()?;
        Ok(model)
    }

    /// Inverse of [`ToyMlp::from_bank`]; only dense and crisp layers are allowed.
    pub fn to_bank(&self) -> Result<FactorBank> {
        let mut groups: Vec<LayerGroup> = Vec::new();
        let mut slot_of: BTreeMap<usize, usize> = BTreeMap::new();
        let mut passthrough = Vec::new();
        for layer in &self.layers {
            match &layer.weight {
                LayerWeight::Dense(w) => passthrough.push(DenseLayer::new(layer.name.clone(), w.clone(), layer.bias.clone())),
                LayerWeight::Crisp { basis, cfg, mixer } => {
                    let gi = *slot_of.entry(*basis).or_insert_with(|| {
                        let sb = &self.shared[*basis];
                        groups.push(LayerGroup {
                            id: sb.id,
                            kind: sb.kind.clone(),
                            cfg: *cfg,
                            basis: sb.matrix.clone(),
                            members: Vec::new(),
                        });
                        groups.len() - 1
                    });
                    if groups[gi].cfg != *cfg {
                        return Err(Error::Config(format!("layer {} disagrees with its group's shape", layer.name)));
                    }
                    groups[gi].members.push(GroupMember {
                        name: layer.name.clone(),
                        mixer: mixer.clone(),
                        bias: layer.bias.clone(),
                    });
                }
                other => {
                    return Err(Error::Config(format!(
                        "layer {} uses the {:?} backend, which a factor bank cannot hold",
                        layer.name,
                        other.backend()
                    )))
                }
            }
        }
        let bank = FactorBank {
            groups,
            passthrough,
            layer_order: self.layers.iter().map(|l| l.name.clone()).collect(),
            gate: self.gate,
            provenance: self.provenance.clone(),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            layers.push(DenseLayer::new(l.name.clone(), self.weight(i)?, l.bias.clone()));
        }
        Ok(Checkpoint::new(layers))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].d_out != pair[1].d_in {
                return Err(Error::shape(
                    "toy model",
                    format!("{} outputs {} but {} expects {}", pair[0].name, pair[0].d_out, pair[1].name, pair[1].d_in),
                ));
            }
        }
        for i in 0..self.layers.len() {
            let w = self.weight(i)?;
            let l = &self.layers[i];
            if w.shape() != (l.d_out, l.d_in) || l.bias.len() != l.d_out {
                return Err(Error::shape("toy model", format!("layer {} has inconsistent shapes", l.name)));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    fn shared_matrix(&self, idx: usize) -> Result<&Matrix> {
        self.shared
            .get(idx)
            .map(|s| &s.matrix)
            .ok_or_else(|| Error::Config(format!("missing shared basis {idx}")))
    }

    /// Materialized (d_out, d_in) weight of layer `i`.
    pub fn weight(&self, i: usize) -> Result<Matrix> {
        let l = &self.layers[i];
        match &l.weight {
            LayerWeight::Dense(w) => Ok(w.clone()),
            LayerWeight::Crisp { basis, cfg, mixer } => generate_weight(self.shared_matrix(*basis)?, mixer, cfg, &self.gate),
            LayerWeight::Lora { frozen, b, a } => lora_weight(frozen, b, a),
            LayerWeight::Recast { basis, coeffs } => {
                let rc = RecastConfig::new((0..coeffs.rows()).map(|k| coeffs.row(k).to_vec()).collect());
                recast_weight(self.shared_matrix(*basis)?, &rc, l.d_out, l.d_in)
            }
            LayerWeight::BasisSharing { basis, mixer } => basis_sharing_weight(self.shared_matrix(*basis)?, mixer),
            LayerWeight::Svd { u, s, v } => svd_weight(u, s, v),
        }
    }

    fn run(&self, x: &Matrix) -> Result<(ForwardOutput, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "toy forward",
                format!("batch has {} features, model expects {}", x.cols(), self.input_dim()),
            ));
        }
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            preacts: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
        };
        let mut features = Vec::with_capacity(n - 1);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = self.weight(i)?;
            let mut z = matmul_nt(&h, &w)?;
            for r in 0..z.rows() {
                for (v, &b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            cache.inputs.push(h);
            cache.weights.push(w);
            if i + 1 < n {
                h = z.map(|v| v.max(0.0));
                features.push(h.clone());
            } else {
                h = z.clone();
            }
            cache.preacts.push(z);
        }
        Ok((ForwardOutput { logits: h, features }, cache))
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        Ok(self.run(x)?.0)
    }

    /// Forward pass that keeps the activations needed by [`ToyMlp::backward`].
    pub fn forward_train(&mut self, x: &Matrix) -> Result<ForwardOutput> {
        let (out, cache) = self.run(x)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn backward(&self, dlogits: &Matrix, mode: TrainMode) -> Result<Gradients> {
        self.backward_with_features(dlogits, &[], mode)
    }

    /// Backward pass from logit gradients plus optional gradients on the
    /// hidden features (empty slice for none).
    pub fn backward_with_features(&self, dlogits: &Matrix, dfeatures: &[Matrix], mode: TrainMode) -> Result<Gradients> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache)?;
        let n = self.layers.len();
        let batch = cache.inputs[0].rows();
        if dlogits.shape() != (batch, self.num_classes()) {
            return Err(Error::shape(
                "toy backward",
                format!("dL/dlogits is {:?}, expected {:?}", dlogits.shape(), (batch, self.num_classes())),
            ));
        }
        if !dfeatures.is_empty() && dfeatures.len() != n - 1 {
            return Err(Error::shape("toy backward", format!("{} feature gradients for {} hidden layers", dfeatures.len(), n - 1)));
        }
        let mut grads = Gradients::default();
        let mut dz = dlogits.clone();
        for i in (0..n).rev() {
            let dw = matmul_tn(&dz, &cache.inputs[i])?;
            if self.trains(ParamId::Bias(i), mode) {
                let mut db = vec![0.0f64; self.layers[i].d_out];
                for r in 0..dz.rows() {
                    for (a, &v) in db.iter_mut().zip(dz.row(r)) {
                        *a += v as f64;
                    }
                }
                grads.accumulate(ParamId::Bias(i), &db.iter().map(|&v| v as f32).collect::<Vec<_>>());
            }
            self.weight_grads(i, &dw, mode, &mut grads)?;
            if i == 0 {
                break;
            }
            let mut dh = matmul(&dz, &cache.weights[i])?;
            if let Some(df) = dfeatures.get(i - 1) {
                dh.add_assign(df)?;
            }
            let z = &cache.preacts[i - 1];
            for (g, &zv) in dh.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            }
            dz = dh;
        }
        Ok(grads)
    }

    /// Whether `id` is updated under `mode`.
    pub fn trains(&self, id: ParamId, mode: TrainMode) -> bool {
        let head = self.head_index();
        match mode {
            TrainMode::Full => true,
            TrainMode::Factors => match id {
                ParamId::Shared(_) => true,
                ParamId::Factor { layer, .. } => !matches!(self.layers[layer].weight, LayerWeight::Dense(_)),
                ParamId::Bias(_) => false,
            },
            TrainMode::Adapt { train_head, train_biases } => match id {
                ParamId::Shared(_) => false,
                ParamId::Factor { layer, slot } => match &self.layers[layer].weight {
                    LayerWeight::Dense(_) => train_head && layer == head,
                    LayerWeight::Svd { .. } => slot == 1,
                    _ => true,
                },
                ParamId::Bias(layer) => train_biases || (train_head && layer == head),
            },
        }
    }

    /// Parameter gradients of layer `i` given a gradient on its materialized weight.
    pub fn weight_backward(&self, i: usize, dw: &Matrix, mode: TrainMode) -> Result<Gradients> {
        let l = &self.layers[i];
        if dw.shape() != (l.d_out, l.d_in) {
            return Err(Error::shape("weight backward", format!("layer {}: gradient {:?}", l.name, dw.shape())));
        }
        let mut grads = Gradients::default();
        self.weight_grads(i, dw, mode, &mut grads)?;
        Ok(grads)
    }

    fn weight_grads(&self, i: usize, dw: &Matrix, mode: TrainMode, grads: &mut Gradients) -> Result<()> {
        let f = |slot| ParamId::Factor { layer: i, slot };
        let mut put = |id: ParamId, g: &[f32]| {
            if self.trains(id, mode) {
                grads.accumulate(id, g);
            }
        };
        let layer = &self.layers[i];
        match &layer.weight {
            LayerWeight::Dense(_) => put(f(0), dw.data()),
            LayerWeight::Crisp { basis, cfg, mixer } => {
                let (db, da) = layer_backward(dw, self.shared_matrix(*basis)?, mixer, cfg, &self.gate)?;
                put(ParamId::Shared(*basis), db.data());
                put(f(0), da.data());
            }
            LayerWeight::Lora { b, a, .. } => {
                put(f(0), matmul_nt(dw, a)?.data());
                put(f(1), matmul_tn(b, dw)?.data());
            }
            LayerWeight::Recast { basis, coeffs } => {
                let bstar = self.shared_matrix(*basis)?;
                let k = coeffs.rows();
                let g = Matrix::from_vec(dw.len(), 1, dw.data().to_vec())?;
                let mean = Matrix::from_fn(1, coeffs.cols(), |_, c| {
                    (0..k).map(|j| coeffs.get(j, c) as f64).sum::<f64>() as f32 / k as f32
                });
                put(ParamId::Shared(*basis), matmul(&g, &mean)?.data());
                let per = matmul_tn(&g, bstar)?.scale(1.0 / k as f32);
                let mut dc = Vec::with_capacity(k * coeffs.cols());
                for _ in 0..k {
                    dc.extend_from_slice(per.data());
                }
                put(f(0), &dc);
            }
            LayerWeight::BasisSharing { basis, mixer } => {
                put(ParamId::Shared(*basis), matmul_nt(dw, mixer)?.data());
                put(f(0), matmul_tn(self.shared_matrix(*basis)?, dw)?.data());
            }
            LayerWeight::Svd { u, s, v } => {
                let scale_cols = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) * s[c]);
                let wv = matmul(dw, v)?;
                put(f(0), scale_cols(&wv).data());
                let ds: Vec<f32> = (0..s.len())
                    .map(|k| (0..u.rows()).map(|r| u.get(r, k) as f64 * wv.get(r, k) as f64).sum::<f64>() as f32)
                    .collect();
                put(f(1), &ds);
                put(f(2), scale_cols(&matmul_tn(dw, u)?).data());
            }
        }
        Ok(())
    }

    /// Every tensor with its id, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut [f32])> {
        let mut out: Vec<(ParamId, &mut [f32])> = Vec::new();
        for (i, s) in self.shared.iter_mut().enumerate() {
            out.push((ParamId::Shared(i), s.matrix.data_mut()));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let f = |slot| ParamId::Factor { layer: i, slot };
            match &mut layer.weight {
                LayerWeight::Dense(w) => out.push((f(0), w.data_mut())),
                LayerWeight::Crisp { mixer, .. } | LayerWeight::BasisSharing { mixer, .. } => {
                    out.push((f(0), mixer.data_mut()))
                }
                LayerWeight::Lora { b, a, .. } => {
                    out.push((f(0), b.data_mut()));
                    out.push((f(1), a.data_mut()));
                }
                LayerWeight::Recast { coeffs, .. } => out.push((f(0), coeffs.data_mut())),
                LayerWeight::Svd { u, s, v } => {
                    out.push((f(0), u.data_mut()));
                    out.push((f(1), s.as_mut_slice()));
                    out.push((f(2), v.data_mut()));
                }
            }
            out.push((ParamId::Bias(i), layer.bias.as_mut_slice()));
        }
        out
    }

    /// Sizes of every tensor, keyed by id.
    pub fn param_sizes(&self) -> BTreeMap<ParamId, usize> {
        let mut clone = self.clone();
        clone.cache = None;
        clone.params_mut().into_iter().map(|(id, p)| (id, p.len())).collect()
    }

    /// Stored parameters, counting frozen LoRA weights.
    pub fn param_count(&self) -> usize {
        let frozen: usize = self
            .layers
            .iter()
            .map(|l| match &l.weight {
                LayerWeight::Lora { frozen, .. } => frozen.len(),
                _ => 0,
            })
            .sum();
        self.param_sizes().values().sum::<usize>() + frozen
    }

    pub fn trainable_count(&self, mode: TrainMode) -> usize {
        self.param_sizes()
            .into_iter()
            .filter(|(id, _)| self.trains(*id, mode))
            .map(|(_, n)| n)
            .sum()
    }
}
