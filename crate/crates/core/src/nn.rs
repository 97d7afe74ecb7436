//! The meta-model: a task-shared MLP feature extractor, a bank of linear
//! heads (one per task slot of a meta-batch) and optional per-parameter
//! inner learning rates for MetaSGD.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::seed;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a model lineage. Clones share it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelId(u64);

impl ModelId {
    fn fresh() -> Self {
        Self(NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Affine layer `x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    fn fan_in_uniform(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(vec![inputs, outputs], data).expect("shape matches"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    fn full_like(&self, value: f64) -> Self {
        Self {
            weight: Tensor::full(self.weight.shape(), value),
            bias: Tensor::full(self.bias.shape(), value),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> LinearVars<'t> {
        LinearVars {
            weight: tape.var(self.weight.clone()),
            bias: tape.var(self.bias.clone()),
        }
    }
}

/// MetaSGD learning rates, one tensor per scaled parameter.
///
/// The head rates are shared by every head slot and by evaluation heads.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerRates {
    pub extractor: Vec<Linear>,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct MetaModel {
    id: ModelId,
    layer_sizes: Vec<usize>,
    pub extractor: Vec<Linear>,
    pub heads: Vec<Linear>,
    pub inner_lr: Option<InnerRates>,
    seed: u64,
}

/// Builds a model with extractor `layer_sizes[0] -> ... -> layer_sizes[last]`
/// and `n_heads` scalar heads on top.
pub fn init_model(layer_sizes: &[usize], n_heads: usize, seed: u64) -> Result<MetaModel> {
    if layer_sizes.is_empty() {
        return Err(invalid("layer_sizes must not be empty"));
    }
    if let Some(i) = layer_sizes.iter().position(|&w| w == 0) {
        return Err(invalid(format!("layer {i} has zero width")));
    }
    if n_heads == 0 {
        return Err(invalid("need at least one head"));
    }
    let mut rng = seed::rng(seed::derive(seed, seed::stream::INIT, 0));
    let extractor = layer_sizes
        .windows(2)
        .map(|w| Linear::fan_in_uniform(w[0], w[1], &mut rng))
        .collect();
    let width = *layer_sizes.last().unwrap();
    let heads = (0..n_heads)
        .map(|_| Linear::fan_in_uniform(width, 1, &mut rng))
        .collect();
    Ok(MetaModel {
        id: ModelId::fresh(),
        layer_sizes: layer_sizes.to_vec(),
        extractor,
        heads,
        inner_lr: None,
        seed,
    })
}

/// Ordered copy of every parameter of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    owner: ModelId,
    pub tensors: Vec<Tensor>,
}

impl ParamSnapshot {
    pub fn owner(&self) -> ModelId {
        self.owner
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }
}

impl MetaModel {
    pub fn id(&self) -> ModelId {
        self.id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn feature_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Turns on MetaSGD with every rate set to `alpha`.
    pub fn enable_inner_rates(&mut self, alpha: f64) {
        self.inner_lr = Some(InnerRates {
            extractor: self.extractor.iter().map(|l| l.full_like(alpha)).collect(),
            head: Linear::zeros(self.feature_width(), 1).full_like(alpha),
        });
    }

    /// Zeroes every head; used for fresh task bindings.
    pub fn reset_heads(&mut self) {
        let width = self.feature_width();
        for h in &mut self.heads {
            *h = Linear::zeros(width, 1);
        }
    }

    /// Parameters in their stable order: extractor layers, heads, then
    /// inner rates when present. Each layer contributes weight then bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut refs: Vec<&Tensor> = Vec::new();
        for l in self.extractor.iter().chain(&self.heads) {
            refs.push(&l.weight);
            refs.push(&l.bias);
        }
        if let Some(r) = &self.inner_lr {
            for l in r.extractor.iter().chain(std::iter::once(&r.head)) {
                refs.push(&l.weight);
                refs.push(&l.bias);
            }
        }
        refs
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut refs: Vec<&mut Tensor> = Vec::new();
        for l in self.extractor.iter_mut().chain(self.heads.iter_mut()) {
            refs.push(&mut l.weight);
            refs.push(&mut l.bias);
        }
        if let Some(r) = &mut self.inner_lr {
            for l in r.extractor.iter_mut().chain(std::iter::once(&mut r.head)) {
                refs.push(&mut l.weight);
                refs.push(&mut l.bias);
            }
        }
        refs
    }

    /// Dotted parameter names matching [`MetaModel::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, _) in self.extractor.iter().enumerate() {
            names.push(format!("extractor.{i}.weight"));
            names.push(format!("extractor.{i}.bias"));
        }
        for (i, _) in self.heads.iter().enumerate() {
            names.push(format!("head.{i}.weight"));
            names.push(format!("head.{i}.bias"));
        }
        if let Some(r) = &self.inner_lr {
            for (i, _) in r.extractor.iter().enumerate() {
                names.push(format!("inner_lr.extractor.{i}.weight"));
                names.push(format!("inner_lr.extractor.{i}.bias"));
            }
            names.push("inner_lr.head.weight".into());
            names.push("inner_lr.head.bias".into());
        }
        names
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            owner: self.id,
            tensors: self.params().into_iter().cloned().collect(),
        }
    }

    pub fn restore(&mut self, snapshot: &ParamSnapshot) -> Result<()> {
        if snapshot.owner != self.id {
            return Err(invalid("snapshot belongs to a different model"));
        }
        let params = self.params_mut();
        if params.len() != snapshot.tensors.len() {
            return Err(invalid("snapshot parameter count differs"));
        }
        for (p, s) in params.iter().zip(&snapshot.tensors) {
            if p.shape() != s.shape() {
                return Err(invalid("snapshot parameter shape differs"));
            }
        }
        for (p, s) in params.into_iter().zip(&snapshot.tensors) {
            *p = s.clone();
        }
        Ok(())
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            extractor: self.extractor.iter().map(|l| l.bind(tape)).collect(),
            heads: self.heads.iter().map(|l| l.bind(tape)).collect(),
            inner_lr: self.inner_lr.as_ref().map(|r| BoundRates {
                extractor: r.extractor.iter().map(|l| l.bind(tape)).collect(),
                head: r.head.bind(tape),
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    /// Serialized checkpoint. The same parameters always give the same bytes.
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let tensors = self
            .param_names()
            .into_iter()
            .zip(self.params())
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            n_heads: self.heads.len(),
            seed: self.seed,
            metasgd: self.inner_lr.is_some(),
            tensors,
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        let mut model = init_model(&ck.layer_sizes, ck.n_heads, ck.seed)?;
        if ck.metasgd {
            model.enable_inner_rates(0.0);
        }
        let names = model.param_names();
        if names.len() != ck.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                ck.tensors.len()
            )));
        }
        for ((name, slot), nt) in names.iter().zip(model.params_mut()).zip(ck.tensors) {
            if *name != nt.name || slot.shape() != nt.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not fit slot {name} {:?}",
                    nt.name,
                    nt.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(nt.shape, nt.data)?;
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "trl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    n_heads: usize,
    seed: u64,
    metasgd: bool,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// A linear layer's parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> LinearVars<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight)?.add_row(self.bias)
    }

    pub fn vars(&self) -> [Var<'t>; 2] {
        [self.weight, self.bias]
    }

    pub fn from_vars(v: &[Var<'t>]) -> Self {
        Self {
            weight: v[0],
            bias: v[1],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundRates<'t> {
    pub extractor: Vec<LinearVars<'t>>,
    pub head: LinearVars<'t>,
}

/// A model's parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel<'t> {
    pub extractor: Vec<LinearVars<'t>>,
    pub heads: Vec<LinearVars<'t>>,
    pub inner_lr: Option<BoundRates<'t>>,
}

impl<'t> BoundModel<'t> {
    pub fn forward_features(&self, x: Var<'t>) -> Result<Var<'t>> {
        forward_features(&self.extractor, x)
    }

    pub fn forward_head(&self, i: usize, features: Var<'t>) -> Result<Var<'t>> {
        let head = self.heads.get(i).ok_or_else(|| {
            invalid(format!("head {i} out of range ({} heads)", self.heads.len()))
        })?;
        head.forward(features)
    }

    /// Every bound var in [`MetaModel::params`] order.
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out: Vec<Var<'t>> = self
            .extractor
            .iter()
            .chain(&self.heads)
            .flat_map(|l| l.vars())
            .collect();
        if let Some(r) = &self.inner_lr {
            out.extend(
                r.extractor
                    .iter()
                    .chain(std::iter::once(&r.head))
                    .flat_map(|l| l.vars()),
            );
        }
        out
    }
}

/// Activations after the last extractor nonlinearity (`tanh` after every
/// layer). With no layers the inputs are the features.
pub fn forward_features<'t>(extractor: &[LinearVars<'t>], x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if let Some(first) = extractor.first() {
        let width = first.weight.shape()[0];
        if shape.len() != 2 || shape[1] != width {
            return Err(Error::Shape {
                op: "forward_features",
                shapes: vec![shape, vec![width]],
            });
        }
    }
    extractor
        .iter()
        .try_fold(x, |h, layer| layer.forward(h)?.tanh())
}
