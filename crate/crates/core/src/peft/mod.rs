//! LoRA and DoRA adapters on the transformer-block linears.
//!
//! LoRA adds `s·B·A` (with `s = α/r`) to a frozen weight `W₀`; `A` is
//! `r×d_in`, `B` is `d_out×r` and starts at zero. DoRA keeps the same
//! factors for the direction `V = W₀ + s·B·A` and rescales every output
//! unit (row of `V`) to a trainable magnitude: `W' = m ⊙ V/‖V‖`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::{ArchSpec, Checkpoint, HeadSpec, Mode, Model, ModelKind, AnyTensor, BLOCK_LINEARS};
use crate::rng::{name_key, Purpose, SeedTree};
use crate::tensor::{row_norms, Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    Dora,
}

/// Adapter settings for one experiment.
///
/// `targets` is `"q_proj_only"`, `"all_linear"`, or a comma-separated list
/// of block linear names (`q_proj`, `k_proj`, `v_proj`, `o_proj`, `mlp_up`,
/// `mlp_down`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftConfig {
    pub method: Method,
    pub targets: String,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_bias")]
    pub bias: String,
}

fn default_dropout() -> f64 {
    0.05
}

fn default_bias() -> String {
    "none".into()
}

/// Per-layer adapter hyperparameters, stored alongside the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapter {
    pub method: Method,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LayerAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

impl PeftConfig {
    /// Rank `r` with `α = 2r` and adapter dropout 0.05.
    pub fn preset(method: Method, targets: &str, rank: usize) -> Self {
        Self {
            method,
            targets: targets.into(),
            rank,
            alpha: 2.0 * rank as f64,
            dropout: 0.05,
            bias: "none".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("adapter alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("adapter dropout {} outside [0, 1)", self.dropout)));
        }
        if self.bias != "none" {
            return Err(Error::Config(format!("adapter bias mode must be \"none\", got {:?}", self.bias)));
        }
        self.target_roles().map(|_| ())
    }

    /// Block linear names selected by `targets`.
    pub fn target_roles(&self) -> Result<Vec<&'static str>> {
        match self.targets.as_str() {
            "q_proj_only" => Ok(vec!["q_proj"]),
            "all_linear" => Ok(BLOCK_LINEARS.to_vec()),
            list => list
                .split(',')
                .map(|t| {
                    let t = t.trim();
                    BLOCK_LINEARS
                        .iter()
                        .find(|&&r| r == t)
                        .copied()
                        .ok_or_else(|| Error::Config(format!("unknown adapter target {t:?}")))
                })
                .collect(),
        }
    }

    pub fn layer(&self) -> LayerAdapter {
        LayerAdapter {
            method: self.method,
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
        }
    }
}

pub fn is_adapter_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b") || name.ends_with(".dora_m")
}

/// Attaches an adapter to every targeted block linear, then freezes all
/// backbone tensors. Returns the number of adapted layers.
pub fn attach_adapters<T: Scalar>(model: &mut Model<T>, cfg: &PeftConfig, seeds: &SeedTree) -> Result<usize> {
    cfg.validate()?;
    if model.arch.kind != ModelKind::Vit {
        return Err(Error::Config("adapters need a transformer backbone".into()));
    }
    let roles = cfg.target_roles()?;
    let layer = cfg.layer();
    let mut count = 0;
    for lin in model.arch.block_linears() {
        if !roles.contains(&lin.role) {
            continue;
        }
        if model.adapters().contains_key(&lin.name) {
            return Err(Error::Contract(format!("{} already has an adapter", lin.name)));
        }
        let a_name = format!("{}.lora_a", lin.name);
        let mut rng = seeds.stream(Purpose::Adapter, name_key(&a_name));
        let bound = 1.0 / (lin.d_in as f64).sqrt();
        let a = crate::nn::uniform_init::<T>(&[cfg.rank, lin.d_in], bound, &mut rng);
        model.insert(&a_name, a);
        model.insert(&format!("{}.lora_b", lin.name), Tensor::zeros([lin.d_out, cfg.rank]));
        if cfg.method == Method::Dora {
            let w0 = dense_base::<T>(model, &lin.name)?;
            let m = row_norms(w0.data(), lin.d_out, lin.d_in);
            if let Some(r) = m.iter().position(|v| *v == T::zero()) {
                return Err(Error::Numeric(format!("{}: output unit {r} has a zero weight row", lin.name)));
            }
            model.insert(&format!("{}.dora_m", lin.name), Tensor::new([lin.d_out], m)?);
        }
        model.adapters_mut().insert(lin.name.clone(), layer);
        count += 1;
    }
    model.freeze_backbone();
    Ok(count)
}

/// Dense (dequantized if needed) base weight of a layer.
fn dense_base<T: Scalar>(model: &Model<T>, name: &str) -> Result<Tensor<T>> {
    match model.quantized().get(name) {
        Some(q) => Ok(q.dequantize()),
        None => Ok(model.param(&format!("{name}.weight"))?.clone().with_requires_grad(false)),
    }
}

/// Forward through an adapted linear.
///
/// LoRA: `y = x·W₀ᵀ + b + s·(drop(x)·Aᵀ)·Bᵀ`.
/// DoRA: `y = x·W₀ᵀ + b + drop(x)·(W' − W₀)ᵀ`, which equals `x·W'ᵀ + b`
/// with dropout off. The gradient through the row norms is exact.
pub(crate) fn adapted_linear<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    name: &str,
    ad: &LayerAdapter,
    x: Var,
    mode: &mut Mode,
) -> Result<Var> {
    let w0 = model.base_weight(g, name)?;
    let mut y = g.matmul_nt(x, w0)?;
    if let Some(b) = model.base_bias(g, name)? {
        y = g.add(y, b)?;
    }
    let a = model.leaf(g, &format!("{name}.lora_a"))?;
    let b = model.leaf(g, &format!("{name}.lora_b"))?;
    let s = T::from_f64(ad.scaling());
    let xd = mode.dropout(g, x, ad.dropout)?;
    match ad.method {
        Method::Lora => {
            let h = g.matmul_nt(xd, a)?;
            let h = g.matmul_nt(h, b)?;
            let h = g.scale(h, s);
            g.add(y, h)
        }
        Method::Dora => {
            let m = model.leaf(g, &format!("{name}.dora_m"))?;
            let wp = dora_weight(g, w0, a, b, m, s)?;
            let delta = g.sub(wp, w0)?;
            let h = g.matmul_nt(xd, delta)?;
            g.add(y, h)
        }
    }
}

/// `W' = m ⊙ V/‖V‖` per row, with `V = W₀ + s·B·A`.
fn dora_weight<T: Scalar>(g: &mut Graph<T>, w0: Var, a: Var, b: Var, m: Var, s: T) -> Result<Var> {
    let ba = g.matmul(b, a)?;
    let ba = g.scale(ba, s);
    let v = g.add(w0, ba)?;
    g.row_norm_scale(v, m)
}

/// Folds the adapter of `name` into a plain dense weight and removes it.
pub fn merge_layer<T: Scalar>(model: &mut Model<T>, name: &str) -> Result<()> {
    let ad = *model
        .adapters()
        .get(name)
        .ok_or_else(|| Error::Contract(format!("{name} has no adapter to merge")))?;
    let mut g = Graph::new();
    let w0 = g.constant(dense_base(model, name)?);
    let a = g.constant(model.param(&format!("{name}.lora_a"))?.clone());
    let b = g.constant(model.param(&format!("{name}.lora_b"))?.clone());
    let s = T::from_f64(ad.scaling());
    let merged = match ad.method {
        Method::Lora => {
            let ba = g.matmul(b, a)?;
            let ba = g.scale(ba, s);
            g.add(w0, ba)?
        }
        Method::Dora => {
            let m = g.constant(model.param(&format!("{name}.dora_m"))?.clone());
            dora_weight(&mut g, w0, a, b, m, s)?
        }
    };
    let merged = g.value(merged).clone().with_requires_grad(false);
    if let Some(q) = model.quantized_mut().remove(name) {
        if let Some(bias) = q.bias {
            let t = Tensor::new([bias.len()], bias.iter().map(|&v| T::from_f64(v)).collect())?;
            model.insert(&format!("{name}.bias"), t);
            model.param_mut(&format!("{name}.bias"))?.set_requires_grad(false);
        }
    }
    model.insert(&format!("{name}.weight"), merged);
    model.param_mut(&format!("{name}.weight"))?.set_requires_grad(false);
    for suffix in ["lora_a", "lora_b", "dora_m"] {
        model.remove_param(&format!("{name}.{suffix}"));
    }
    model.adapters_mut().remove(name);
    Ok(())
}

/// Merges every adapter. Returns the number of merged layers.
pub fn merge_all<T: Scalar>(model: &mut Model<T>) -> Result<usize> {
    let names: Vec<String> = model.adapters().keys().cloned().collect();
    for n in &names {
        merge_layer(model, n)?;
    }
    Ok(names.len())
}

/// Trainable parameter count and its share of all parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCount {
    pub trainable: u64,
    pub total: u64,
    pub fraction: f64,
}

impl ParamCount {
    fn new(trainable: u64, total: u64) -> Self {
        Self {
            trainable,
            total,
            fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        }
    }
}

pub fn count_trainable<T: Scalar>(model: &Model<T>) -> ParamCount {
    ParamCount::new(model.num_trainable(), model.num_params())
}

/// How a model is trained, for accounting purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Scratch,
    FrozenBackbone,
    Peft,
}

/// Closed-form parameter accounting that never materialises weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Accounting {
    pub backbone: u64,
    pub head: u64,
    pub adapters: u64,
    /// `(target, adapted layers, adapter parameters)` per block linear.
    pub per_target: Vec<(String, usize, u64)>,
    pub count: ParamCount,
}

pub fn accounting(arch: &ArchSpec, head: &HeadSpec, paradigm: Paradigm, peft: Option<&PeftConfig>) -> Result<Accounting> {
    arch.validate()?;
    head.validate()?;
    let backbone = arch.backbone_param_count();
    let head_n = head.param_count(arch.feature_dim(), arch.num_classes);
    let mut per: BTreeMap<&str, (usize, u64)> = BTreeMap::new();
    if paradigm == Paradigm::Peft {
        let cfg = peft.ok_or_else(|| Error::Config("peft paradigm needs an adapter config".into()))?;
        cfg.validate()?;
        let roles = cfg.target_roles()?;
        for lin in arch.block_linears() {
            if !roles.contains(&lin.role) {
                continue;
            }
            let mut n = (cfg.rank * (lin.d_in + lin.d_out)) as u64;
            if cfg.method == Method::Dora {
                n += lin.d_out as u64;
            }
            let e = per.entry(lin.role).or_default();
            e.0 += 1;
            e.1 += n;
        }
    }
    let adapters: u64 = per.values().map(|v| v.1).sum();
    let trainable = match paradigm {
        Paradigm::Scratch => backbone + head_n,
        Paradigm::FrozenBackbone => head_n,
        Paradigm::Peft => adapters + head_n,
    };
    let per_target = BLOCK_LINEARS
        .iter()
        .filter_map(|r| per.get(r).map(|&(l, n)| (r.to_string(), l, n)))
        .collect();
    Ok(Accounting {
        backbone,
        head: head_n,
        adapters,
        per_target,
        count: ParamCount::new(trainable, backbone + head_n + adapters),
    })
}

/// Adapter factors and head parameters with the adapter config, loadable
/// onto a freshly built base model with [`load_adapter_checkpoint`].
pub fn adapter_checkpoint<T: Scalar>(model: &Model<T>, cfg: &PeftConfig) -> Checkpoint {
    let mut ck = Checkpoint::new(json!({
        "kind": "adapter",
        "peft": cfg,
        "arch": model.arch,
        "head": model.head,
    }));
    for (name, t) in model.params() {
        if is_adapter_param(name) || Model::<T>::is_head_param(name) {
            ck.tensors.insert(name.clone(), AnyTensor::from_tensor(t));
        }
    }
    ck
}

/// Attaches the stored adapters to `model` and loads their weights.
pub fn load_adapter_checkpoint<T: Scalar>(model: &mut Model<T>, ck: &Checkpoint, seeds: &SeedTree) -> Result<PeftConfig> {
    if ck.manifest.get("kind").and_then(|k| k.as_str()) != Some("adapter") {
        return Err(Error::Format("not an adapter checkpoint".into()));
    }
    let cfg: PeftConfig = serde_json::from_value(ck.manifest.get("peft").cloned().unwrap_or_default())
        .map_err(|e| Error::Format(format!("peft: {e}")))?;
    attach_adapters(model, &cfg, seeds)?;
    model.load_params(ck)?;
    Ok(cfg)
}
