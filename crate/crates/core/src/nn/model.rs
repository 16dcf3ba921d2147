use std::collections::BTreeMap;

use rand::Rng;

use super::arch::{ArchSpec, HeadSpec, ModelKind};
use crate::error::{Error, Result};
use crate::peft::{self, LayerAdapter};
use crate::quant::{quantize_linear, QuantConfig, QuantizedLinear};
use crate::rng::{name_key, Purpose, SeedTree, StreamRng};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Whether a forward pass trains (dropout active, drawing from the given
/// stream) or evaluates.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut StreamRng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub(crate) fn dropout<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => g.dropout(x, p, &mut **rng, true),
        }
    }
}

/// Backbone plus classification head, with every tensor stored by name.
///
/// Dense parameters live in one ordered map (`blocks.0.q_proj.weight`,
/// `head.fc0.bias`, ...). A linear layer whose base weight has been
/// quantized keeps it in a separate map under the layer name, and any
/// attached adapter's factors are stored as `<layer>.lora_a`,
/// `<layer>.lora_b` and (DoRA) `<layer>.dora_m`.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub arch: ArchSpec,
    pub head: HeadSpec,
    params: BTreeMap<String, Tensor<T>>,
    quantized: BTreeMap<String, QuantizedLinear>,
    adapters: BTreeMap<String, LayerAdapter>,
}

pub(crate) fn uniform_init<T: Scalar>(shape: &[usize], bound: f64, rng: &mut StreamRng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.gen_range(-bound..=bound)))
}

/// Weight init stream for a named tensor.
pub(crate) fn init_stream(seeds: &SeedTree, name: &str) -> StreamRng {
    seeds.stream(Purpose::Init, name_key(name))
}

impl<T: Scalar> Model<T> {
    /// Builds a randomly initialised model. Linear and convolution weights
    /// are uniform in `±1/sqrt(fan_in)`, biases zero, norm gains one, and
    /// the CLS token and position embeddings uniform in `±0.02`.
    pub fn build(arch: ArchSpec, head: HeadSpec, seeds: &SeedTree) -> Result<Self> {
        arch.validate()?;
        head.validate()?;
        let mut m = Self::empty(arch, head);
        match m.arch.kind {
            ModelKind::Vit => m.init_vit(seeds),
            ModelKind::ResnetCnn => m.init_cnn(seeds),
        }
        let dims = m.head.layer_dims(m.arch.feature_dim(), m.arch.num_classes);
        for (j, (d_in, d_out)) in dims.into_iter().enumerate() {
            m.add_linear(&format!("head.fc{j}"), d_out, d_in, seeds);
        }
        Ok(m)
    }

    pub(crate) fn empty(arch: ArchSpec, head: HeadSpec) -> Self {
        Self {
            arch,
            head,
            params: BTreeMap::new(),
            quantized: BTreeMap::new(),
            adapters: BTreeMap::new(),
        }
    }

    pub(crate) fn add_linear(&mut self, name: &str, d_out: usize, d_in: usize, seeds: &SeedTree) {
        let wname = format!("{name}.weight");
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = uniform_init(&[d_out, d_in], bound, &mut init_stream(seeds, &wname));
        self.insert(&wname, w);
        self.insert(&format!("{name}.bias"), Tensor::zeros([d_out]));
    }

    pub(crate) fn add_norm(&mut self, name: &str, d: usize) {
        self.insert(&format!("{name}.weight"), Tensor::ones([d]));
        self.insert(&format!("{name}.bias"), Tensor::zeros([d]));
    }

    pub(crate) fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.params.insert(name.to_string(), t.with_requires_grad(true));
    }

    // ------------------------------------------------------------ storage

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub(crate) fn remove_param(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.remove(name)
    }

    pub fn quantized(&self) -> &BTreeMap<String, QuantizedLinear> {
        &self.quantized
    }

    pub(crate) fn quantized_mut(&mut self) -> &mut BTreeMap<String, QuantizedLinear> {
        &mut self.quantized
    }

    pub fn adapters(&self) -> &BTreeMap<String, LayerAdapter> {
        &self.adapters
    }

    pub(crate) fn adapters_mut(&mut self) -> &mut BTreeMap<String, LayerAdapter> {
        &mut self.adapters
    }

    /// Names of all parameters that currently require gradients.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Number of stored parameters, quantized weights included.
    pub fn num_params(&self) -> u64 {
        let dense: usize = self.params.values().map(Tensor::numel).sum();
        let quant: usize = self
            .quantized
            .values()
            .map(|q| q.numel() + q.bias.as_ref().map_or(0, Vec::len))
            .sum();
        (dense + quant) as u64
    }

    pub fn num_trainable(&self) -> u64 {
        self.params
            .values()
            .filter(|t| t.requires_grad())
            .map(|t| t.numel() as u64)
            .sum()
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Excludes every backbone tensor from training; head and adapter
    /// factors stay trainable.
    pub fn freeze_backbone(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if !Self::is_head_param(name) && !peft::is_adapter_param(name) {
                t.set_requires_grad(false);
            }
        }
    }

    /// Replaces the dense weight of every adapter-addressable linear by its
    /// NF4 quantization. Biases move into the quantized layer.
    pub fn quantize_backbone(&mut self, cfg: QuantConfig) -> Result<usize> {
        let mut count = 0;
        for lin in self.arch.block_linears() {
            let wname = format!("{}.weight", lin.name);
            let Some(w) = self.params.remove(&wname) else {
                continue;
            };
            let bname = format!("{}.bias", lin.name);
            let b = self.params.remove(&bname);
            let q = quantize_linear(&w, b.as_ref(), cfg)?;
            self.quantized.insert(lin.name.clone(), q);
            count += 1;
        }
        Ok(count)
    }

    /// Gradients of every named leaf, summed per name.
    pub fn collect_grads(&self, g: &Graph<T>) -> BTreeMap<String, Vec<T>> {
        let mut out: BTreeMap<String, Vec<T>> = BTreeMap::new();
        for (name, v) in g.named_leaves() {
            let Some(grad) = g.grad(*v) else { continue };
            match out.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, &b)| *a = *a + b),
                None => {
                    out.insert(name.clone(), grad.to_vec());
                }
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            head: self.head.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            quantized: self.quantized.clone(),
            adapters: self.adapters.clone(),
        }
    }

    // ------------------------------------------------------------ forward

    pub(crate) fn leaf(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.named_leaf(name, self.param(name)?))
    }

    /// Dense base weight of a linear layer as a graph node: a named leaf
    /// when stored densely, otherwise a constant holding the dequantized
    /// weight.
    pub(crate) fn base_weight(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        match self.quantized.get(name) {
            Some(q) => Ok(g.constant(q.dequantize())),
            None => self.leaf(g, &format!("{name}.weight")),
        }
    }

    pub(crate) fn base_bias(&self, g: &mut Graph<T>, name: &str) -> Result<Option<Var>> {
        match self.quantized.get(name) {
            Some(q) => Ok(match &q.bias {
                Some(b) => {
                    let t = Tensor::new([b.len()], b.iter().map(|&v| T::from_f64(v)).collect())?;
                    Some(g.constant(t))
                }
                None => None,
            }),
            None => {
                let bname = format!("{name}.bias");
                match self.params.get(&bname) {
                    Some(b) => Ok(Some(g.named_leaf(&bname, b))),
                    None => Ok(None),
                }
            }
        }
    }

    /// `x[..., d_in] -> [..., d_out]` through layer `name`, including its
    /// adapter when one is attached.
    pub fn linear(&self, g: &mut Graph<T>, name: &str, x: Var, mode: &mut Mode) -> Result<Var> {
        if let Some(ad) = self.adapters.get(name) {
            return peft::adapted_linear(self, g, name, ad, x, mode);
        }
        let w = self.base_weight(g, name)?;
        let y = g.matmul_nt(x, w)?;
        match self.base_bias(g, name)? {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }

    pub(crate) fn layernorm(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let gamma = self.leaf(g, &format!("{name}.weight"))?;
        let beta = self.leaf(g, &format!("{name}.bias"))?;
        g.layernorm(x, gamma, beta, T::from_f64(1e-6))
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let a = &self.arch;
        let want = [a.in_channels, a.image_size, a.image_size];
        if images.ndim() != 4 || images.shape()[1..] != want {
            return Err(Error::shape("images", images.shape(), &want));
        }
        Ok(())
    }

    /// Pooled features `[B×f]` of images `[B×C×H×W]`.
    pub fn forward_features(&self, g: &mut Graph<T>, images: &Tensor<T>, mode: &mut Mode) -> Result<Var> {
        self.check_images(images)?;
        match self.arch.kind {
            ModelKind::Vit => self.vit_features(g, images, mode),
            ModelKind::ResnetCnn => self.cnn_features(g, images),
        }
    }

    /// Head applied to features `[B×f]`.
    pub fn forward_head(&self, g: &mut Graph<T>, features: Var, mode: &mut Mode) -> Result<Var> {
        let mut h = features;
        let last = self.head.hidden.len();
        for j in 0..=last {
            h = self.linear(g, &format!("head.fc{j}"), h, mode)?;
            if j < last {
                h = g.relu(h);
                h = mode.dropout(g, h, self.head.dropout[j])?;
            }
        }
        Ok(h)
    }

    /// Logits `[B×C]`.
    pub fn forward_logits(&self, g: &mut Graph<T>, images: &Tensor<T>, mode: &mut Mode) -> Result<Var> {
        let f = self.forward_features(g, images, mode)?;
        self.forward_head(g, f, mode)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let y = self.forward_logits(&mut g, images, &mut Mode::Eval)?;
        Ok(g.value(y).clone())
    }
}
