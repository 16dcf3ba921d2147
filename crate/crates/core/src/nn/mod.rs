//! Backbones (tiny ViT, residual CNN), the classification head, and model
//! checkpoints.

mod arch;
pub mod checkpoint;
mod cnn;
mod model;
mod vit;

use std::collections::BTreeMap;

use serde_json::{json, Value};

pub use arch::{ArchSpec, HeadSpec, LinearShape, ModelKind, BLOCK_LINEARS};
pub use checkpoint::{AnyTensor, Checkpoint};
pub use model::{Mode, Model};
pub(crate) use model::uniform_init;
pub use vit::patchify;

use crate::error::{Error, Result};
use crate::peft::LayerAdapter;
use crate::tensor::Scalar;

impl<T: Scalar> Model<T> {
    /// Every tensor, quantized layer and adapter setting, plus `extra`
    /// merged into the manifest.
    pub fn to_checkpoint(&self, extra: Value) -> Checkpoint {
        let mut manifest = json!({
            "kind": "model",
            "arch": self.arch,
            "head": self.head,
            "adapters": self.adapters(),
        });
        if let (Some(m), Value::Object(e)) = (manifest.as_object_mut(), extra) {
            m.extend(e);
        }
        let mut ck = Checkpoint::new(manifest);
        for (name, t) in self.params() {
            ck.tensors.insert(name.clone(), AnyTensor::from_tensor(t));
        }
        ck.quantized = self.quantized().clone();
        ck
    }

    /// Rebuilds a model from [`Model::to_checkpoint`] output.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ck.manifest
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("manifest lacks `{k}`")))
        };
        let arch: ArchSpec =
            serde_json::from_value(field("arch")?).map_err(|e| Error::Format(format!("arch: {e}")))?;
        let head: HeadSpec =
            serde_json::from_value(field("head")?).map_err(|e| Error::Format(format!("head: {e}")))?;
        let adapters: BTreeMap<String, LayerAdapter> = match ck.manifest.get("adapters") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("adapters: {e}")))?,
            None => BTreeMap::new(),
        };
        arch.validate()?;
        head.validate()?;
        let mut m = Model::empty(arch, head);
        for (name, t) in &ck.tensors {
            m.params_mut().insert(name.clone(), t.to_tensor());
        }
        *m.quantized_mut() = ck.quantized.clone();
        *m.adapters_mut() = adapters;
        Ok(m)
    }

    /// Overwrites this model's tensors with same-named checkpoint tensors.
    /// Every stored tensor must already exist here with the same shape.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, t) in &ck.tensors {
            let dst = self.param_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::shape("load_params", dst.shape(), t.shape()));
            }
            let rg = dst.requires_grad();
            *dst = t.to_tensor::<T>().with_requires_grad(rg);
        }
        Ok(())
    }
}
