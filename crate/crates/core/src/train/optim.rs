use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// AdamW with decoupled weight decay. Moments are kept in `f64` whatever the
/// parameter precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter named in `params`. A parameter without
    /// an entry in `grads` is treated as having a zero gradient. Nothing is
    /// modified when any gradient is non-finite or mis-sized.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        names: &[String],
        grads: &BTreeMap<String, Vec<T>>,
        lr: f64,
    ) -> Result<()> {
        for name in names {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("optimizer: no parameter named {name}")))?;
            if let Some(g) = grads.get(name) {
                if g.len() != p.numel() {
                    return Err(Error::shape("adamw", &[g.len()], p.shape()));
                }
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient in {name} at element {i}")));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let decay = 1.0 - lr * self.weight_decay;
        for name in names {
            let p = params.get_mut(name).expect("checked above");
            let n = p.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name);
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i].as_f64());
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let x = theta.as_f64() * decay - lr * update;
                *theta = T::from_f64(x);
            }
        }
        Ok(())
    }
}
