use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vit,
    ResnetCnn,
}

/// Backbone hyperparameters.
///
/// For [`ModelKind::Vit`] `width` is the embedding size and `depth` the
/// number of transformer blocks. For [`ModelKind::ResnetCnn`] `width` is the
/// channel count of the first of four stages (doubling per stage) and
/// `depth` the number of residual blocks per stage; `heads`, `mlp_hidden`
/// and `patch_size` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ModelKind,
    pub width: usize,
    pub depth: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub mlp_hidden: usize,
    #[serde(default = "one")]
    pub patch_size: usize,
    pub image_size: usize,
    pub num_classes: usize,
    #[serde(default = "three")]
    pub in_channels: usize,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

/// Adapter-addressable linear layers inside each transformer block.
pub const BLOCK_LINEARS: [&str; 6] = ["q_proj", "k_proj", "v_proj", "o_proj", "mlp_up", "mlp_down"];

/// One linear layer of the backbone, as seen by adapter accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearShape {
    pub name: String,
    /// Short name within the block, one of [`BLOCK_LINEARS`].
    pub role: &'static str,
    pub d_out: usize,
    pub d_in: usize,
}

impl ArchSpec {
    /// ViT-Small: 16-pixel patches, 384-wide embedding, 12 blocks.
    pub fn vit_small(num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Vit,
            width: 384,
            depth: 12,
            heads: 6,
            mlp_hidden: 1536,
            patch_size: 16,
            image_size: 224,
            num_classes,
            in_channels: 3,
        }
    }

    /// Accounting-only stand-in for a 6.7B-parameter ViT with 4096-wide
    /// embeddings and 40 blocks. Never instantiate it.
    pub fn dinov3_like(num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Vit,
            width: 4096,
            depth: 40,
            heads: 32,
            mlp_hidden: 3 * 4096,
            patch_size: 16,
            image_size: 224,
            num_classes,
            in_channels: 3,
        }
    }

    /// Desk-scale ViT used by the toy experiments: 32-wide, two blocks, a
    /// 6× MLP. The wide MLP keeps a linear head under 1% of all parameters.
    pub fn toy_vit(num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Vit,
            width: 32,
            depth: 2,
            heads: 2,
            mlp_hidden: 192,
            patch_size: 4,
            image_size: 16,
            num_classes,
            in_channels: 3,
        }
    }

    /// Desk-scale residual CNN (four stages, two blocks each).
    pub fn toy_cnn(num_classes: usize) -> Self {
        Self {
            kind: ModelKind::ResnetCnn,
            width: 8,
            depth: 2,
            heads: 1,
            mlp_hidden: 0,
            patch_size: 1,
            image_size: 16,
            num_classes,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.width == 0 || self.depth == 0 || self.image_size == 0 || self.in_channels == 0 {
            return fail("width, depth, image_size and in_channels must be positive".into());
        }
        if self.kind == ModelKind::Vit {
            if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
                return fail(format!(
                    "width {} is not divisible by {} heads",
                    self.width, self.heads
                ));
            }
            if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
                return fail(format!(
                    "image_size {} is not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ));
            }
            if self.mlp_hidden == 0 {
                return fail("mlp_hidden must be positive".into());
            }
        }
        Ok(())
    }

    /// Patch tokens per image (ViT only).
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size.max(1);
        side * side
    }

    /// Sequence length including the CLS token (ViT only).
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Width of the pooled feature vector fed to the head.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            ModelKind::Vit => self.width,
            ModelKind::ResnetCnn => 8 * self.width,
        }
    }

    /// Channel width of each CNN stage.
    pub fn stage_widths(&self) -> [usize; 4] {
        [self.width, 2 * self.width, 4 * self.width, 8 * self.width]
    }

    /// Adapter-addressable linears of every transformer block.
    pub fn block_linears(&self) -> Vec<LinearShape> {
        if self.kind != ModelKind::Vit {
            return Vec::new();
        }
        let (d, m) = (self.width, self.mlp_hidden);
        let mut out = Vec::with_capacity(6 * self.depth);
        for i in 0..self.depth {
            for role in BLOCK_LINEARS {
                let (d_out, d_in) = match role {
                    "mlp_up" => (m, d),
                    "mlp_down" => (d, m),
                    _ => (d, d),
                };
                out.push(LinearShape {
                    name: format!("blocks.{i}.{role}"),
                    role,
                    d_out,
                    d_in,
                });
            }
        }
        out
    }

    /// Closed-form backbone parameter count (biases included).
    pub fn backbone_param_count(&self) -> u64 {
        let c = self.in_channels as u64;
        let d = self.width as u64;
        match self.kind {
            ModelKind::Vit => {
                let m = self.mlp_hidden as u64;
                let p = self.patch_size as u64;
                let patch = d * c * p * p + d;
                let tokens = d + self.num_tokens() as u64 * d;
                let block = 2 * 2 * d + 4 * (d * d + d) + (m * d + m) + (d * m + d);
                patch + tokens + self.depth as u64 * block + 2 * d
            }
            ModelKind::ResnetCnn => {
                let conv = |cin: u64, cout: u64, k: u64| cout * cin * k * k + cout;
                let norm = |ch: u64| 2 * ch;
                let mut total = conv(c, d, 3) + norm(d);
                let mut cin = d;
                for (s, &w) in self.stage_widths().iter().enumerate() {
                    let w = w as u64;
                    for b in 0..self.depth {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        total += conv(cin, w, 3) + norm(w) + conv(w, w, 3) + norm(w);
                        if stride != 1 || cin != w {
                            total += conv(cin, w, 1) + norm(w);
                        }
                        cin = w;
                    }
                }
                total
            }
        }
    }
}

/// Classification head: hidden linear layers with ReLU and dropout, then a
/// linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
    pub dropout: Vec<f64>,
}

impl HeadSpec {
    /// 4096 → 1024 → 512 → C with dropout 0.30 and 0.15 (input width comes
    /// from the backbone).
    pub fn full() -> Self {
        Self {
            hidden: vec![1024, 512],
            dropout: vec![0.30, 0.15],
        }
    }

    /// Same shape as [`HeadSpec::full`] at toy width.
    pub fn toy() -> Self {
        Self {
            hidden: vec![64, 32],
            dropout: vec![0.30, 0.15],
        }
    }

    /// A single linear layer.
    pub fn linear() -> Self {
        Self {
            hidden: Vec::new(),
            dropout: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() != self.dropout.len() {
            return Err(Error::Config(format!(
                "head has {} hidden layers but {} dropout rates",
                self.hidden.len(),
                self.dropout.len()
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("head hidden widths must be positive".into()));
        }
        if let Some(p) = self.dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::Config(format!("head dropout {p} outside [0, 1)")));
        }
        Ok(())
    }

    /// `(d_in, d_out)` of every head layer.
    pub fn layer_dims(&self, features: usize, classes: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut d_in = features;
        for &h in &self.hidden {
            dims.push((d_in, h));
            d_in = h;
        }
        dims.push((d_in, classes));
        dims
    }

    pub fn param_count(&self, features: usize, classes: usize) -> u64 {
        self.layer_dims(features, classes)
            .iter()
            .map(|&(i, o)| (i * o + o) as u64)
            .sum()
    }
}
