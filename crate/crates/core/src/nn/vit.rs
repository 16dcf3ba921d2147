//! Pre-norm Vision Transformer with a CLS token and learned absolute
//! position embeddings.

use super::model::{init_stream, uniform_init, Mode, Model};
use crate::error::Result;
use crate::rng::SeedTree;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Splits `[B×C×H×W]` images into `[B×N×(C·p·p)]` patch rows, patches in
/// raster order and each row ordered `(c, dy, dx)`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, p: usize) -> Tensor<T> {
    let s = images.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let row = c * p * p;
    let src = images.data();
    let mut out = Vec::with_capacity(b * gh * gw * row);
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for dy in 0..p {
                        let start = ((bi * c + ci) * h + py * p + dy) * w + px * p;
                        out.extend_from_slice(&src[start..start + p]);
                    }
                }
            }
        }
    }
    Tensor::new([b, gh * gw, row], out).expect("patch layout")
}

impl<T: Scalar> Model<T> {
    pub(crate) fn init_vit(&mut self, seeds: &SeedTree) {
        let a = self.arch.clone();
        let d = a.width;
        self.add_linear("patch_embed", d, a.in_channels * a.patch_size * a.patch_size, seeds);
        self.insert("cls_token", uniform_init(&[d], 0.02, &mut init_stream(seeds, "cls_token")));
        self.insert(
            "pos_embed",
            uniform_init(&[a.num_tokens(), d], 0.02, &mut init_stream(seeds, "pos_embed")),
        );
        for i in 0..a.depth {
            let p = format!("blocks.{i}");
            self.add_norm(&format!("{p}.ln1"), d);
            for role in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                self.add_linear(&format!("{p}.{role}"), d, d, seeds);
            }
            self.add_norm(&format!("{p}.ln2"), d);
            self.add_linear(&format!("{p}.mlp_up"), a.mlp_hidden, d, seeds);
            self.add_linear(&format!("{p}.mlp_down"), d, a.mlp_hidden, seeds);
        }
        self.add_norm("norm", d);
    }

    /// Multi-head self-attention on `x[B×T×d]` (already normalised).
    fn attention(&self, g: &mut Graph<T>, prefix: &str, x: Var, mode: &mut Mode) -> Result<Var> {
        let (b, t, d) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let h = self.arch.heads;
        let dh = d / h;
        let split = |g: &mut Graph<T>, role: &str, mode: &mut Mode| -> Result<Var> {
            let y = self.linear(g, &format!("{prefix}.{role}"), x, mode)?;
            let y = g.reshape(y, &[b, t, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[b * h, t, dh])
        };
        let q = split(g, "q_proj", mode)?;
        let k = split(g, "k_proj", mode)?;
        let v = split(g, "v_proj", mode)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax_rows(scores)?;
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, &[b, h, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        self.linear(g, &format!("{prefix}.o_proj"), ctx, mode)
    }

    pub(crate) fn vit_features(&self, g: &mut Graph<T>, images: &Tensor<T>, mode: &mut Mode) -> Result<Var> {
        let patches = g.constant(patchify(images, self.arch.patch_size));
        let x = self.linear(g, "patch_embed", patches, mode)?;
        let cls = self.leaf(g, "cls_token")?;
        let x = g.prepend_token(x, cls)?;
        let pos = self.leaf(g, "pos_embed")?;
        let mut x = g.add(x, pos)?;
        for i in 0..self.arch.depth {
            let p = format!("blocks.{i}");
            let h = self.layernorm(g, &format!("{p}.ln1"), x)?;
            let h = self.attention(g, &p, h, mode)?;
            x = g.add(x, h)?;
            let h = self.layernorm(g, &format!("{p}.ln2"), x)?;
            let h = self.linear(g, &format!("{p}.mlp_up"), h, mode)?;
            let h = g.gelu(h);
            let h = self.linear(g, &format!("{p}.mlp_down"), h, mode)?;
            x = g.add(x, h)?;
        }
        let x = self.layernorm(g, "norm", x)?;
        g.select_token(x, 0)
    }
}
