//! Four-stage residual CNN baseline, channels-last internally.
//!
//! Each convolution is followed by a layer norm over channels rather than
//! batch norm, so the forward pass stays a per-sample function.

use super::model::{init_stream, uniform_init, Model};
use crate::error::Result;
use crate::rng::SeedTree;
use crate::tensor::{ConvGeom, Graph, Scalar, Tensor, Var};

impl<T: Scalar> Model<T> {
    fn add_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, seeds: &SeedTree) {
        let wname = format!("{name}.weight");
        let fan_in = cin * k * k;
        let w = uniform_init(&[cout, fan_in], 1.0 / (fan_in as f64).sqrt(), &mut init_stream(seeds, &wname));
        self.insert(&wname, w);
        self.insert(&format!("{name}.bias"), Tensor::zeros([cout]));
    }

    pub(crate) fn init_cnn(&mut self, seeds: &SeedTree) {
        let a = self.arch.clone();
        self.add_conv("stem.conv", a.in_channels, a.width, 3, seeds);
        self.add_norm("stem.norm", a.width);
        let mut cin = a.width;
        for (s, w) in a.stage_widths().into_iter().enumerate() {
            for b in 0..a.depth {
                let p = format!("stages.{s}.{b}");
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                self.add_conv(&format!("{p}.conv1"), cin, w, 3, seeds);
                self.add_norm(&format!("{p}.norm1"), w);
                self.add_conv(&format!("{p}.conv2"), w, w, 3, seeds);
                self.add_norm(&format!("{p}.norm2"), w);
                if stride != 1 || cin != w {
                    self.add_conv(&format!("{p}.down"), cin, w, 1, seeds);
                    self.add_norm(&format!("{p}.down_norm"), w);
                }
                cin = w;
            }
        }
    }

    /// Convolution of `x[B×H×W×C]` followed by its norm.
    fn conv_norm(&self, g: &mut Graph<T>, name: &str, norm: &str, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (b, h, w) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let geom = ConvGeom {
            kernel: k,
            stride,
            padding: k / 2,
        };
        let (ho, wo) = (geom.output_size(h).unwrap_or(0), geom.output_size(w).unwrap_or(0));
        let cols = g.im2col(x, geom)?;
        let wv = self.leaf(g, &format!("{name}.weight"))?;
        let y = g.matmul_nt(cols, wv)?;
        let bias = self.leaf(g, &format!("{name}.bias"))?;
        let y = g.add(y, bias)?;
        let cout = g.shape(y)[1];
        let y = g.reshape(y, &[b, ho, wo, cout])?;
        self.layernorm(g, norm, y)
    }

    pub(crate) fn cnn_features(&self, g: &mut Graph<T>, images: &Tensor<T>) -> Result<Var> {
        let x = g.constant(images.clone());
        let x = g.permute(x, &[0, 2, 3, 1])?;
        let x = self.conv_norm(g, "stem.conv", "stem.norm", x, 3, 1)?;
        let mut x = g.relu(x);
        let mut cin = self.arch.width;
        for (s, w) in self.arch.stage_widths().into_iter().enumerate() {
            for b in 0..self.arch.depth {
                let p = format!("stages.{s}.{b}");
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let h = self.conv_norm(g, &format!("{p}.conv1"), &format!("{p}.norm1"), x, 3, stride)?;
                let h = g.relu(h);
                let h = self.conv_norm(g, &format!("{p}.conv2"), &format!("{p}.norm2"), h, 3, 1)?;
                let skip = if stride != 1 || cin != w {
                    self.conv_norm(g, &format!("{p}.down"), &format!("{p}.down_norm"), x, 1, stride)?
                } else {
                    x
                };
                let y = g.add(h, skip)?;
                x = g.relu(y);
                cin = w;
            }
        }
        let (b, h, w, c) = {
            let s = g.shape(x);
            (s[0], s[1], s[2], s[3])
        };
        let x = g.reshape(x, &[b, h * w, c])?;
        g.mean_tokens(x)
    }
}
