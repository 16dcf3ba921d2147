//! Training-time augmentation: geometric, colour, noise/blur and occlusion
//! transforms applied in a fixed order, each with its own probability.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{gray, hsv_to_rgb, rgb_to_hsv, Image};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Probabilities and ranges of every transform. [`Default`] gives the
/// medium-intensity pipeline used for fine-tuning at 224 px.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub rotate_p: f64,
    pub rotate_limit: f64,
    pub shift_scale_rotate_p: f64,
    pub shift_limit: f64,
    pub scale_range: (f64, f64),
    /// Rotation range of the shift-scale-rotate step, in degrees.
    pub ssr_rotate_limit: f64,
    pub perspective_p: f64,
    pub perspective_scale: (f64, f64),
    /// One colour transform is chosen uniformly when the group fires.
    pub color_p: f64,
    pub brightness_contrast: f64,
    /// Hue shift in OpenCV units (half-degrees); saturation and value on
    /// the 0–255 scale.
    pub hsv_shift: (f64, f64, f64),
    /// Brightness, contrast, saturation and hue (fraction of the circle).
    pub jitter: (f64, f64, f64, f64),
    pub noise_p: f64,
    /// Gaussian noise variance range on the 0–255 scale.
    pub noise_var: (f64, f64),
    pub blur_kernel: (usize, usize),
    pub motion_kernel: usize,
    pub dropout_p: f64,
    pub max_holes: usize,
    /// Largest hole side as a fraction of the image side.
    pub max_hole_frac: f64,
    pub resize: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            rotate_p: 0.5,
            rotate_limit: 15.0,
            shift_scale_rotate_p: 0.5,
            shift_limit: 0.1,
            scale_range: (0.8, 1.2),
            ssr_rotate_limit: 45.0,
            perspective_p: 0.3,
            perspective_scale: (0.05, 0.10),
            color_p: 0.8,
            brightness_contrast: 0.2,
            hsv_shift: (10.0, 20.0, 20.0),
            jitter: (0.2, 0.2, 0.2, 0.1),
            noise_p: 0.3,
            noise_var: (10.0, 50.0),
            blur_kernel: (3, 5),
            motion_kernel: 5,
            dropout_p: 0.2,
            max_holes: 8,
            max_hole_frac: 0.1,
            resize: 224,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    pub fn with_resize(resize: usize) -> Self {
        Self {
            resize,
            ..Self::default()
        }
    }

    /// Every probability zero: only the resize remains.
    pub fn resize_only(resize: usize) -> Self {
        Self {
            hflip_p: 0.0,
            rotate_p: 0.0,
            shift_scale_rotate_p: 0.0,
            perspective_p: 0.0,
            color_p: 0.0,
            noise_p: 0.0,
            dropout_p: 0.0,
            ..Self::with_resize(resize)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.hflip_p,
            self.rotate_p,
            self.shift_scale_rotate_p,
            self.perspective_p,
            self.color_p,
            self.noise_p,
            self.dropout_p,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if self.resize == 0 {
            return Err(Error::Config("resize target must be positive".into()));
        }
        if self.std.contains(&0.0) {
            return Err(Error::Config("normalization std must be non-zero".into()));
        }
        let (k0, k1) = self.blur_kernel;
        if k0 == 0 || k1 < k0 || self.motion_kernel == 0 {
            return Err(Error::Config("blur kernel sizes must be positive and ordered".into()));
        }
        if !(self.max_hole_frac > 0.0 && self.max_hole_frac <= 1.0) {
            return Err(Error::Config(format!("max_hole_frac {} outside (0, 1]", self.max_hole_frac)));
        }
        if self.scale_range.0 <= 0.0|| self.scale_range.1 < self.scale_range.0 {
            return Err(Error::Config("scale range must be positive and ordered".into()));
        }
        Ok(())
    }
}

fn sym(rng: &mut StreamRng, limit: f64) -> f64 {
    if limit == 0.0 {
        0.0
    } else {
        rng.gen_range(-limit..=limit)
    }
}

fn range(rng: &mut StreamRng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn fires(rng: &mut StreamRng, p: f64) -> bool {
    rng.gen::<f64>() < p
}

/// One augmented copy of `image`, resized to `cfg.resize` and clamped to
/// `[0, 1]`. The result depends only on the image and the stream state.
pub fn augment(image: &Image, cfg: &AugmentConfig, rng: &mut StreamRng) -> Image {
    let mut im = image.clone();
    let (h, w) = (im.height as f64, im.width as f64);

    if fires(rng, cfg.hflip_p) {
        im = im.hflip();
    }
    if fires(rng, cfg.rotate_p) {
        im = im.affine(sym(rng, cfg.rotate_limit), 1.0, 0.0, 0.0);
    }
    if fires(rng, cfg.shift_scale_rotate_p) {
        let dx = sym(rng, cfg.shift_limit) * w;
        let dy = sym(rng, cfg.shift_limit) * h;
        let scale = range(rng, cfg.scale_range);
        let angle = sym(rng, cfg.ssr_rotate_limit);
        im = im.affine(angle, scale, dy, dx);
    }
    if fires(rng, cfg.perspective_p) {
        let sigma = range(rng, cfg.perspective_scale);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let mut jitter = || -> f64 { normal.sample(rng).abs() };
        let (wm, hm) = (w - 1.0, h - 1.0);
        let quad = [
            (jitter() * w, jitter() * h),
            (wm - jitter() * w, jitter() * h),
            (wm - jitter() * w, hm - jitter() * h),
            (jitter() * w, hm - jitter() * h),
        ];
        im = im.perspective(quad);
    }

    if fires(rng, cfg.color_p) {
        match rng.gen_range(0..3) {
            0 => {
                let alpha = 1.0 + sym(rng, cfg.brightness_contrast) as f32;
                let beta = sym(rng, cfg.brightness_contrast) as f32;
                im.map_pixels(|p| p.map(|v| v * alpha + beta));
            }
            1 => {
                let (hs, ss, vs) = cfg.hsv_shift;
                let dh = 2.0 * sym(rng, hs) as f32;
                let ds = (sym(rng, ss) / 255.0) as f32;
                let dv = (sym(rng, vs) / 255.0) as f32;
                im.map_pixels(|p| {
                    let [hh, s, v] = rgb_to_hsv(p);
                    hsv_to_rgb([hh + dh, (s + ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0)])
                });
            }
            _ => {
                let (b, c, s, hue) = cfg.jitter;
                let fb = 1.0 + sym(rng, b) as f32;
                let fc = 1.0 + sym(rng, c) as f32;
                let fs = 1.0 + sym(rng, s) as f32;
                let dh = (360.0 * sym(rng, hue)) as f32;
                im.map_pixels(|p| p.map(|v| (v * fb).clamp(0.0, 1.0)));
                let mean = gray(im.mean_color());
                im.map_pixels(|p| p.map(|v| (mean + (v - mean) * fc).clamp(0.0, 1.0)));
                im.map_pixels(|p| {
                    let g = gray(p);
                    p.map(|v| (g + (v - g) * fs).clamp(0.0, 1.0))
                });
                im.map_pixels(|p| {
                    let [hh, s, v] = rgb_to_hsv(p);
                    hsv_to_rgb([hh + dh, s, v])
                });
            }
        }
        im.clamp_unit();
    }

    if fires(rng, cfg.noise_p) {
        match rng.gen_range(0..3) {
            0 => {
                let sigma = range(rng, cfg.noise_var).sqrt() / 255.0;
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                for v in &mut im.data {
                    *v += normal.sample(rng) as f32;
                }
            }
            1 => {
                let (k0, k1) = cfg.blur_kernel;
                let odd: Vec<usize> = (k0..=k1).filter(|k| k % 2 == 1).collect();
                let k = if odd.is_empty() { k0 | 1 } else { odd[rng.gen_range(0..odd.len())] };
                im = im.convolve(&gaussian_kernel(k), k);
            }
            _ => {
                let k = cfg.motion_kernel | 1;
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                im = im.convolve(&motion_kernel(k, angle), k);
            }
        }
        im.clamp_unit();
    }

    if fires(rng, cfg.dropout_p) {
        let holes = rng.gen_range(1..=cfg.max_holes.max(1));
        let max_h = ((cfg.max_hole_frac * h).round() as usize).max(1);
        let max_w = ((cfg.max_hole_frac * w).round() as usize).max(1);
        let fill = im.mean_color();
        for _ in 0..holes {
            let hh = rng.gen_range(1..=max_h);
            let ww = rng.gen_range(1..=max_w);
            let y0 = rng.gen_range(0..=im.height - hh);
            let x0 = rng.gen_range(0..=im.width - ww);
            for y in y0..y0 + hh {
                for x in x0..x0 + ww {
                    im.set(y, x, fill);
                }
            }
        }
    }

    let mut out = im.resize(cfg.resize, cfg.resize);
    out.clamp_unit();
    out
}

/// Normalised `k×k` Gaussian with OpenCV's default sigma for size `k`.
pub fn gaussian_kernel(k: usize) -> Vec<f32> {
    let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let r = (k / 2) as f64;
    let one: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = one.iter().sum();
    let mut out = Vec::with_capacity(k * k);
    for a in &one {
        for b in &one {
            out.push((a * b / (s * s)) as f32);
        }
    }
    out
}

/// Line of length `k` through the centre at `angle` radians, normalised.
pub fn motion_kernel(k: usize, angle: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; k * k];
    let r = (k / 2) as f64;
    let (s, c) = angle.sin_cos();
    for step in 0..k {
        let t = step as f64 - r;
        let x = (r + t * c).round() as usize;
        let y = (r + t * s).round() as usize;
        out[y.min(k - 1) * k + x.min(k - 1)] = 1.0;
    }
    let n: f32 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= n);
    out
}
