//! Procedural nine-class image dataset with a small, clean training set and
//! a large, imbalanced test set drawn from a shifted distribution.
//!
//! Each class is a shape family (bar, disk, ring, cross, ...) rendered with a
//! random colour, pose and background. Train and validation images share a
//! narrow pose and lighting range; test images use wider ranges, a textured
//! background and a colour cast, which opens a validation–test gap.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{hsv_to_rgb, Image};
use super::{DatasetSplit, Sample, BEHAVIORS, REFERENCE_TEST_COUNTS};
use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedTree, StreamRng};

/// Pose and lighting ranges of one split family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    pub gain: (f64, f64),
    pub rotate_deg: f64,
    pub scale: (f64, f64),
    pub offset: f64,
    pub noise: f64,
    /// Amplitude of the striped background texture; 0 disables it.
    pub texture: f64,
    /// Per-channel colour cast range around 1.
    pub cast: f64,
}

impl Appearance {
    pub fn clean() -> Self {
        Self {
            gain: (0.9, 1.1),
            rotate_deg: 10.0,
            scale: (0.55, 0.75),
            offset: 0.1,
            noise: 0.02,
            texture: 0.0,
            cast: 0.0,
        }
    }

    pub fn shifted() -> Self {
        Self {
            gain: (0.75, 1.25),
            rotate_deg: 20.0,
            scale: (0.5, 0.85),
            offset: 0.18,
            noise: 0.04,
            texture: 0.08,
            cast: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_counts: Vec<usize>,
    /// Source tags; classes below `source_split` get the first.
    pub sources: (String, String),
    pub source_split: usize,
    pub train_appearance: Appearance,
    pub test_appearance: Appearance,
}

impl Default for SyntheticSpec {
    /// 48 train and 12 validation images per class, and the reference test
    /// distribution scaled to at least 10,800 images.
    fn default() -> Self {
        let total: usize = REFERENCE_TEST_COUNTS.iter().sum();
        let target = 10_800.0;
        let test_counts = REFERENCE_TEST_COUNTS
            .iter()
            .map(|&c| (c as f64 * target / total as f64).ceil() as usize)
            .collect();
        Self {
            num_classes: 9,
            image_size: 16,
            train_per_class: 48,
            val_per_class: 12,
            test_counts,
            sources: ("synthA".into(), "synthB".into()),
            source_split: 6,
            train_appearance: Appearance::clean(),
            test_appearance: Appearance::shifted(),
        }
    }
}

impl SyntheticSpec {
    /// Smaller variant for quick checks: the same class skew at `1/divisor`.
    pub fn scaled_test(mut self, divisor: usize) -> Self {
        self.test_counts = self.test_counts.iter().map(|&c| c.div_ceil(divisor.max(1))).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > SHAPES {
            return Err(Error::Config(format!("synthetic datasets support 1..={SHAPES} classes")));
        }
        if self.test_counts.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} test counts for {} classes",
                self.test_counts.len(),
                self.num_classes
            )));
        }
        if self.image_size < 4 {
            return Err(Error::Config("synthetic image size must be at least 4".into()));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 {
            return Err(Error::Config("every class needs training and validation images".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        BEHAVIORS[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }

    fn source(&self, class: usize) -> &str {
        if class < self.source_split {
            &self.sources.0
        } else {
            &self.sources.1
        }
    }
}

const SHAPES: usize = 9;

/// Whether object-local point `(u, v)` (roughly within `[-1, 1]²`) lies
/// inside the shape of `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => u.abs() <= 0.95 && v.abs() <= 0.28,
        1 => u.abs() <= 0.28 && v.abs() <= 0.95,
        2 => r <= 0.75,
        3 => (0.55..=0.95).contains(&r),
        4 => (u.abs() <= 0.22 && v.abs() <= 0.95) || (v.abs() <= 0.22 && u.abs() <= 0.95),
        // Triangle, apex up.
        5 => v <= 0.8 && u.abs() <= (v + 0.9) / 1.7 * 0.95,
        6 => ((u - 0.48).powi(2) + v * v).sqrt() <= 0.42 || ((u + 0.48).powi(2) + v * v).sqrt() <= 0.42,
        // L: a stem plus a foot to the right.
        7 => (u.abs() <= 0.25 && v.abs() <= 0.95) || ((0.55..=0.95).contains(&v) && (-0.25..=0.9).contains(&u)),
        _ => u.abs().max(v.abs()) <= 0.9 && u.abs().max(v.abs()) >= 0.55,
    }
}

fn uniform(rng: &mut StreamRng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn sym(rng: &mut StreamRng, limit: f64) -> f64 {
    if limit == 0.0 {
        0.0
    } else {
        rng.gen_range(-limit..=limit)
    }
}

/// Renders one image of `class`. 4×4 supersampling gives anti-aliased
/// edges even at 16 px.
pub fn render(class: usize, size: usize, look: &Appearance, rng: &mut StreamRng) -> Image {
    let fg_hue = rng.gen_range(0.0..360.0);
    let fg = hsv_to_rgb([fg_hue as f32, rng.gen_range(0.5..0.9), rng.gen_range(0.75..1.0)]);
    let bg_hue = rng.gen_range(0.0..360.0);
    let bg_top = hsv_to_rgb([bg_hue as f32, rng.gen_range(0.1..0.4), rng.gen_range(0.15..0.4)]);
    let bg_bot = hsv_to_rgb([bg_hue as f32, rng.gen_range(0.1..0.4), rng.gen_range(0.15..0.4)]);
    let angle = sym(rng, look.rotate_deg).to_radians();
    let scale = uniform(rng, look.scale);
    let (oy, ox) = (sym(rng, look.offset), sym(rng, look.offset));
    let gain = uniform(rng, look.gain) as f32;
    let cast = [0, 1, 2].map(|_| 1.0 + sym(rng, look.cast) as f32);
    let tex_angle = rng.gen_range(0.0..std::f64::consts::PI);
    let tex_freq = rng.gen_range(2.0..5.0);
    let tex_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (s, c) = angle.sin_cos();
    let (ts, tc) = tex_angle.sin_cos();

    const SS: usize = 4;
    let mut im = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0f32;
            for sy in 0..SS {
                for sx in 0..SS {
                    // Image coordinates in [-1, 1].
                    let py = ((y * SS + sy) as f64 + 0.5) / (size * SS) as f64 * 2.0 - 1.0;
                    let px = ((x * SS + sx) as f64 + 0.5) / (size * SS) as f64 * 2.0 - 1.0;
                    let (dx, dy) = (px - ox, py - oy);
                    let u = (c * dx + s * dy) / scale;
                    let v = (-s * dx + c * dy) / scale;
                    if inside(class, u, v) {
                        cover += 1.0;
                    }
                }
            }
            cover /= (SS * SS) as f32;
            let t = (y as f32 + 0.5) / size as f32;
            let mut bg = [0.0f32; 3];
            for ch in 0..3 {
                bg[ch] = bg_top[ch] + (bg_bot[ch] - bg_top[ch]) * t;
            }
            if look.texture > 0.0 {
                let (py, px) = (y as f64 / size as f64, x as f64 / size as f64);
                let w = (std::f64::consts::TAU * tex_freq * (tc * px + ts * py) + tex_phase).sin();
                let d = (look.texture * w) as f32;
                bg = bg.map(|v| v + d);
            }
            let mut px = [0.0f32; 3];
            for ch in 0..3 {
                let v = fg[ch] * cover + bg[ch] * (1.0 - cover);
                let noise = sym(rng, look.noise * 3f64.sqrt()) as f32;
                px[ch] = (v * gain * cast[ch] + noise).clamp(0.0, 1.0);
            }
            im.set(y, x, px);
        }
    }
    im
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

fn make_split(spec: &SyntheticSpec, seeds: &SeedTree, split: Split, counts: &[usize], look: &Appearance) -> DatasetSplit {
    let jobs: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| (0..n).map(move |i| (c, i)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(class, i)| {
            let key = ((split as u64) << 32) | class as u64;
            let mut rng = seeds.stream2(Purpose::Synth, key, i as u64);
            Sample {
                image: render(class, spec.image_size, look, &mut rng),
                label: class,
                source: spec.source(class).to_string(),
            }
        })
        .collect();
    DatasetSplit {
        class_names: spec.class_names(),
        samples,
    }
}

/// Train, validation and test splits of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

pub fn synthesize_dataset(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let seeds = SeedTree::new(seed);
    let k = spec.num_classes;
    Ok(SyntheticDataset {
        train: make_split(spec, &seeds, Split::Train, &vec![spec.train_per_class; k], &spec.train_appearance),
        val: make_split(spec, &seeds, Split::Val, &vec![spec.val_per_class; k], &spec.train_appearance),
        test: make_split(spec, &seeds, Split::Test, &spec.test_counts, &spec.test_appearance),
    })
}
