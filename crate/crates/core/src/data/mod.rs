//! Datasets: class-per-directory loading, augmentation, normalization, the
//! synthetic nine-class generator, and batched tensors for training.
//!
//! Directory layout is `root/<class_name>/<image files>`. Files are read in
//! byte order of their names; `.png` and binary `.ppm` (P6, maxval ≤ 65535)
//! are decoded, anything else is skipped.

mod augment;
mod image;
mod synth;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{augment, gaussian_kernel, motion_kernel, AugmentConfig, IMAGENET_MEAN, IMAGENET_STD};
pub use image::{gray, hsv_to_rgb, rgb_to_hsv, Image};
pub use synth::{render, synthesize_dataset, Appearance, SyntheticDataset, SyntheticSpec};

use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedTree};
use crate::tensor::{Scalar, Tensor};

/// Class names in label order.
pub const BEHAVIORS: [&str; 9] = [
    "drinking",
    "eating_head_down",
    "eating_head_up",
    "lying",
    "standing",
    "walking",
    "frontal_pushing",
    "gallop",
    "leap",
];

/// Reference test-set size of each class in [`BEHAVIORS`] order.
pub const REFERENCE_TEST_COUNTS: [usize; 9] = [3_011, 30_952, 18_783, 83_509, 69_807, 3_819, 600, 575, 744];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.class_names.len()];
        for s in &self.samples {
            out[s.label] += 1;
        }
        out
    }
}

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Loads `root/<class>/*` for every class, labelling by position in
/// `class_names`. Every sample gets `source` as its tag.
pub fn load_directory_dataset(root: &Path, class_names: &[String], source: &str) -> Result<DatasetSplit> {
    if class_names.is_empty() {
        return Err(Error::Config("at least one class name is required".into()));
    }
    let mut files: Vec<(PathBuf, usize)> = Vec::new();
    for (label, name) in class_names.iter().enumerate() {
        let dir = root.join(name);
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_file() && has_image_extension(&path) {
                paths.push(path);
            }
        }
        if paths.is_empty() {
            return Err(Error::Data(format!("class {name:?} has no images in {}", dir.display())));
        }
        paths.sort();
        files.extend(paths.into_iter().map(|p| (p, label)));
    }
    let samples = files
        .par_iter()
        .map(|(path, label)| {
            Ok(Sample {
                image: read_image(path)?,
                label: *label,
                source: source.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DatasetSplit {
        class_names: class_names.to_vec(),
        samples,
    })
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let fail = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    if is_png {
        decode_png(&bytes).map_err(fail)
    } else {
        decode_ppm(&bytes).map_err(fail)
    }
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("palette was not expanded".into()),
    };
    let mut im = Image::new(h, w);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let p = &row[x * channels..];
            let rgb = if channels < 3 { [p[0]; 3] } else { [p[0], p[1], p[2]] };
            im.set(y, x, rgb.map(|v| v as f32 / 255.0));
        }
    }
    Ok(im)
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("only binary P6 PPM is supported".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        token()?.parse().map_err(|_| format!("bad {what}"))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65_535 {
        return Err(format!("unsupported header {w}x{h} maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = bytes.get(pos + 1..).ok_or("missing raster")?;
    let width = if maxval > 255 { 2 } else { 1 };
    let need = w * h * 3 * width;
    if data.len() < need {
        return Err(format!("raster has {} bytes, expected {need}", data.len()));
    }
    let mut im = Image::new(h, w);
    for (i, v) in im.data.iter_mut().enumerate() {
        let raw = if width == 2 {
            u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as f32
        } else {
            data[i] as f32
        };
        *v = raw / maxval as f32;
    }
    Ok(im)
}

pub fn write_png(path: &Path, im: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), im.width as u32, im.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = im.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let fail = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = enc.write_header().map_err(fail)?;
    w.write_image_data(&bytes).map_err(fail)?;
    w.finish().map_err(fail)
}

pub fn write_ppm(path: &Path, im: &Image) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", im.width, im.height).into_bytes();
    out.extend(im.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a split as `root/<class>/<index>.png`, the layout
/// [`load_directory_dataset`] reads.
pub fn export_split(split: &DatasetSplit, root: &Path) -> Result<()> {
    for name in &split.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    split.samples.par_iter().enumerate().try_for_each(|(i, s)| {
        let path = root.join(&split.class_names[s.label]).join(format!("{i:06}.png"));
        write_png(&path, &s.image)
    })
}

/// Channel-wise `(x − mean)/std`, channels first: `[3, H, W]`.
pub fn normalize<T: Scalar>(im: &Image, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<T>> {
    if std.contains(&0.0) {
        return Err(Error::Config("normalization std must be non-zero".into()));
    }
    let (h, w) = (im.height, im.width);
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for i in 0..h * w {
            out.push(T::from_f64((im.data[i * 3 + c] as f64 - mean[c]) / std[c]));
        }
    }
    Tensor::new([3, h, w], out)
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(t: &Tensor<T>, mean: [f64; 3], std: [f64; 3]) -> Result<Image> {
    if t.ndim() != 3 || t.shape()[0] != 3 {
        return Err(Error::shape("denormalize", t.shape(), &[3]));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut im = Image::new(h, w);
    for c in 0..3 {
        for i in 0..h * w {
            im.data[i * 3 + c] = (t.data()[c * h * w + i].as_f64() * std[c] + mean[c]) as f32;
        }
    }
    Ok(im)
}

/// Replaces every training image by `multiplier` augmented variants, so the
/// output has exactly `multiplier × len` samples. Variant `v` of sample `i`
/// draws from its own `(i, v)` stream.
pub fn expand_training_set(split: &DatasetSplit, cfg: &AugmentConfig, multiplier: usize, seeds: &SeedTree) -> Result<DatasetSplit> {
    if multiplier == 0 {
        return Err(Error::Config("augmentation multiplier must be at least 1".into()));
    }
    cfg.validate()?;
    let samples = (0..split.len() * multiplier)
        .into_par_iter()
        .map(|k| {
            let (i, v) = (k / multiplier, k % multiplier);
            let s = &split.samples[i];
            let mut rng = seeds.stream2(Purpose::Augment, i as u64, v as u64);
            Sample {
                image: augment(&s.image, cfg, &mut rng),
                label: s.label,
                source: s.source.clone(),
            }
        })
        .collect();
    Ok(DatasetSplit {
        class_names: split.class_names.clone(),
        samples,
    })
}

/// Normalised images `[N, 3, S, S]` with their labels, ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub sources: Vec<String>,
    pub class_names: Vec<String>,
}

impl<T: Scalar> TensorSet<T> {
    /// Evaluation pipeline: resize to `size` and normalize.
    pub fn from_split(split: &DatasetSplit, size: usize, mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        let planes: Vec<Tensor<T>> = split
            .samples
            .par_iter()
            .map(|s| normalize(&s.image.resize(size, size), mean, std))
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(planes.len() * 3 * size * size);
        for p in planes {
            data.extend_from_slice(p.data());
        }
        Ok(Self {
            images: Tensor::new([split.len(), 3, size, size], data)?,
            labels: split.samples.iter().map(|s| s.label).collect(),
            sources: split.samples.iter().map(|s| s.source.clone()).collect(),
            class_names: split.class_names.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Images at `idx` as one batch.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let shape = self.images.shape();
        let per: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Index(format!("sample {i} of {}", self.len())));
            }
            out.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut s = shape.to_vec();
        s[0] = idx.len();
        Tensor::new(s, out)
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Subset with the given sample indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.gather(idx)?,
            labels: self.labels_of(idx),
            sources: idx.iter().map(|&i| self.sources[i].clone()).collect(),
            class_names: self.class_names.clone(),
        })
    }
}

#[cfg(test)]
mod tests;
