//! RGB images with values in `[0, 1]` and the pixel operations the
//! augmentation pipeline is built from.

use serde::{Deserialize, Serialize};

/// Height × width × 3, row-major, channels last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Reflect-101 border handling (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut im = Self::new(height, width);
        for px in im.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        im
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    fn at_reflect(&self, y: isize, x: isize) -> [f32; 3] {
        self.get(reflect(y, self.height), reflect(x, self.width))
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// integers), reflecting outside the image.
    pub fn sample(&self, y: f64, x: f64) -> [f32; 3] {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let p00 = self.at_reflect(y0, x0);
        let p01 = self.at_reflect(y0, x0 + 1);
        let p10 = self.at_reflect(y0 + 1, x0);
        let p11 = self.at_reflect(y0 + 1, x0 + 1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p01[c] - p00[c]) * fx;
            let bot = p10[c] + (p11[c] - p10[c]) * fx;
            out[c] = top + (bot - top) * fy;
        }
        out
    }

    /// Bilinear resize with half-pixel centres. Same-size resize is the
    /// identity.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let (sy, sx) = (self.height as f64 / height as f64, self.width as f64 / width as f64);
        let mut out = Image::new(height, width);
        for y in 0..height {
            for x in 0..width {
                let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                out.set(y, x, self.sample(src_y, src_x));
            }
        }
        out
    }

    pub fn hflip(&self) -> Image {
        let mut out = Image::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Output pixel `(y, x)` takes the input at `map(y, x)`.
    pub fn warp(&self, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let mut out = Image::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (sy, sx) = map(y as f64, x as f64);
                out.set(y, x, self.sample(sy, sx));
            }
        }
        out
    }

    /// Rotation by `degrees` about the centre, scaling by `scale` and
    /// translating by `(dy, dx)` pixels.
    pub fn affine(&self, degrees: f64, scale: f64, dy: f64, dx: f64) -> Image {
        let (cy, cx) = ((self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0);
        let (s, c) = degrees.to_radians().sin_cos();
        // Inverse map: undo translation, rotation and scale.
        self.warp(|y, x| {
            let (u, v) = (x - cx - dx, y - cy - dy);
            let xs = (c * u + s * v) / scale + cx;
            let ys = (-s * u + c * v) / scale + cy;
            (ys, xs)
        })
    }

    /// Projective warp that stretches the quadrilateral `quad` of the input
    /// (top-left, top-right, bottom-right, bottom-left; `(x, y)` pairs) onto
    /// the whole output.
    pub fn perspective(&self, quad: [(f64, f64); 4]) -> Image {
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        // Homography from output to input coordinates.
        let hm = match homography(corners, quad) {
            Some(hm) => hm,
            None => return self.clone(),
        };
        self.warp(|y, x| {
            let d = hm[6] * x + hm[7] * y + 1.0;
            ((hm[3] * x + hm[4] * y + hm[5]) / d, (hm[0] * x + hm[1] * y + hm[2]) / d)
        })
    }

    /// Per-channel mean.
    pub fn mean_color(&self) -> [f32; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        acc.map(|v| (v / n) as f32)
    }

    pub fn map_pixels(&mut self, f: impl Fn([f32; 3]) -> [f32; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            let out = f([px[0], px[1], px[2]]);
            px.copy_from_slice(&out);
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Correlation with a `k×k` kernel (row-major), reflecting at borders.
    pub fn convolve(&self, kernel: &[f32], k: usize) -> Image {
        let r = (k / 2) as isize;
        let mut out = Image::new(self.height, self.width);
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let mut acc = [0.0f32; 3];
                for ky in 0..k as isize {
                    for kx in 0..k as isize {
                        let wgt = kernel[(ky * k as isize + kx) as usize];
                        if wgt == 0.0 {
                            continue;
                        }
                        let p = self.at_reflect(y + ky - r, x + kx - r);
                        for c in 0..3 {
                            acc[c] += wgt * p[c];
                        }
                    }
                }
                out.set(y as usize, x as usize, acc);
            }
        }
        out
    }
}

/// Solves for the 8 homography coefficients taking each `from` point to the
/// matching `to` point. `None` when the points are degenerate.
fn homography(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> Option<[f64; 8]> {
    let mut a = [[0.0f64; 9]; 8];
    for (i, (&(x, y), &(u, v))) in from.iter().zip(&to).enumerate() {
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [0.0; 8];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    Some(h)
}

/// RGB in `[0,1]` to HSV with hue in degrees `[0, 360)`.
pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// ITU-R 601 luma.
pub fn gray(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}
