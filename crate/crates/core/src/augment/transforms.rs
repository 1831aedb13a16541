//! The individual image transforms: joint geometry on (image, mask) and
//! image-only photometric edits.

use crate::raster::{warp_image, warp_mask};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A sampled geometric transform. Image resampling is bilinear, mask
/// resampling nearest-neighbor, exposed regions fill with 0 / class 0.
#[derive(Clone, Debug)]
pub enum Geometry {
    FlipH,
    FlipV,
    Transpose,
    Shift { dy: isize, dx: isize },
    Rotate { radians: f64 },
    Scale { factor: f64 },
    Perspective { h: [f64; 9] },
}

impl Geometry {
    pub fn apply(&self, image: &Array3<u8>, mask: &Array2<u8>) -> (Array3<u8>, Array2<u8>) {
        let (h, w, _) = image.dim();
        match self {
            Geometry::FlipH => {
                let map = move |y: f64, x: f64| (y, (w - 1) as f64 - x);
                (
                    warp_image(image, h, w, [0; 3], map),
                    warp_mask(mask, h, w, 0, map),
                )
            }
            Geometry::FlipV => {
                let map = move |y: f64, x: f64| ((h - 1) as f64 - y, x);
                (
                    warp_image(image, h, w, [0; 3], map),
                    warp_mask(mask, h, w, 0, map),
                )
            }
            Geometry::Transpose => {
                let map = |y: f64, x: f64| (x, y);
                (
                    warp_image(image, w, h, [0; 3], map),
                    warp_mask(mask, w, h, 0, map),
                )
            }
            Geometry::Shift { dy, dx } => {
                let (dy, dx) = (*dy as f64, *dx as f64);
                let map = move |y: f64, x: f64| (y - dy, x - dx);
                (
                    warp_image(image, h, w, [0; 3], map),
                    warp_mask(mask, h, w, 0, map),
                )
            }
            Geometry::Rotate { radians } => {
                let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                let (sin, cos) = radians.sin_cos();
                let map = move |y: f64, x: f64| {
                    let (ry, rx) = (y - cy, x - cx);
                    (cy + ry * cos + rx * sin, cx - ry * sin + rx * cos)
                };
                (
                    warp_image(image, h, w, [0; 3], map),
                    warp_mask(mask, h, w, 0, map),
                )
            }
            Geometry::Scale { factor } => {
                let f = factor.max(0.05);
                let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                let map = move |y: f64, x: f64| (cy + (y - cy) / f, cx + (x - cx) / f);
                (
                    warp_image(image, h, w, [0; 3], map),
                    warp_mask(mask, h, w, 0, map),
                )
            }
            Geometry::Perspective { h: hm } => {
                let hm = *hm;
                let map = move |y: f64, x: f64| {
                    let d = hm[6] * x + hm[7] * y + hm[8];
                    let u = (hm[0] * x + hm[1] * y + hm[2]) / d;
                    let v = (hm[3] * x + hm[4] * y + hm[5]) / d;
                    (v, u)
                };
                (
                    warp_image(image, h, w, [0; 3], map),
                    warp_mask(mask, h, w, 0, map),
                )
            }
        }
    }
}

/// Solve the 8-DOF homography sending each `(x, y)` to `(u, v)` by Gaussian
/// elimination with partial pivoting. Returns row-major `[a..h, 1]`.
pub fn homography_from_corners(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> [f64; 9] {
    let mut m = [[0.0f64; 9]; 8];
    for (i, (&(x, y), &(u, v))) in from.iter().zip(to.iter()).enumerate() {
        m[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        m[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    #[allow(clippy::needless_range_loop)]
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        if p.abs() < 1e-12 {
            // Degenerate corner layout: fall back to identity.
            return [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        }
        for r in 0..8 {
            if r != col {
                let f = m[r][col] / p;
                for c in col..9 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut h = [0.0f64; 9];
    for i in 0..8 {
        h[i] = m[i][8] / m[i][i];
    }
    h[8] = 1.0;
    h
}

/// Random perspective: output corners displaced by up to `distortion` of the
/// side length, mapped back onto the full source extent.
pub fn sample_perspective(rng: &mut ChaCha8Rng, h: usize, w: usize, distortion: f64) -> Geometry {
    let d = distortion.clamp(0.0, 0.2);
    let (hf, wf) = ((h - 1) as f64, (w - 1) as f64);
    let mut jitter = |extent: f64| extent * d * rng.random_range(-1.0..1.0);
    // Corners in (x, y) order for the solver.
    let src = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
    let dst = [
        (jitter(wf), jitter(hf)),
        (wf + jitter(wf), jitter(hf)),
        (wf + jitter(wf), hf + jitter(hf)),
        (jitter(wf), hf + jitter(hf)),
    ];
    // The warp needs output -> source.
    Geometry::Perspective {
        h: homography_from_corners(dst, src),
    }
}

// ---- photometric (image-only) ----

fn map_channels(image: &Array3<u8>, f: impl Fn(usize, f64) -> f64) -> Array3<u8> {
    let mut out = image.clone();
    for ((_, _, c), v) in out.indexed_iter_mut() {
        *v = f(c, *v as f64).round().clamp(0.0, 255.0) as u8;
    }
    out
}

pub fn brightness(image: &Array3<u8>, delta_frac: f64) -> Array3<u8> {
    map_channels(image, |_, v| v + delta_frac * 255.0)
}

pub fn contrast(image: &Array3<u8>, factor: f64) -> Array3<u8> {
    map_channels(image, |_, v| (v - 128.0) * factor + 128.0)
}

pub fn gamma(image: &Array3<u8>, g: f64) -> Array3<u8> {
    let g = g.max(0.05);
    map_channels(image, |_, v| 255.0 * (v / 255.0).powf(g))
}

pub fn color_jitter(image: &Array3<u8>, factors: [f64; 3]) -> Array3<u8> {
    map_channels(image, |c, v| v * factors[c])
}

pub fn hue_saturation(image: &Array3<u8>, hue_delta_deg: f64, sat_scale: f64) -> Array3<u8> {
    let (h, w, _) = image.dim();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let rgb = [
                image[(y, x, 0)] as f64 / 255.0,
                image[(y, x, 1)] as f64 / 255.0,
                image[(y, x, 2)] as f64 / 255.0,
            ];
            let (mut hue, mut sat, val) = rgb_to_hsv(rgb);
            hue = (hue + hue_delta_deg).rem_euclid(360.0);
            sat = (sat * sat_scale).clamp(0.0, 1.0);
            let rgb = hsv_to_rgb(hue, sat, val);
            for c in 0..3 {
                out[(y, x, c)] = (rgb[c] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
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

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(image: &Array3<u8>, sigma: f64) -> Array3<u8> {
    let sigma = sigma.max(0.1);
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w, _) = image.dim();
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = clampi(x as isize + k as isize - radius, w);
                    acc += kv * image[(y, sx, c)] as f64;
                }
                tmp[(y, x, c)] = acc / norm;
            }
        }
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = clampi(y as isize + k as isize - radius, h);
                    acc += kv * tmp[(sy, x, c)];
                }
                out[(y, x, c)] = (acc / norm).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

pub fn gaussian_noise(image: &Array3<u8>, std: f64, rng: &mut ChaCha8Rng) -> Array3<u8> {
    let mut out = image.clone();
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + z * std).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Unsharp-style local contrast boost: `v + amount * (v - blur(v))`.
pub fn local_contrast(image: &Array3<u8>, amount: f64) -> Array3<u8> {
    let blurred = gaussian_blur(image, 1.2);
    let mut out = image.clone();
    for (idx, v) in out.indexed_iter_mut() {
        let orig = image[idx] as f64;
        let soft = blurred[idx] as f64;
        *v = (orig + amount * (orig - soft)).round().clamp(0.0, 255.0) as u8;
    }
    out
}
