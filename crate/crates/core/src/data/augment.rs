//! Two-view augmentation: random resized crop, horizontal flip, color
//! jitter, grayscale, Gaussian blur and solarization. Blur and solarize
//! probabilities are set per view; everything else is shared.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RgbImage;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub output_size: usize,
    /// Fraction of the source area kept by the crop.
    pub crop_scale: (f64, f64),
    /// Aspect-ratio range (width / height) of the crop.
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    /// Per-view blur probability.
    pub blur_prob: [f64; 2],
    pub blur_sigma: (f64, f64),
    /// Per-view solarization probability.
    pub solarize_prob: [f64; 2],
    /// Values at or above this (in `[0, 1]`) are inverted when solarizing.
    pub solarize_threshold: f64,
}

impl AugmentationPolicy {
    /// The usual BYOL recipe at the given output resolution. The blur σ
    /// range is defined in pixels at 224 px and scaled to `output_size`.
    pub fn byol(output_size: usize) -> Self {
        let px = output_size as f64 / 224.0;
        Self {
            output_size,
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: [1.0, 0.1],
            blur_sigma: (0.1 * px, 2.0 * px),
            solarize_prob: [0.0, 0.2],
            solarize_threshold: 0.5,
        }
    }

    /// Full-image crop, no stochastic transforms.
    pub fn identity(output_size: usize) -> Self {
        Self {
            output_size,
            crop_scale: (1.0, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: [0.0, 0.0],
            blur_sigma: (0.1, 2.0),
            solarize_prob: [0.0, 0.0],
            solarize_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob[0]", self.blur_prob[0]),
            ("blur_prob[1]", self.blur_prob[1]),
            ("solarize_prob[0]", self.solarize_prob[0]),
            ("solarize_prob[1]", self.solarize_prob[1]),
            ("solarize_threshold", self.solarize_threshold),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Parameter(format!("crop scale range ({lo}, {hi}) is empty or non-positive")));
        }
        if hi > 1.0 {
            return Err(Error::Parameter(format!("crop scale {hi} asks for a crop larger than the image")));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Parameter(format!("crop ratio range ({rlo}, {rhi}) is invalid")));
        }
        if self.output_size == 0 {
            return Err(Error::Parameter("output size must be positive".into()));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Parameter(format!("blur sigma range ({slo}, {shi}) is invalid")));
        }
        for (name, s) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(s >= 0.0) {
                return Err(Error::Parameter(format!("{name} strength {s} is negative")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Parameter(format!("hue strength {} is outside [0, 0.5]", self.hue)));
        }
        Ok(())
    }
}

/// HWC float image in `[0, 1]`.
#[derive(Clone)]
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn from_rgb(img: &RgbImage) -> Self {
        Self { w: img.width(), h: img.height(), px: img.pixels().iter().map(|&v| v as f32 / 255.0).collect() }
    }

    fn to_rgb(&self, label: u8) -> RgbImage {
        let pixels = self.px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        RgbImage::new(self.w, self.h, pixels, label).expect("canvas dimensions are consistent")
    }

    fn map_pixels(&mut self, f: impl Fn([f32; 3]) -> [f32; 3]) {
        for p in self.px.chunks_exact_mut(3) {
            let out = f([p[0], p[1], p[2]]);
            p.copy_from_slice(&out);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct CropBox {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

fn sample_crop(w: usize, h: usize, p: &AugmentationPolicy, rng: &mut SeededRng) -> CropBox {
    let area = (w * h) as f64;
    let (rlo, rhi) = (p.crop_ratio.0.ln(), p.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, p.crop_scale.0, p.crop_scale.1);
        let ratio = uniform(rng, rlo, rhi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            return CropBox { x, y, w: cw, h: ch };
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < p.crop_ratio.0 {
        (w, ((w as f64 / p.crop_ratio.0).round() as usize).clamp(1, h))
    } else if in_ratio > p.crop_ratio.1 {
        (((h as f64 * p.crop_ratio.1).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    CropBox { x: (w - cw) / 2, y: (h - ch) / 2, w: cw, h: ch }
}

fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Bilinear resample of `crop` to `size × size` (half-pixel centers).
fn resized_crop(src: &Canvas, crop: CropBox, size: usize) -> Canvas {
    if crop.x == 0 && crop.y == 0 && crop.w == src.w && crop.h == src.h && size == src.w && size == src.h {
        return src.clone();
    }
    let mut px = vec![0f32; size * size * 3];
    let sx = crop.w as f64 / size as f64;
    let sy = crop.h as f64 / size as f64;
    for oy in 0..size {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (crop.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(crop.h - 1);
        let ty = (fy - y0 as f64) as f32;
        for ox in 0..size {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (crop.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(crop.w - 1);
            let tx = (fx - x0 as f64) as f32;
            for c in 0..3 {
                let at = |y: usize, x: usize| src.px[((crop.y + y) * src.w + crop.x + x) * 3 + c];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                px[(oy * size + ox) * 3 + c] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    Canvas { w: size, h: size, px }
}

fn flip_horizontal(c: &mut Canvas) {
    for y in 0..c.h {
        for x in 0..c.w / 2 {
            let (a, b) = ((y * c.w + x) * 3, (y * c.w + c.w - 1 - x) * 3);
            for k in 0..3 {
                c.px.swap(a + k, b + k);
            }
        }
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn color_jitter(c: &mut Canvas, p: &AugmentationPolicy, rng: &mut SeededRng) {
    let factor = |rng: &mut SeededRng, s: f64| uniform(rng, (1.0 - s).max(0.0), 1.0 + s) as f32;
    let b = factor(rng, p.brightness);
    let ct = factor(rng, p.contrast);
    let s = factor(rng, p.saturation);
    let h = uniform(rng, -p.hue, p.hue) as f32;
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 => c.map_pixels(|px| px.map(|v| (v * b).clamp(0.0, 1.0))),
            1 => {
                let mean = c.px.chunks_exact(3).map(|q| luma([q[0], q[1], q[2]])).sum::<f32>() / (c.w * c.h) as f32;
                c.map_pixels(|px| px.map(|v| (ct * v + (1.0 - ct) * mean).clamp(0.0, 1.0)));
            }
            2 => c.map_pixels(|px| {
                let g = luma(px);
                px.map(|v| (s * v + (1.0 - s) * g).clamp(0.0, 1.0))
            }),
            _ => {
                if h != 0.0 {
                    c.map_pixels(|px| {
                        let [hh, ss, vv] = rgb_to_hsv(px);
                        hsv_to_rgb([hh + h, ss, vv])
                    })
                }
            }
        }
    }
}

fn gaussian_blur(c: &mut Canvas, sigma: f64) {
    let k = ((c.w.max(c.h) as f64 * 0.1).round() as usize).max(3) | 1;
    let r = k / 2;
    let weights: Vec<f32> = (0..k).map(|i| (-((i as f64 - r as f64).powi(2)) / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| w / total).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = vec![0f32; c.px.len()];
    for y in 0..c.h {
        for x in 0..c.w {
            for ch in 0..3 {
                tmp[(y * c.w + x) * 3 + ch] = weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * c.px[(y * c.w + reflect(x as isize + i as isize - r as isize, c.w)) * 3 + ch])
                    .sum();
            }
        }
    }
    for y in 0..c.h {
        for x in 0..c.w {
            for ch in 0..3 {
                c.px[(y * c.w + x) * 3 + ch] = weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * tmp[(reflect(y as isize + i as isize - r as isize, c.h) * c.w + x) * 3 + ch])
                    .sum();
            }
        }
    }
}

fn bernoulli(rng: &mut SeededRng, p: f64) -> bool {
    // p = 0 and p = 1 consume no randomness-dependent branches differently
    rng.random::<f64>() < p
}

/// One augmented view. `view` (0 or 1) selects the per-view blur and
/// solarize probabilities.
pub fn augment_view(img: &RgbImage, policy: &AugmentationPolicy, view: usize, rng: &mut SeededRng) -> Result<RgbImage> {
    policy.validate()?;
    if view > 1 {
        return Err(Error::Parameter(format!("view index {view} (expected 0 or 1)")));
    }
    let src = Canvas::from_rgb(img);
    let crop = sample_crop(src.w, src.h, policy, rng);
    let mut c = resized_crop(&src, crop, policy.output_size);
    if bernoulli(rng, policy.flip_prob) {
        flip_horizontal(&mut c);
    }
    if bernoulli(rng, policy.jitter_prob) {
        color_jitter(&mut c, policy, rng);
    }
    if bernoulli(rng, policy.grayscale_prob) {
        c.map_pixels(|px| [luma(px); 3]);
    }
    if bernoulli(rng, policy.blur_prob[view]) {
        let sigma = uniform(rng, policy.blur_sigma.0, policy.blur_sigma.1);
        gaussian_blur(&mut c, sigma);
    }
    if bernoulli(rng, policy.solarize_prob[view]) {
        let t = policy.solarize_threshold as f32;
        c.map_pixels(|px| px.map(|v| if v >= t { 1.0 - v } else { v }));
    }
    Ok(c.to_rgb(img.label()))
}

/// Two independently sampled views, drawn in order from `rng`.
pub fn augment_two_views(img: &RgbImage, policy: &AugmentationPolicy, rng: &mut SeededRng) -> Result<(RgbImage, RgbImage)> {
    let a = augment_view(img, policy, 0, rng)?;
    let b = augment_view(img, policy, 1, rng)?;
    Ok((a, b))
}
