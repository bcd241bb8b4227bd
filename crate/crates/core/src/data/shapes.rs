//! Ten-class synthetic shapes for the contrastive experiments. The class is
//! the silhouette; size, position, a small rotation and (with the random
//! palette) foreground and background colors vary per image and carry no
//! class information.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RgbImage, NUM_CLASSES};
use crate::rng::{self, SeededRng};

pub const SHAPE_NAMES: [&str; NUM_CLASSES] =
    ["disk", "square", "triangle", "plus", "ring", "star", "frame", "bar", "cross", "half-disk"];

/// Whether local point `(u, v)` (shape radius 1, v down) lies inside.
fn inside(class: u8, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => v <= 0.7 && u.abs() <= 0.9 * (v + 0.85) / 1.55,
        3 => (u.abs() <= 0.28 && v.abs() <= 0.95) || (v.abs() <= 0.28 && u.abs() <= 0.95),
        4 => (0.3..=1.0).contains(&r2),
        5 => r2.sqrt() <= 0.42 + 0.58 * (2.5 * v.atan2(u) + std::f64::consts::FRAC_PI_2 * 2.5).cos().powi(2),
        6 => (0.55..=0.85).contains(&u.abs().max(v.abs())),
        7 => u.abs() <= 0.95 && v.abs() <= 0.25,
        8 => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            inside(3, s * (u - v), s * (u + v))
        }
        _ => {
            let v = v + 0.4;
            u * u + v * v <= 1.0 && v >= 0.0
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Foreground and background coloring of rendered shapes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapePalette {
    /// Random saturated foreground over a random dark background.
    Random,
    /// White on black.
    #[default]
    Binary,
}

/// Renders one image of `class` at `side × side`.
pub fn render_shape(class: u8, side: usize, palette: ShapePalette, rng: &mut SeededRng) -> RgbImage {
    let s = side as f64;
    let radius = rng.random_range(0.22..0.38) * s;
    let margin = radius * 0.95;
    let cx = rng.random_range(margin..(s - margin).max(margin + 1e-9));
    let cy = rng.random_range(margin..(s - margin).max(margin + 1e-9));
    let angle: f64 = rng.random_range(-0.3..0.3);
    let fg = hsv(rng.random_range(0.0..1.0), rng.random_range(0.6..1.0), rng.random_range(0.65..1.0));
    let bg = hsv(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.35));
    let (fg, bg) = match palette {
        ShapePalette::Random => (fg, bg),
        ShapePalette::Binary => ([1.0; 3], [0.0; 3]),
    };
    let (sn, cs) = angle.sin_cos();
    let mut pixels = Vec::with_capacity(side * side * 3);
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..side {
        for x in 0..side {
            let mut cover = 0.0;
            for sy in SUB {
                for sx in SUB {
                    let (dx, dy) = ((x as f64 + sx - cx) / radius, (y as f64 + sy - cy) / radius);
                    let (u, v) = (cs * dx + sn * dy, -sn * dx + cs * dy);
                    if inside(class, u, v) {
                        cover += 0.25;
                    }
                }
            }
            for c in 0..3 {
                let noise = rng.random_range(-0.03..0.03);
                let val = (cover * fg[c] + (1.0 - cover) * bg[c] + noise).clamp(0.0, 1.0);
                pixels.push((val * 255.0).round() as u8);
            }
        }
    }
    RgbImage::new(side, side, pixels, class).expect("side × side × 3 buffer")
}

const SHAPE_STREAM: u64 = 0x5A9E;

/// `n` shapes with balanced classes; sample `i` depends only on `(seed, i)`.
pub fn synthetic_shapes(n: usize, side: usize, seed: u64) -> Vec<RgbImage> {
    synthetic_shapes_with(n, side, ShapePalette::Random, seed)
}

pub fn synthetic_shapes_with(n: usize, side: usize, palette: ShapePalette, seed: u64) -> Vec<RgbImage> {
    (0..n)
        .map(|i| {
            let block = i / NUM_CLASSES;
            let mut order: Vec<u8> = (0..NUM_CLASSES as u8).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::derived(seed, &[SHAPE_STREAM, u64::MAX, block as u64]));
            render_shape(order[i % NUM_CLASSES], side, palette, &mut rng::derived(seed, &[SHAPE_STREAM, i as u64]))
        })
        .collect()
}
