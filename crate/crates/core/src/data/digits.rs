//! Offline stand-in for MNIST: stroke-rendered digits with per-sample
//! handwriting variation (slant, rotation, scale, aspect, position, stroke
//! width, control-point jitter, glyph variants).
//!
//! Output is 28×28 grayscale in the MNIST layout: strokes are white on
//! black, the glyph occupies roughly a 20×20 box near the center.

use std::f64::consts::PI;

use rand::Rng;

use super::{GrayImage, MNIST_SIDE, NUM_CLASSES};
use crate::rng::{self, SeededRng};

type Point = (f64, f64);
type Stroke = Vec<Point>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Stroke {
    let steps = (((to_deg - from_deg).abs() / 15.0).ceil() as usize).max(2);
    (0..=steps)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64) * PI / 180.0;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn line(points: &[Point]) -> Stroke {
    points.to_vec()
}

/// Strokes in the unit square (x right, y down; angles clockwise from +x).
fn glyph(digit: u8, variant: u32) -> Vec<Stroke> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.27, 0.42, 0.0, 360.0)],
        1 => {
            let mut s = vec![line(&[(0.52, 0.08), (0.5, 0.92)])];
            if variant % 2 == 1 {
                s.push(line(&[(0.32, 0.28), (0.52, 0.08)]));
            }
            if variant % 3 == 2 {
                s.push(line(&[(0.32, 0.92), (0.7, 0.92)]));
            }
            s
        }
        2 => {
            let mut top = arc(0.5, 0.32, 0.26, 0.24, 190.0, 360.0);
            top.extend(arc(0.5, 0.32, 0.26, 0.24, 0.0, 40.0));
            top.push((0.22, 0.9));
            top.push((0.8, 0.9));
            vec![top]
        }
        3 => {
            let mut s = arc(0.47, 0.29, 0.25, 0.21, 200.0, 450.0);
            s.extend(arc(0.47, 0.7, 0.28, 0.22, 270.0, 520.0));
            vec![s]
        }
        4 => {
            if variant % 2 == 0 {
                vec![line(&[(0.6, 0.92), (0.6, 0.08), (0.18, 0.64), (0.82, 0.64)])]
            } else {
                vec![line(&[(0.3, 0.08), (0.22, 0.58), (0.82, 0.58)]), line(&[(0.66, 0.12), (0.62, 0.92)])]
            }
        }
        5 => {
            let mut s = line(&[(0.74, 0.1), (0.33, 0.1), (0.3, 0.46)]);
            s.extend(arc(0.47, 0.66, 0.27, 0.25, 220.0, 510.0));
            vec![s]
        }
        6 => {
            let mut s = arc(0.78, 0.62, 0.5, 0.56, 250.0, 180.0);
            s.extend(arc(0.5, 0.68, 0.22, 0.22, 180.0, 540.0));
            vec![s]
        }
        7 => {
            let mut s = vec![line(&[(0.2, 0.1), (0.8, 0.1), (0.42, 0.92)])];
            if variant % 2 == 1 {
                s.push(line(&[(0.38, 0.52), (0.76, 0.52)]));
            }
            s
        }
        8 => vec![arc(0.5, 0.28, 0.21, 0.19, 0.0, 360.0), arc(0.5, 0.7, 0.25, 0.22, 0.0, 360.0)],
        _ => {
            let mut s = arc(0.48, 0.32, 0.23, 0.22, 0.0, 360.0);
            s.extend(line(&[(0.71, 0.32), (0.62, 0.92)]));
            vec![s]
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Handwriting {
    scale: f64,
    aspect: f64,
    shear: f64,
    rotation: f64,
    dx: f64,
    dy: f64,
    half_width: f64,
    peak: f64,
    jitter: f64,
    variant: u32,
}

impl Handwriting {
    fn sample(rng: &mut SeededRng) -> Self {
        Self {
            scale: rng.random_range(0.8..1.08),
            aspect: rng.random_range(0.75..1.15),
            shear: rng.random_range(-0.35..0.35),
            rotation: rng.random_range(-0.2..0.2),
            dx: rng.random_range(-1.5..1.5),
            dy: rng.random_range(-1.2..1.2),
            half_width: rng.random_range(0.7..1.7),
            peak: rng.random_range(0.85..1.0),
            jitter: 0.03,
            variant: rng.random_range(0..6),
        }
    }

    /// Unit square → pixel coordinates.
    fn map(&self, (x, y): Point) -> Point {
        let (u, v) = (x - 0.5, y - 0.5);
        let (u, v) = (u * self.aspect + self.shear * v, v);
        let (s, c) = self.rotation.sin_cos();
        let (u, v) = (c * u - s * v, s * u + c * v);
        let half = MNIST_SIDE as f64 / 2.0;
        (half + self.dx + u * 20.0 * self.scale, half + self.dy + v * 20.0 * self.scale)
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * abx - p.0, a.1 + t * aby - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render(digit: u8, rng: &mut SeededRng) -> GrayImage {
    let hand = Handwriting::sample(rng);
    let strokes: Vec<Stroke> = glyph(digit, hand.variant)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let j = (rng.random_range(-hand.jitter..hand.jitter), rng.random_range(-hand.jitter..hand.jitter));
                    hand.map((x + j.0, y + j.1))
                })
                .collect()
        })
        .collect();
    let mut pixels = vec![0u8; MNIST_SIDE * MNIST_SIDE];
    for y in 0..MNIST_SIDE {
        for x in 0..MNIST_SIDE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(|w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let coverage = (hand.half_width + 0.5 - d).clamp(0.0, 1.0);
            pixels[y * MNIST_SIDE + x] = (255.0 * hand.peak * coverage).round() as u8;
        }
    }
    GrayImage::new(pixels, digit).expect("28x28 buffer")
}

const DIGIT_STREAM: u64 = 0xD161;

/// `n` digits; sample `i` (label and handwriting) depends only on `(seed, i)`.
/// Labels cycle through a seeded shuffle of the ten classes so every class
/// is equally represented up to one sample.
pub fn synthetic_digits(n: usize, seed: u64) -> Vec<GrayImage> {
    (0..n)
        .map(|i| {
            let mut r = rng::derived(seed, &[DIGIT_STREAM, i as u64]);
            let block = i / NUM_CLASSES;
            let mut order: Vec<u8> = (0..NUM_CLASSES as u8).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::derived(seed, &[DIGIT_STREAM, u64::MAX, block as u64]));
            render(order[i % NUM_CLASSES], &mut r)
        })
        .collect()
}
