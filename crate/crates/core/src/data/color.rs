//! Colored MNIST synthesis.
//!
//! A grayscale stroke of intensity `i` colored with `(r, g, b)` becomes
//! `round(i/255 · (r, g, b))` per channel, rounding half up. In biased mode
//! the color is fixed per class; in unbiased mode each image draws a hue
//! uniformly at full saturation and value.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GrayImage, RgbImage, MNIST_SIDE, NUM_CLASSES};
use crate::error::Result;
use crate::rng::{self, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    Biased,
    Unbiased,
}

impl ColorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ColorMode::Biased => "biased",
            ColorMode::Unbiased => "unbiased",
        }
    }
}

impl std::fmt::Display for ColorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One RGB triple per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorPalette {
    colors: [[u8; 3]; NUM_CLASSES],
}

impl ColorPalette {
    /// The class-correlated palette: color is a function of the digit.
    pub fn biased() -> Self {
        Self {
            colors: [
                [255, 100, 0],
                [0, 100, 0],
                [188, 143, 143],
                [255, 0, 0],
                [255, 215, 0],
                [0, 255, 0],
                [65, 105, 225],
                [0, 225, 255],
                [0, 0, 255],
                [255, 20, 147],
            ],
        }
    }

    pub fn new(colors: [[u8; 3]; NUM_CLASSES]) -> Self {
        Self { colors }
    }

    pub fn color(&self, label: u8) -> [u8; 3] {
        self.colors[label as usize]
    }

    pub fn colors(&self) -> &[[u8; 3]; NUM_CLASSES] {
        &self.colors
    }
}

impl Default for ColorPalette {
    fn default() -> Self {
        Self::biased()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColoredMnistSample {
    pub image: RgbImage,
    pub label: u8,
    pub mode: ColorMode,
    /// The color the strokes were scaled by.
    pub color: [u8; 3],
}

/// `round(intensity/255 · channel)` with ties rounded up, in integers.
pub fn scale_channel(intensity: u8, channel: u8) -> u8 {
    ((2 * intensity as u32 * channel as u32 + 255) / 510) as u8
}

/// Full-saturation, full-value color for hue in `[0, 1)`.
pub fn hue_to_rgb(hue: f64) -> [u8; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let sector = h.floor() as u32 % 6;
    let f = h - h.floor();
    let (r, g, b) = match sector {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [(r * 255.0f64).round() as u8, (g * 255.0f64).round() as u8, (b * 255.0f64).round() as u8]
}

pub fn random_color(rng: &mut SeededRng) -> [u8; 3] {
    hue_to_rgb(rng.random_range(0.0..1.0))
}

pub fn colorize(img: &GrayImage, color: [u8; 3]) -> RgbImage {
    let mut pixels = Vec::with_capacity(img.pixels().len() * 3);
    for &i in img.pixels() {
        pixels.extend(color.iter().map(|&c| scale_channel(i, c)));
    }
    RgbImage::new(MNIST_SIDE, MNIST_SIDE, pixels, img.label()).expect("28x28x3 buffer")
}

pub fn inject_color(img: &GrayImage, mode: ColorMode, palette: &ColorPalette, rng: &mut SeededRng) -> RgbImage {
    let color = match mode {
        ColorMode::Biased => palette.color(img.label()),
        ColorMode::Unbiased => random_color(rng),
    };
    colorize(img, color)
}

const COLOR_STREAM: u64 = 0xC010;

/// Colors every image; sample `i` draws from a generator derived from
/// `(seed, i)`, so the result does not depend on processing order.
pub fn build_colored_mnist(source: &[GrayImage], mode: ColorMode, seed: u64) -> Result<Vec<ColoredMnistSample>> {
    let palette = ColorPalette::biased();
    Ok(source
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut r = rng::derived(seed, &[COLOR_STREAM, i as u64]);
            let color = match mode {
                ColorMode::Biased => palette.color(img.label()),
                ColorMode::Unbiased => random_color(&mut r),
            };
            ColoredMnistSample { image: colorize(img, color), label: img.label(), mode, color }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat(value: u8, label: u8) -> GrayImage {
        GrayImage::new(vec![value; 784], label).unwrap()
    }

    #[test]
    fn palette_matches_reference_table() {
        let p = ColorPalette::biased();
        assert_eq!(p.color(0), [255, 100, 0]);
        assert_eq!(p.color(2), [188, 143, 143]);
        assert_eq!(p.color(6), [65, 105, 225]);
        assert_eq!(p.color(8), [0, 0, 255]);
        assert_eq!(p.color(9), [255, 20, 147]);
    }

    #[test]
    fn worked_colorization_examples() {
        let p = ColorPalette::biased();
        let mut r = rng::seeded(0);
        assert_eq!(inject_color(&flat(255, 0), ColorMode::Biased, &p, &mut r).get(0, 0), [255, 100, 0]);
        assert_eq!(inject_color(&flat(128, 3), ColorMode::Biased, &p, &mut r).get(5, 5), [128, 0, 0]);
        assert_eq!(inject_color(&flat(0, 7), ColorMode::Biased, &p, &mut r).get(1, 2), [0, 0, 0]);
        assert_eq!(inject_color(&flat(0, 7), ColorMode::Unbiased, &p, &mut r).get(1, 2), [0, 0, 0]);
        // half-way case rounds up: 1 * 255 / 510 * 2 → 0.5 → 1
        assert_eq!(scale_channel(1, 128), 1);
    }

    #[test]
    fn hue_wheel_corners() {
        assert_eq!(hue_to_rgb(0.0), [255, 0, 0]);
        assert_eq!(hue_to_rgb(1.0 / 3.0), [0, 255, 0]);
        assert_eq!(hue_to_rgb(2.0 / 3.0), [0, 0, 255]);
        // full saturation/value: max channel is always 255
        for i in 0..100 {
            assert_eq!(*hue_to_rgb(i as f64 / 100.0).iter().max().unwrap(), 255);
        }
    }

    #[test]
    fn biased_build_uses_class_color_and_keeps_order() {
        let src: Vec<GrayImage> = (0..20).map(|i| flat(200, (i % 10) as u8)).collect();
        let out = build_colored_mnist(&src, ColorMode::Biased, 3).unwrap();
        assert_eq!(out.len(), 20);
        for (s, g) in out.iter().zip(&src) {
            assert_eq!(s.label, g.label());
            assert_eq!(s.color, ColorPalette::biased().color(g.label()));
        }
        assert!(build_colored_mnist(&[], ColorMode::Unbiased, 3).unwrap().is_empty());
    }

    #[test]
    fn unbiased_build_is_seeded() {
        let src: Vec<GrayImage> = (0..8).map(|i| flat(255, (i % 10) as u8)).collect();
        let a = build_colored_mnist(&src, ColorMode::Unbiased, 11).unwrap();
        let b = build_colored_mnist(&src, ColorMode::Unbiased, 11).unwrap();
        let c = build_colored_mnist(&src, ColorMode::Unbiased, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn prop_colorization_monotone(a in 0u8..=255, b in 0u8..=255, c in 0u8..=255) {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            prop_assert!(scale_channel(hi, c) >= scale_channel(lo, c));
            prop_assert!(scale_channel(hi, c) <= c);
        }

        #[test]
        fn prop_rounding_half_up(i in 0u8..=255, c in 0u8..=255) {
            let exact = i as f64 * c as f64 / 255.0;
            let got = scale_channel(i, c) as f64;
            prop_assert!(got - exact <= 0.5 + 1e-12 && exact - got < 0.5);
        }
    }
}
