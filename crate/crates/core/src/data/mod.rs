//! Dataset forge: IDX ingestion, synthetic digit and shape generators,
//! colored-MNIST synthesis, positive-pair sampling and two-view augmentation.

pub mod augment;
pub mod color;
pub mod digits;
pub mod idx;
pub mod pairs;
pub mod shapes;
pub mod store;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment_two_views, AugmentationPolicy};
pub use color::{build_colored_mnist, inject_color, ColorMode, ColorPalette, ColoredMnistSample};
pub use idx::load_idx;
pub use pairs::{sample_positive, PairBatch, PositiveSampler};

pub const MNIST_SIDE: usize = 28;
pub const MNIST_PIXELS: usize = MNIST_SIDE * MNIST_SIDE;
pub const NUM_CLASSES: usize = 10;

/// A 28×28 grayscale image with its class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pixels: Vec<u8>,
    label: u8,
}

impl GrayImage {
    pub fn new(pixels: Vec<u8>, label: u8) -> Result<Self> {
        if pixels.len() != MNIST_PIXELS {
            return Err(Error::Dimension(format!("gray image needs {MNIST_PIXELS} pixels, got {}", pixels.len())));
        }
        if label as usize >= NUM_CLASSES {
            return Err(Error::Parameter(format!("label {label} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self { pixels, label })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * MNIST_SIDE + x]
    }
}

/// An H×W RGB image, interleaved row-major (`[y][x][channel]`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    label: u8,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, label: u8) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "rgb image {width}x{height} needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels, label })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = label;
        self
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Planar `[3, h, w]` values scaled to `[0, 1]`.
    pub fn to_planar_f32(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0f32; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c] as f32 / 255.0;
            }
        }
        out
    }

    /// Inverse of [`RgbImage::to_planar_f32`]; values are clamped and rounded.
    pub fn from_planar(values: &[f32], width: usize, height: usize, label: u8) -> Result<Self> {
        let hw = width * height;
        if values.len() != 3 * hw {
            return Err(Error::Dimension(format!("planar buffer of {} for {width}x{height}", values.len())));
        }
        let mut pixels = vec![0u8; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                pixels[i * 3 + c] = (values[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Self::new(width, height, pixels, label)
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length checked at construction")
    }

    pub fn from_image(img: &image::RgbImage, label: u8) -> Result<Self> {
        Self::new(img.width() as usize, img.height() as usize, img.as_raw().clone(), label)
    }
}

/// Stacks images of equal size into a `[n, 3, h, w]` tensor in `[0, 1]`.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Dimension("cannot stack an empty image list".into()));
    };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::Dimension(format!(
                "mixed image sizes {}x{} and {w}x{h}",
                img.width, img.height
            )));
        }
        data.extend(img.to_planar_f32());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `[n, 3, h, w]` tensor back into images (labels set to 0).
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    (0..n).map(|i| RgbImage::from_planar(&flat[i * 3 * h * w..(i + 1) * 3 * h * w], w, h, 0)).collect()
}

/// Images with labels, as consumed by the trainers and evaluators.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<RgbImage>,
}

impl LabeledImages {
    pub fn new(images: Vec<RgbImage>) -> Self {
        Self { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.images.iter().map(|i| i.label()).collect()
    }

    pub fn subset(&self, n: usize) -> Self {
        Self { images: self.images.iter().take(n).cloned().collect() }
    }

    pub fn tensor(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let refs: Vec<&RgbImage> = indices.iter().map(|&i| &self.images[i]).collect();
        images_to_tensor(&refs, dtype)
    }
}

impl From<Vec<ColoredMnistSample>> for LabeledImages {
    fn from(samples: Vec<ColoredMnistSample>) -> Self {
        Self { images: samples.into_iter().map(|s| s.image).collect() }
    }
}
