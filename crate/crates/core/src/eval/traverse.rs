//! Latent traversal grids and style-swap figures for a trained VAE.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::probe::LinearProbe;
use crate::data::{tensor_to_images, RgbImage};
use crate::error::{Error, Result};
use crate::partition::{swap_styles, PartitionedEmbedding};
use crate::vae::ConvVae;

/// Per-dimension mean and (population) standard deviation of posterior means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn from_means(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).ok_or_else(|| Error::Dimension("no latent rows".into()))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::Dimension(format!("latent row of length {} among length-{d} rows", r.len())));
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        Ok(Self { mean, std: var.into_iter().map(f64::sqrt).collect() })
    }

    pub fn dim(&self) -> usize {
        self.std.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraversalConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub steps: usize,
    /// Dimensions to traverse; all when `None`.
    #[serde(default)]
    pub dims: Option<Vec<usize>>,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        Self { t_min: -4.0, t_max: 4.0, steps: 9, dims: None }
    }
}

impl TraversalConfig {
    pub fn coefficients(&self) -> Result<Vec<f64>> {
        if self.steps < 2 || !(self.t_min < self.t_max) {
            return Err(Error::Parameter(format!(
                "traversal needs steps >= 2 and t_min < t_max (got {} steps over [{}, {}])",
                self.steps, self.t_min, self.t_max
            )));
        }
        let last = (self.steps - 1) as f64;
        Ok((0..self.steps)
            .map(|j| {
                // exact zero at the center of a symmetric odd grid
                if 2 * j + 1 == self.steps && self.t_min == -self.t_max {
                    0.0
                } else {
                    self.t_min + (self.t_max - self.t_min) * j as f64 / last
                }
            })
            .collect())
    }
}

/// Decoded images laid out row-major as `dims × steps`.
#[derive(Clone, Debug)]
pub struct TraversalGrid {
    pub dims: Vec<usize>,
    pub coefficients: Vec<f64>,
    /// Decoder outputs in `[0, 1]`, one `[1, c, h, w]` tensor per cell.
    pub cells: Vec<Tensor>,
    pub mu: Vec<f64>,
}

impl TraversalGrid {
    pub fn cell(&self, row: usize, col: usize) -> &Tensor {
        &self.cells[row * self.coefficients.len() + col]
    }

    pub fn images(&self) -> Result<Vec<RgbImage>> {
        self.cells.iter().map(|t| Ok(tensor_to_images(t)?.remove(0))).collect()
    }
}

fn decode_one(model: &ConvVae, z: &[f64]) -> Result<Tensor> {
    let t = Tensor::from_vec(z.to_vec(), (1, z.len()), &Device::Cpu)?;
    model.decode(&t)
}

fn encode_one(model: &ConvVae, x: &RgbImage) -> Result<Vec<f64>> {
    let t = crate::data::images_to_tensor(&[x], model.dtype())?;
    Ok(model.encode(&t)?.mu.values().to_dtype(DType::F64)?.to_vec2::<f64>()?.remove(0))
}

/// Row `i` decodes `mu` with dimension `dims[i]` shifted by `t_j · σ`.
/// Every cell is decoded on its own, so the zero-shift cell is bit-identical
/// to a plain reconstruction.
pub fn traversal_grid(model: &ConvVae, x: &RgbImage, stats: &LatentStats, config: &TraversalConfig) -> Result<TraversalGrid> {
    let latent = model.spec().latent_dim();
    if stats.dim() != latent {
        return Err(Error::Dimension(format!("stats cover {} dims, model has {latent}", stats.dim())));
    }
    let dims = config.dims.clone().unwrap_or_else(|| (0..latent).collect());
    if let Some(&bad) = dims.iter().find(|&&d| d >= latent) {
        return Err(Error::Parameter(format!("traversal dimension {bad} out of range 0..{latent}")));
    }
    let coefficients = config.coefficients()?;
    let mu = encode_one(model, x)?;
    let mut cells = Vec::with_capacity(dims.len() * coefficients.len());
    for &d in &dims {
        for &t in &coefficients {
            let mut z = mu.clone();
            z[d] += t * stats.std[d];
            cells.push(decode_one(model, &z)?);
        }
    }
    Ok(TraversalGrid { dims, coefficients, cells, mu })
}

/// Plain reconstruction through the posterior mean, decoded alone.
pub fn reconstruct_one(model: &ConvVae, x: &RgbImage) -> Result<Tensor> {
    decode_one(model, &encode_one(model, x)?)
}

#[derive(Clone, Debug)]
pub struct SwapFigure {
    pub inputs: [RgbImage; 2],
    /// `decode(c1 | s2)` and `decode(c2 | s1)`, each `[1, c, h, w]`.
    pub swapped: [Tensor; 2],
}

impl SwapFigure {
    /// The four panels: both inputs, then both swapped reconstructions.
    pub fn images(&self) -> Result<Vec<RgbImage>> {
        let mut out = self.inputs.to_vec();
        for t in &self.swapped {
            out.push(tensor_to_images(t)?.remove(0));
        }
        Ok(out)
    }
}

pub fn style_swap_figure(model: &ConvVae, x1: &RgbImage, x2: &RgbImage) -> Result<SwapFigure> {
    let spec = model.partition();
    let m1 = PartitionedEmbedding::new(encode_one(model, x1)?, spec)?;
    let m2 = PartitionedEmbedding::new(encode_one(model, x2)?, spec)?;
    let (a, b) = swap_styles(&m1, &m2)?;
    Ok(SwapFigure { inputs: [x1.clone(), x2.clone()], swapped: [decode_one(model, a.values())?, decode_one(model, b.values())?] })
}

/// Posterior means of decoder outputs (re-encoding without quantization).
pub fn reencode(model: &ConvVae, decoded: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(model.encode(decoded)?.mu.values().to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

fn predictions(model: &ConvVae, probe: &LinearProbe, cells: &[Tensor]) -> Result<Vec<u8>> {
    let batch = Tensor::cat(cells, 0)?;
    reencode(model, &batch)?.iter().map(|f| probe.predict(f)).collect()
}

/// Per traversed dimension, the fraction of non-center cells whose
/// re-encoded reconstruction is classified differently from the re-encoded
/// center cell, averaged over `inputs`.
pub fn traversal_class_change(
    model: &ConvVae,
    probe: &LinearProbe,
    inputs: &[RgbImage],
    stats: &LatentStats,
    config: &TraversalConfig,
) -> Result<Vec<f64>> {
    if inputs.is_empty() {
        return Err(Error::Dimension("no traversal inputs".into()));
    }
    let coefficients = config.coefficients()?;
    let center = coefficients
        .iter()
        .position(|&c| c == 0.0)
        .ok_or_else(|| Error::Parameter("traversal grid has no zero-shift column".into()))?;
    let mut totals: Vec<f64> = Vec::new();
    for x in inputs {
        let grid = traversal_grid(model, x, stats, config)?;
        totals.resize(grid.dims.len(), 0.0);
        let steps = coefficients.len();
        for (row, total) in totals.iter_mut().enumerate() {
            let pred = predictions(model, probe, &grid.cells[row * steps..(row + 1) * steps])?;
            let changed = pred.iter().enumerate().filter(|&(j, &p)| j != center && p != pred[center]).count();
            *total += changed as f64 / (steps - 1) as f64;
        }
    }
    Ok(totals.into_iter().map(|t| t / inputs.len() as f64).collect())
}

/// One direction of a style swap: content from `content_donor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapOutcome {
    pub content_donor: usize,
    pub style_donor: usize,
    pub content_label: u8,
    pub predicted: u8,
}

/// Classifies both swapped reconstructions of every pair of `images`
/// indices. Each pair contributes two outcomes.
pub fn swap_outcomes(model: &ConvVae, probe: &LinearProbe, images: &[RgbImage], pairs: &[(usize, usize)]) -> Result<Vec<SwapOutcome>> {
    let mut out = Vec::with_capacity(2 * pairs.len());
    for &(i, j) in pairs {
        let (a, b) = (
            images.get(i).ok_or_else(|| Error::Dimension(format!("pair index {i} out of range")))?,
            images.get(j).ok_or_else(|| Error::Dimension(format!("pair index {j} out of range")))?,
        );
        let fig = style_swap_figure(model, a, b)?;
        let pred = predictions(model, probe, &fig.swapped)?;
        out.push(SwapOutcome { content_donor: i, style_donor: j, content_label: a.label(), predicted: pred[0] });
        out.push(SwapOutcome { content_donor: j, style_donor: i, content_label: b.label(), predicted: pred[1] });
    }
    Ok(out)
}

/// Fraction of outcomes classified as the content donor's label.
pub fn swap_recovery(outcomes: &[SwapOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.predicted == o.content_label).count() as f64 / outcomes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes::synthetic_shapes;
    use crate::partition::PartitionSpec;
    use crate::vae::{ConvVaeSpec, Precision};

    fn toy() -> ConvVae {
        ConvVae::new(
            ConvVaeSpec {
                input_size: 8,
                channels: vec![3, 4, 5],
                partition: PartitionSpec::new(3, 2, 1.0).unwrap(),
                precision: Precision::F64,
                ..ConvVaeSpec::default()
            },
            2,
        )
        .unwrap()
    }

    #[test]
    fn coefficient_grid() {
        let c = TraversalConfig::default().coefficients().unwrap();
        assert_eq!(c, vec![-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(TraversalConfig { steps: 1, ..TraversalConfig::default() }.coefficients().is_err());
    }

    #[test]
    fn grid_layout_center_and_dead_dimension() {
        let m = toy();
        let imgs = synthetic_shapes(2, 8, 1);
        let stats = LatentStats { mean: vec![0.0; 5], std: vec![1.0, 0.5, 0.0, 2.0, 1.0] };
        let g = traversal_grid(&m, &imgs[0], &stats, &TraversalConfig::default()).unwrap();
        assert_eq!(g.cells.len(), 45);
        let recon = reconstruct_one(&m, &imgs[0]).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for row in 0..5 {
            assert_eq!(g.cell(row, 4).flatten_all().unwrap().to_vec1::<f64>().unwrap(), recon);
        }
        // σ = 0: every cell of that row is the reconstruction
        for col in 0..9 {
            assert_eq!(g.cell(2, col).flatten_all().unwrap().to_vec1::<f64>().unwrap(), recon);
        }
        let bad = TraversalConfig { dims: Some(vec![5]), ..TraversalConfig::default() };
        assert!(matches!(traversal_grid(&m, &imgs[0], &stats, &bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn self_swap_and_double_swap() {
        let m = toy();
        let imgs = synthetic_shapes(2, 8, 3);
        let f = style_swap_figure(&m, &imgs[0], &imgs[0]).unwrap();
        let recon = reconstruct_one(&m, &imgs[0]).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for s in &f.swapped {
            assert_eq!(s.flatten_all().unwrap().to_vec1::<f64>().unwrap(), recon);
        }
        let spec = m.partition();
        let m1 = PartitionedEmbedding::new(encode_one(&m, &imgs[0]).unwrap(), spec).unwrap();
        let m2 = PartitionedEmbedding::new(encode_one(&m, &imgs[1]).unwrap(), spec).unwrap();
        let (a, b) = swap_styles(&m1, &m2).unwrap();
        let (a2, b2) = swap_styles(&a, &b).unwrap();
        let d = |e: &PartitionedEmbedding| decode_one(&m, e.values()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(d(&a2), d(&m1));
        assert_eq!(d(&b2), d(&m2));
        assert_eq!(f.images().unwrap().len(), 4);
    }

    #[test]
    fn class_change_and_swap_metrics() {
        let m = toy();
        let imgs = synthetic_shapes(6, 8, 4);
        let rows: Vec<Vec<f64>> = imgs.iter().map(|x| encode_one(&m, x).unwrap()).collect();
        let labels: Vec<u8> = imgs.iter().map(|x| x.label()).collect();
        let probe = crate::eval::fit_probe(&rows, &labels, &crate::eval::ProbeConfig::default()).unwrap();
        let stats = LatentStats { mean: vec![0.0; 5], std: vec![0.0; 5] };
        // zero spread: every cell equals the center, so nothing changes
        let f = traversal_class_change(&m, &probe, &imgs[..2], &stats, &TraversalConfig::default()).unwrap();
        assert_eq!(f, vec![0.0; 5]);
        let stats = LatentStats { mean: vec![0.0; 5], std: vec![50.0; 5] };
        let f = traversal_class_change(&m, &probe, &imgs[..2], &stats, &TraversalConfig::default()).unwrap();
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        let o = swap_outcomes(&m, &probe, &imgs, &[(0, 0), (1, 2)]).unwrap();
        assert_eq!(o.len(), 4);
        assert_eq!((o[2].content_donor, o[3].content_donor), (1, 2));
        // self swap decodes the plain reconstruction
        let self_pred = probe.predict(&reencode(&m, &reconstruct_one(&m, &imgs[0]).unwrap()).unwrap()[0]).unwrap();
        assert_eq!(o[0].predicted, self_pred);
        let r = swap_recovery(&o);
        assert!((0.0..=1.0).contains(&r));
        assert_eq!(swap_recovery(&[]), 0.0);
    }

    #[test]
    fn latent_stats() {
        let s = LatentStats::from_means(&[vec![1.0, 2.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(s.mean, vec![2.0, 2.0]);
        assert_eq!(s.std, vec![1.0, 0.0]);
    }
}
