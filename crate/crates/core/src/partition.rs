//! Partitioned embeddings and the content/style contrastive loss.
//!
//! An embedding of width `content_dim + style_dim` is read as two index
//! ranges: the content part `[0, content_dim)` is pulled together across a
//! positive pair, the style part `[content_dim, total)` is pushed apart with
//! weight `alpha`:
//!
//! ```text
//! L = ‖c(a) − c(p)‖ − α · ‖s(a) − s(p)‖
//! ```
//!
//! The scalar functions here work on `f64` slices and are the reference
//! implementation. [`EmbeddingBatch`] and the `*_batch` functions are the
//! differentiable tensor versions used by the trainers.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::row_norm;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub content_dim: usize,
    pub style_dim: usize,
    pub alpha: f64,
}

impl PartitionSpec {
    pub fn new(content_dim: usize, style_dim: usize, alpha: f64) -> Result<Self> {
        let spec = Self { content_dim, style_dim, alpha };
        spec.validate()?;
        Ok(spec)
    }

    /// Splits `width` in the ratio `content : style`, e.g. 64 at 3:1 gives 48/16.
    pub fn proportional(width: usize, content: usize, style: usize, alpha: f64) -> Result<Self> {
        if content + style == 0 || width * content % (content + style) != 0 {
            return Err(Error::Parameter(format!(
                "width {width} does not split evenly in ratio {content}:{style}"
            )));
        }
        let content_dim = width * content / (content + style);
        Self::new(content_dim, width - content_dim, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if self.content_dim == 0 || self.style_dim == 0 {
            return Err(Error::Parameter(format!(
                "partition parts must be non-empty (content {}, style {})",
                self.content_dim, self.style_dim
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn total_dim(&self) -> usize {
        self.content_dim + self.style_dim
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Same index layout; `alpha` may differ.
    pub fn same_layout(&self, other: &PartitionSpec) -> bool {
        self.content_dim == other.content_dim && self.style_dim == other.style_dim
    }

    fn check_layout(&self, other: &PartitionSpec) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "partition {}+{} does not match {}+{}",
                self.content_dim, self.style_dim, other.content_dim, other.style_dim
            )))
        }
    }
}

/// Which part of a partitioned vector an operation targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Content,
    Style,
}

impl Part {
    pub fn as_str(&self) -> &'static str {
        match self {
            Part::Content => "content",
            Part::Style => "style",
        }
    }

    pub fn range(&self, spec: &PartitionSpec) -> std::ops::Range<usize> {
        match self {
            Part::Content => 0..spec.content_dim,
            Part::Style => spec.content_dim..spec.total_dim(),
        }
    }
}

impl std::fmt::Display for Part {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionedEmbedding {
    values: Vec<f64>,
    spec: PartitionSpec,
}

impl PartitionedEmbedding {
    pub fn new(values: Vec<f64>, spec: PartitionSpec) -> Result<Self> {
        if values.len() != spec.total_dim() {
            return Err(Error::Dimension(format!(
                "embedding has {} values, partition expects {}",
                values.len(),
                spec.total_dim()
            )));
        }
        Ok(Self { values, spec })
    }

    pub fn from_parts(content: &[f64], style: &[f64], spec: PartitionSpec) -> Result<Self> {
        if content.len() != spec.content_dim || style.len() != spec.style_dim {
            return Err(Error::Dimension(format!(
                "parts {}+{} do not match partition {}+{}",
                content.len(),
                style.len(),
                spec.content_dim,
                spec.style_dim
            )));
        }
        let mut values = Vec::with_capacity(spec.total_dim());
        values.extend_from_slice(content);
        values.extend_from_slice(style);
        Ok(Self { values, spec })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn spec(&self) -> &PartitionSpec {
        &self.spec
    }

    pub fn content(&self) -> &[f64] {
        &self.values[..self.spec.content_dim]
    }

    pub fn style(&self) -> &[f64] {
        &self.values[self.spec.content_dim..]
    }

    pub fn part(&self, part: Part) -> &[f64] {
        &self.values[part.range(&self.spec)]
    }

    pub fn part_mut(&mut self, part: Part) -> &mut [f64] {
        let range = part.range(&self.spec);
        &mut self.values[range]
    }
}

/// Distances and combined objective for one anchor/positive pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrLossBreakdown {
    pub content_distance: f64,
    pub style_distance: f64,
    pub total: f64,
}

impl PrLossBreakdown {
    pub fn new(content_distance: f64, style_distance: f64, alpha: f64) -> Self {
        Self { content_distance, style_distance, total: content_distance - alpha * style_distance }
    }
}

pub fn split<'a>(v: &'a [f64], spec: &PartitionSpec) -> Result<(&'a [f64], &'a [f64])> {
    if v.len() != spec.total_dim() {
        return Err(Error::Dimension(format!(
            "vector of length {} cannot be split {}+{}",
            v.len(),
            spec.content_dim,
            spec.style_dim
        )));
    }
    Ok(v.split_at(spec.content_dim))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_pair(a: &PartitionedEmbedding, b: &PartitionedEmbedding, spec: &PartitionSpec) -> Result<()> {
    spec.check_layout(&a.spec)?;
    spec.check_layout(&b.spec)
}

/// Raw Euclidean form used by PR-VAE: unsquared distances between the parts.
pub fn pr_loss_euclidean(
    z_a: &PartitionedEmbedding,
    z_p: &PartitionedEmbedding,
    spec: &PartitionSpec,
) -> Result<PrLossBreakdown> {
    check_pair(z_a, z_p, spec)?;
    Ok(PrLossBreakdown::new(
        euclidean(z_a.content(), z_p.content()),
        euclidean(z_a.style(), z_p.style()),
        spec.alpha,
    ))
}

/// Analytic gradient of `pr_loss_euclidean(..).total` with respect to `z_a`.
/// At a coincident part the zero subgradient is used.
pub fn pr_loss_euclidean_grad(
    z_a: &PartitionedEmbedding,
    z_p: &PartitionedEmbedding,
    spec: &PartitionSpec,
) -> Result<Vec<f64>> {
    let loss = pr_loss_euclidean(z_a, z_p, spec)?;
    let mut grad = Vec::with_capacity(spec.total_dim());
    for (part, dist, weight) in [
        (Part::Content, loss.content_distance, 1.0),
        (Part::Style, loss.style_distance, -spec.alpha),
    ] {
        let (a, p) = (z_a.part(part), z_p.part(part));
        grad.extend(a.iter().zip(p).map(|(x, y)| if dist > 0.0 { weight * (x - y) / dist } else { 0.0 }));
    }
    Ok(grad)
}

/// How the distance between unit-normalized parts is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizedDistance {
    /// `‖û − v̂‖`, in `[0, 2]`.
    #[default]
    Euclidean,
    /// `‖û − v̂‖² = 2 − 2·cos`, in `[0, 4]`.
    Squared,
}

fn unit(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate(format!("{what} has norm {norm}; cannot normalize")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Normalized form used by PR-BYOL: each part is scaled to unit norm before
/// the distance is taken.
pub fn pr_loss_normalized(
    prediction: &PartitionedEmbedding,
    target: &PartitionedEmbedding,
    spec: &PartitionSpec,
) -> Result<PrLossBreakdown> {
    pr_loss_normalized_with(prediction, target, spec, NormalizedDistance::Euclidean)
}

pub fn pr_loss_normalized_with(
    prediction: &PartitionedEmbedding,
    target: &PartitionedEmbedding,
    spec: &PartitionSpec,
    form: NormalizedDistance,
) -> Result<PrLossBreakdown> {
    check_pair(prediction, target, spec)?;
    let mut dists = [0.0; 2];
    for (slot, part) in dists.iter_mut().zip([Part::Content, Part::Style]) {
        let u = unit(prediction.part(part), &format!("prediction {part} part"))?;
        let v = unit(target.part(part), &format!("target {part} part"))?;
        let sq: f64 = u.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum();
        *slot = match form {
            NormalizedDistance::Euclidean => sq.sqrt(),
            NormalizedDistance::Squared => sq,
        };
    }
    Ok(PrLossBreakdown::new(dists[0], dists[1], spec.alpha))
}

/// Exchanges the style parts: `(c1|s2, c2|s1)`.
pub fn swap_styles(
    z1: &PartitionedEmbedding,
    z2: &PartitionedEmbedding,
) -> Result<(PartitionedEmbedding, PartitionedEmbedding)> {
    z1.spec.check_layout(&z2.spec)?;
    Ok((
        PartitionedEmbedding::from_parts(z1.content(), z2.style(), z1.spec)?,
        PartitionedEmbedding::from_parts(z2.content(), z1.style(), z2.spec)?,
    ))
}

/// A batch of partitioned embeddings stored as a `[batch, width]` tensor.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    values: Tensor,
    spec: PartitionSpec,
}

impl EmbeddingBatch {
    pub fn new(values: Tensor, spec: PartitionSpec) -> Result<Self> {
        let (_, width) = values.dims2()?;
        if width != spec.total_dim() {
            return Err(Error::Dimension(format!(
                "embedding batch width {width} does not match partition {}+{}",
                spec.content_dim, spec.style_dim
            )));
        }
        Ok(Self { values, spec })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn spec(&self) -> &PartitionSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn part(&self, part: Part) -> Result<Tensor> {
        let range = part.range(&self.spec);
        Ok(self.values.narrow(1, range.start, range.len())?)
    }

    pub fn content(&self) -> Result<Tensor> {
        self.part(Part::Content)
    }

    pub fn style(&self) -> Result<Tensor> {
        self.part(Part::Style)
    }

    pub fn detach(&self) -> Self {
        Self { values: self.values.detach(), spec: self.spec }
    }

    /// Rows as scalar embeddings (copies to host as `f64`).
    pub fn to_embeddings(&self) -> Result<Vec<PartitionedEmbedding>> {
        let rows = self.values.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
        rows.into_iter().map(|r| PartitionedEmbedding::new(r, self.spec)).collect()
    }
}

/// Per-row distances of a batch pair, each a `[batch]` tensor.
#[derive(Clone, Debug)]
pub struct BatchDistances {
    pub content: Tensor,
    pub style: Tensor,
}

impl BatchDistances {
    /// Batch mean of `content − α·style`.
    pub fn mean_total(&self, alpha: f64) -> Result<Tensor> {
        Ok((self.content.mean_all()? - (self.style.mean_all()? * alpha)?)?)
    }
}

fn check_batches(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<()> {
    a.spec.check_layout(&b.spec)?;
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("batch sizes {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

pub fn pr_distances_euclidean(a: &EmbeddingBatch, p: &EmbeddingBatch) -> Result<BatchDistances> {
    check_batches(a, p)?;
    Ok(BatchDistances {
        content: row_norm(&(a.content()? - p.content()?)?)?,
        style: row_norm(&(a.style()? - p.style()?)?)?,
    })
}

/// Scales each row to unit norm with `eps` inside the square root.
pub fn unit_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + eps)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Smallest per-row norm over both parts of a batch.
pub fn min_part_norm(x: &EmbeddingBatch) -> Result<f64> {
    let mut min = f64::INFINITY;
    for part in [Part::Content, Part::Style] {
        let n = row_norm(&x.part(part)?)?.to_dtype(candle_core::DType::F64)?.min(0)?.to_scalar::<f64>()?;
        min = min.min(n);
    }
    Ok(min)
}

/// Normalized distances for training. Zero-norm rows are reported as a
/// degeneracy error rather than silently patched; `eps` only keeps the
/// normalization smooth.
pub fn pr_distances_normalized(
    prediction: &EmbeddingBatch,
    target: &EmbeddingBatch,
    eps: f64,
    form: NormalizedDistance,
) -> Result<BatchDistances> {
    check_batches(prediction, target)?;
    for (name, batch) in [("prediction", prediction), ("target", target)] {
        let min = min_part_norm(batch)?;
        if !(min > 0.0) {
            return Err(Error::Degenerate(format!(
                "{name} batch has a part with norm {min} (representation collapse)"
            )));
        }
    }
    let dist = |part: Part| -> Result<Tensor> {
        let diff = (unit_rows(&prediction.part(part)?, eps)? - unit_rows(&target.part(part)?, eps)?)?;
        match form {
            NormalizedDistance::Euclidean => Ok(row_norm(&diff)?),
            NormalizedDistance::Squared => Ok(diff.sqr()?.sum(1)?),
        }
    };
    Ok(BatchDistances { content: dist(Part::Content)?, style: dist(Part::Style)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;

    fn spec(c: usize, s: usize, a: f64) -> PartitionSpec {
        PartitionSpec::new(c, s, a).unwrap()
    }

    fn emb(v: &[f64], s: PartitionSpec) -> PartitionedEmbedding {
        PartitionedEmbedding::new(v.to_vec(), s).unwrap()
    }

    #[test]
    fn split_by_index() {
        let s = spec(2, 1, 1.0);
        let (c, st) = split(&[1.0, 2.0, 3.0], &s).unwrap();
        assert_eq!(c, &[1.0, 2.0]);
        assert_eq!(st, &[3.0]);
        assert!(matches!(split(&[1.0, 2.0], &s), Err(Error::Dimension(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(PartitionSpec::new(0, 3, 1.0).is_err());
        assert!(PartitionSpec::new(3, 0, 1.0).is_err());
        assert!(PartitionSpec::new(3, 3, -0.1).is_err());
        assert!(PartitionSpec::new(3, 3, f64::NAN).is_err());
        let p = PartitionSpec::proportional(64, 3, 1, 1.0).unwrap();
        assert_eq!((p.content_dim, p.style_dim), (48, 16));
        let p = PartitionSpec::proportional(256, 3, 1, 1.0).unwrap();
        assert_eq!((p.content_dim, p.style_dim), (192, 64));
        assert!(PartitionSpec::proportional(10, 3, 1, 1.0).is_err());
    }

    #[test]
    fn euclidean_worked_example() {
        let s = spec(2, 2, 0.5);
        let l = pr_loss_euclidean(&emb(&[1.0, 0.0, 0.0, 0.0], s), &emb(&[0.0, 0.0, 3.0, 4.0], s), &s).unwrap();
        assert_eq!(l.content_distance, 1.0);
        assert_eq!(l.style_distance, 5.0);
        assert_eq!(l.total, -1.5);
    }

    #[test]
    fn coincident_and_alpha_zero() {
        let s = spec(2, 2, 0.0);
        let a = emb(&[1.0, -2.0, 0.5, 3.0], s);
        let l = pr_loss_euclidean(&a, &a, &s).unwrap();
        assert_eq!((l.content_distance, l.style_distance, l.total), (0.0, 0.0, 0.0));
        let b = emb(&[0.0, 1.0, -4.0, 2.0], s);
        let l = pr_loss_euclidean(&a, &b, &s).unwrap();
        assert_eq!(l.total, l.content_distance);
    }

    #[test]
    fn spec_mismatch_is_dimension_error() {
        let a = emb(&[1.0, 2.0, 3.0], spec(2, 1, 1.0));
        let b = emb(&[1.0, 2.0, 3.0], spec(1, 2, 1.0));
        assert!(matches!(pr_loss_euclidean(&a, &b, &spec(2, 1, 1.0)), Err(Error::Dimension(_))));
        assert!(matches!(swap_styles(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn normalized_geometry() {
        let s = spec(2, 2, 1.0);
        // parallel content, antiparallel style
        let l = pr_loss_normalized(&emb(&[1.0, 1.0, 1.0, 0.0], s), &emb(&[3.0, 3.0, -2.0, 0.0], s), &s).unwrap();
        assert!(l.content_distance.abs() < 1e-15);
        assert!((l.style_distance - 2.0).abs() < 1e-15);
        // antiparallel content
        let l = pr_loss_normalized(&emb(&[1.0, 0.0, 1.0, 0.0], s), &emb(&[-1.0, 0.0, 1.0, 0.0], s), &s).unwrap();
        assert!((l.content_distance - 2.0).abs() < 1e-15);
        // orthogonal everywhere, alpha 1
        let l = pr_loss_normalized(&emb(&[1.0, 0.0, 0.0, 2.0], s), &emb(&[0.0, 5.0, 3.0, 0.0], s), &s).unwrap();
        assert!((l.content_distance - 2f64.sqrt()).abs() < 1e-15);
        assert!(l.total.abs() < 1e-15);
    }

    #[test]
    fn normalized_trig_closed_forms() {
        // 2-dim parts at known angles: ‖û − v̂‖ = sqrt(2 − 2cosθ); squared form is 2 − 2cosθ.
        for &(tc, ts, alpha) in &[(0.3, 1.1, 0.5), (2.0, 0.2, 1.0), (std::f64::consts::PI, 0.7, 0.1)] {
            let s = spec(2, 2, alpha);
            let p = emb(&[1.0, 0.0, 2.0, 0.0], s);
            let t = emb(&[f64::cos(tc), f64::sin(tc), 0.5 * f64::cos(ts), 0.5 * f64::sin(ts)], s);
            let e = pr_loss_normalized(&p, &t, &s).unwrap();
            let expect = (2.0 - 2.0 * tc.cos()).sqrt() - alpha * (2.0 - 2.0 * ts.cos()).sqrt();
            assert!((e.total - expect).abs() < 1e-12, "{} vs {}", e.total, expect);
            let q = pr_loss_normalized_with(&p, &t, &s, NormalizedDistance::Squared).unwrap();
            let expect = (2.0 - 2.0 * tc.cos()) - alpha * (2.0 - 2.0 * ts.cos());
            assert!((q.total - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_zero_part_is_degenerate() {
        let s = spec(2, 2, 1.0);
        let r = pr_loss_normalized(&emb(&[0.0, 0.0, 1.0, 0.0], s), &emb(&[1.0, 0.0, 1.0, 0.0], s), &s);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn swap_bookkeeping() {
        let s = spec(2, 1, 1.0);
        let (a, b) = swap_styles(&emb(&[1.0, 2.0, 9.0], s), &emb(&[3.0, 4.0, 7.0], s)).unwrap();
        assert_eq!(a.values(), &[1.0, 2.0, 7.0]);
        assert_eq!(b.values(), &[3.0, 4.0, 9.0]);
    }

    #[test]
    fn batch_matches_scalar() {
        let s = spec(3, 2, 0.7);
        let dev = Device::Cpu;
        let a: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let p: Vec<f64> = (0..10).map(|i| (i as f64 * 0.91).cos()).collect();
        let ba = EmbeddingBatch::new(Tensor::from_vec(a.clone(), (2, 5), &dev).unwrap(), s).unwrap();
        let bp = EmbeddingBatch::new(Tensor::from_vec(p.clone(), (2, 5), &dev).unwrap(), s).unwrap();
        let d = pr_distances_euclidean(&ba, &bp).unwrap();
        let dn = pr_distances_normalized(&ba, &bp, 0.0, NormalizedDistance::Euclidean).unwrap();
        let (c, st) = (d.content.to_vec1::<f64>().unwrap(), d.style.to_vec1::<f64>().unwrap());
        let (cn, sn) = (dn.content.to_vec1::<f64>().unwrap(), dn.style.to_vec1::<f64>().unwrap());
        for r in 0..2 {
            let ea = emb(&a[r * 5..r * 5 + 5], s);
            let ep = emb(&p[r * 5..r * 5 + 5], s);
            let l = pr_loss_euclidean(&ea, &ep, &s).unwrap();
            assert!((c[r] - l.content_distance).abs() < 1e-14);
            assert!((st[r] - l.style_distance).abs() < 1e-14);
            let n = pr_loss_normalized(&ea, &ep, &s).unwrap();
            assert!((cn[r] - n.content_distance).abs() < 1e-12);
            assert!((sn[r] - n.style_distance).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_gradient_at_coincidence_is_finite() {
        let s = spec(2, 2, 1.0);
        let v = Var::from_tensor(&Tensor::ones((1, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let a = EmbeddingBatch::new(v.as_tensor().clone(), s).unwrap();
        let p = EmbeddingBatch::new(v.as_tensor().detach(), s).unwrap();
        let loss = pr_distances_euclidean(&a, &p).unwrap().mean_total(1.0).unwrap();
        assert_eq!(loss.to_scalar::<f64>().unwrap(), 0.0);
        let g = loss.backward().unwrap();
        let g = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn batch_collapse_is_degenerate() {
        let s = spec(2, 2, 1.0);
        let z = EmbeddingBatch::new(Tensor::zeros((3, 4), DType::F32, &Device::Cpu).unwrap(), s).unwrap();
        let o = EmbeddingBatch::new(Tensor::ones((3, 4), DType::F32, &Device::Cpu).unwrap(), s).unwrap();
        let r = pr_distances_normalized(&z, &o, 1e-12, NormalizedDistance::Euclidean);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn prop_split_concat_roundtrip(v in vec_strategy(7)) {
            let s = spec(4, 3, 1.0);
            let (c, st) = split(&v, &s).unwrap();
            let back = PartitionedEmbedding::from_parts(c, st, s).unwrap();
            prop_assert_eq!(back.values(), &v[..]);
        }

        #[test]
        fn prop_euclidean_symmetric_and_consistent(a in vec_strategy(5), b in vec_strategy(5), alpha in 0.0f64..3.0) {
            let s = spec(3, 2, alpha);
            let (ea, eb) = (emb(&a, s), emb(&b, s));
            let l1 = pr_loss_euclidean(&ea, &eb, &s).unwrap();
            let l2 = pr_loss_euclidean(&eb, &ea, &s).unwrap();
            prop_assert_eq!(l1, l2);
            prop_assert_eq!(l1.total, l1.content_distance - alpha * l1.style_distance);
        }

        #[test]
        fn prop_euclidean_gradient_matches_finite_differences(a in vec_strategy(5), b in vec_strategy(5), alpha in 0.0f64..3.0) {
            let s = spec(3, 2, alpha);
            let (ea, eb) = (emb(&a, s), emb(&b, s));
            let l = pr_loss_euclidean(&ea, &eb, &s).unwrap();
            prop_assume!(l.content_distance > 1e-2 && l.style_distance > 1e-2);
            let g = pr_loss_euclidean_grad(&ea, &eb, &s).unwrap();
            let h = 1e-5;
            for i in 0..5 {
                let mut plus = a.clone();
                plus[i] += h;
                let mut minus = a.clone();
                minus[i] -= h;
                let fp = pr_loss_euclidean(&emb(&plus, s), &eb, &s).unwrap().total;
                let fm = pr_loss_euclidean(&emb(&minus, s), &eb, &s).unwrap().total;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-3);
                prop_assert!(rel < 1e-6, "coord {}: analytic {} fd {} rel {}", i, g[i], fd, rel);
            }
        }

        #[test]
        fn prop_normalized_bounds_and_scale_invariance(
            a in vec_strategy(6), b in vec_strategy(6), k in 0.01f64..100.0, alpha in 0.0f64..2.0
        ) {
            let s = spec(3, 3, alpha);
            let (ea, eb) = (emb(&a, s), emb(&b, s));
            prop_assume!(ea.content().iter().any(|x| x.abs() > 1e-3) && ea.style().iter().any(|x| x.abs() > 1e-3));
            prop_assume!(eb.content().iter().any(|x| x.abs() > 1e-3) && eb.style().iter().any(|x| x.abs() > 1e-3));
            let l = pr_loss_normalized(&ea, &eb, &s).unwrap();
            prop_assert!((0.0..=2.0 + 1e-12).contains(&l.content_distance));
            prop_assert!((0.0..=2.0 + 1e-12).contains(&l.style_distance));
            prop_assert!(l.total >= -2.0 * alpha - 1e-12 && l.total <= 2.0 + 1e-12);
            let mut scaled = ea.clone();
            scaled.part_mut(Part::Style).iter_mut().for_each(|x| *x *= k);
            let ls = pr_loss_normalized(&scaled, &eb, &s).unwrap();
            prop_assert!((ls.total - l.total).abs() < 1e-9);
        }

        #[test]
        fn prop_swap_is_involution(a in vec_strategy(4), b in vec_strategy(4)) {
            let s = spec(2, 2, 1.0);
            let (ea, eb) = (emb(&a, s), emb(&b, s));
            let (x, y) = swap_styles(&ea, &eb).unwrap();
            let (x2, y2) = swap_styles(&x, &y).unwrap();
            prop_assert_eq!(&x2, &ea);
            prop_assert_eq!(&y2, &eb);
            let (s1, s2) = swap_styles(&ea, &ea).unwrap();
            prop_assert_eq!(&s1, &ea);
            prop_assert_eq!(&s2, &ea);
        }
    }
}
