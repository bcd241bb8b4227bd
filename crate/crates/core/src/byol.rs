//! BYOL-style dual network with a partitioned final representation.
//!
//! The online network (backbone, projector, predictor) is trained by
//! gradient; the target network (backbone, projector) follows it as an
//! exponential moving average. The online prediction of one view and the
//! target projection of the other are compared part by part after unit
//! normalization: content parts are pulled together, style parts pushed
//! apart.

use std::f64::consts::PI;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader, ModelKind};
use crate::data::{augment_two_views, images_to_tensor, AugmentationPolicy, LabeledImages, RgbImage};
use crate::error::{Error, Result};
use crate::nn::layers::global_avg_pool;
use crate::nn::ops::ConvGeometry;
use crate::nn::{Adam, AdamConfig, BatchNorm, Conv2d, Linear, ParamStore};
use crate::partition::{pr_distances_normalized, EmbeddingBatch, NormalizedDistance, PartitionSpec, PrLossBreakdown};
use crate::rng::{self, SeededRng};
use crate::vae::Precision;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// 3×3 stride-1 convolution, no pooling.
    #[default]
    Small,
    /// 3×3 stride-2 convolution, no pooling.
    Strided,
    /// 7×7 stride-2 convolution followed by 3×3 stride-2 max pooling.
    Imagenet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stem: Stem,
    /// Channel width of each residual stage.
    pub widths: Vec<usize>,
    /// Basic blocks per stage.
    pub blocks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByolSpec {
    pub backbone: BackboneSpec,
    pub input_size: usize,
    /// Projector and predictor output width.
    pub output_dim: usize,
    /// Hidden width of the MLP heads as a multiple of `output_dim`.
    pub hidden_multiplier: usize,
    pub partition: PartitionSpec,
    #[serde(default)]
    pub distance: NormalizedDistance,
    /// Added under the square root when normalizing parts.
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_norm_eps() -> f64 {
    1e-12
}

impl ByolSpec {
    /// Reduced residual network for 32 px inputs, 64-wide output split 48/16.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneSpec { stem: Stem::Strided, widths: vec![16, 32, 64, 128], blocks: vec![1, 1, 1, 1] },
            input_size: 32,
            output_dim: 64,
            hidden_multiplier: 4,
            partition: PartitionSpec { content_dim: 48, style_dim: 16, alpha: 1.0 },
            distance: NormalizedDistance::Euclidean,
            norm_eps: default_norm_eps(),
            precision: Precision::F32,
        }
    }

    /// ResNet-18 layout with a 256-wide output split 192/64.
    pub fn resnet18() -> Self {
        Self {
            backbone: BackboneSpec { stem: Stem::Imagenet, widths: vec![64, 128, 256, 512], blocks: vec![2, 2, 2, 2] },
            input_size: 96,
            output_dim: 256,
            hidden_multiplier: 16,
            partition: PartitionSpec { content_dim: 192, style_dim: 64, alpha: 1.0 },
            distance: NormalizedDistance::Euclidean,
            norm_eps: default_norm_eps(),
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.partition.total_dim() != self.output_dim {
            return Err(Error::Parameter(format!(
                "partition {}+{} does not cover output width {}",
                self.partition.content_dim, self.partition.style_dim, self.output_dim
            )));
        }
        let b = &self.backbone;
        if b.widths.is_empty() || b.widths.len() != b.blocks.len() || b.widths.contains(&0) || b.blocks.contains(&0) {
            return Err(Error::Parameter("backbone needs matching non-empty widths and block counts".into()));
        }
        if self.hidden_multiplier == 0 || self.input_size == 0 {
            return Err(Error::Parameter("hidden multiplier and input size must be positive".into()));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Parameter("norm_eps must be non-negative".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.backbone.widths.last().unwrap()
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut SeededRng) -> Result<Self> {
        let g1 = ConvGeometry { kernel: 3, stride, padding: 1 };
        let g2 = ConvGeometry { kernel: 3, stride: 1, padding: 1 };
        let shortcut = if stride != 1 || cin != cout {
            let g = ConvGeometry { kernel: 1, stride, padding: 0 };
            Some((
                Conv2d::new(store, &format!("{name}.shortcut.conv"), cin, cout, g, false, rng)?,
                BatchNorm::new(store, &format!("{name}.shortcut.bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, g1, false, rng)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, g2, false, rng)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

struct Backbone {
    stem: Stem,
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
}

impl Backbone {
    fn new(store: &mut ParamStore, spec: &BackboneSpec, rng: &mut SeededRng) -> Result<Self> {
        let w0 = spec.widths[0];
        let geom = match spec.stem {
            Stem::Small => ConvGeometry { kernel: 3, stride: 1, padding: 1 },
            Stem::Strided => ConvGeometry { kernel: 3, stride: 2, padding: 1 },
            Stem::Imagenet => ConvGeometry { kernel: 7, stride: 2, padding: 3 },
        };
        let stem_conv = Conv2d::new(store, "backbone.stem.conv", 3, w0, geom, false, rng)?;
        let stem_bn = BatchNorm::new(store, "backbone.stem.bn", w0)?;
        let mut blocks = Vec::new();
        let mut cin = w0;
        for (s, (&w, &n)) in spec.widths.iter().zip(&spec.blocks).enumerate() {
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, &format!("backbone.stage{s}.block{b}"), cin, w, stride, rng)?);
                cin = w;
            }
        }
        Ok(Self { stem: spec.stem, stem_conv, stem_bn, blocks })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.stem_bn.forward(&self.stem_conv.forward(x)?, train)?.relu()?;
        if self.stem == Stem::Imagenet {
            // post-ReLU values are non-negative, so zero padding acts as -inf padding
            h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
        }
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        global_avg_pool(&h)
    }
}

/// `Linear → BatchNorm → ReLU → Linear`.
struct Mlp {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, outputs: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), inputs, hidden, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, outputs, rng)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.fc2.forward(&self.bn.forward(&self.fc1.forward(x)?, train)?.relu()?)
    }
}

pub struct OnlineNetwork {
    spec: ByolSpec,
    store: ParamStore,
    backbone: Backbone,
    projector: Mlp,
    predictor: Mlp,
}

pub struct TargetNetwork {
    spec: ByolSpec,
    store: ParamStore,
    backbone: Backbone,
    projector: Mlp,
}

/// Online-network outputs of one batch.
pub struct OnlineOutput {
    pub features: Tensor,
    pub projection: Tensor,
    pub prediction: EmbeddingBatch,
}

const BYOL_INIT_STREAM: u64 = 0xB10;

fn build_encoder(spec: &ByolSpec, store: &mut ParamStore, rng: &mut SeededRng) -> Result<(Backbone, Mlp)> {
    let backbone = Backbone::new(store, &spec.backbone, rng)?;
    let hidden = spec.output_dim * spec.hidden_multiplier;
    let projector = Mlp::new(store, "projector", spec.feature_dim(), hidden, spec.output_dim, rng)?;
    Ok((backbone, projector))
}

fn check_view(spec: &ByolSpec, x: &Tensor) -> Result<()> {
    let d = x.dims();
    if d.len() != 4 || d[1] != 3 || d[2] != spec.input_size || d[3] != spec.input_size {
        return Err(Error::Dimension(format!("view {d:?} does not match [n, 3, {0}, {0}]", spec.input_size)));
    }
    Ok(())
}

impl OnlineNetwork {
    pub fn new(spec: ByolSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::derived(seed, &[BYOL_INIT_STREAM]);
        let mut store = ParamStore::new(spec.precision.dtype());
        let (backbone, projector) = build_encoder(&spec, &mut store, &mut rng)?;
        let hidden = spec.output_dim * spec.hidden_multiplier;
        let predictor = Mlp::new(&mut store, "predictor", spec.output_dim, hidden, spec.output_dim, &mut rng)?;
        Ok(Self { spec, store, backbone, projector, predictor })
    }

    pub fn spec(&self) -> &ByolSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, view: &Tensor, train: bool) -> Result<OnlineOutput> {
        check_view(&self.spec, view)?;
        let features = self.backbone.forward(&view.to_dtype(self.store.dtype())?, train)?;
        let projection = self.projector.forward(&features, train)?;
        let prediction = self.predictor.forward(&projection, train)?;
        Ok(OnlineOutput { features, projection, prediction: EmbeddingBatch::new(prediction, self.spec.partition)? })
    }

    /// Partitioned prediction of a batch of views.
    pub fn forward_online(&self, view: &Tensor, train: bool) -> Result<EmbeddingBatch> {
        Ok(self.forward(view, train)?.prediction)
    }
}

impl TargetNetwork {
    /// A target that starts as an exact copy of `online`'s backbone and projector.
    pub fn from_online(online: &OnlineNetwork) -> Result<Self> {
        let spec = online.spec.clone();
        let mut store = ParamStore::new(spec.precision.dtype());
        // initial values are overwritten by the copy below
        let (backbone, projector) = build_encoder(&spec, &mut store, &mut rng::seeded(0))?;
        store.copy_matching_from(&online.store)?;
        Ok(Self { spec, store, backbone, projector })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Partitioned projection, detached from the autograd graph.
    pub fn forward_target(&self, view: &Tensor, train: bool) -> Result<EmbeddingBatch> {
        check_view(&self.spec, view)?;
        let features = self.backbone.forward(&view.to_dtype(self.store.dtype())?, train)?;
        let projection = self.projector.forward(&features, train)?;
        EmbeddingBatch::new(projection.detach(), self.spec.partition)
    }
}

/// `θ_t ← τ·θ_t + (1 − τ)·θ_o` for every trainable target parameter.
pub fn ema_update(online: &OnlineNetwork, target: &TargetNetwork, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Parameter(format!("EMA decay {tau} outside [0, 1]")));
    }
    for (name, t) in target.store.trainable() {
        let o = online.store.get(name).ok_or_else(|| Error::Structure(format!("online network lacks {name}")))?;
        if o.dims() != t.dims() {
            return Err(Error::Structure(format!("{name}: target {:?} vs online {:?}", t.dims(), o.dims())));
        }
        let updated = ((t.as_tensor() * tau)? + (o.as_tensor().detach() * (1.0 - tau))?)?;
        t.set(&updated)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSchedule {
    pub base: f64,
    /// Ramp τ from `base` to 1 along a half cosine over the run.
    pub cosine: bool,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self { base: 0.996, cosine: true }
    }
}

impl EmaSchedule {
    pub fn tau(&self, step: u64, total_steps: u64) -> f64 {
        if !self.cosine || total_steps == 0 {
            return self.base;
        }
        let progress = (step.min(total_steps) as f64) / total_steps as f64;
        (1.0 - (1.0 - self.base) * ((PI * progress).cos() + 1.0) / 2.0).clamp(0.0, 1.0)
    }
}

/// Batch means of both directions' distances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetricBreakdown {
    pub forward: PrLossBreakdown,
    pub backward: PrLossBreakdown,
    pub total: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `L(pred(v1), proj(v2)) + L(pred(v2), proj(v1))` with the normalized
/// partitioned loss. Only online parameters receive gradient.
pub fn symmetric_pr_byol_loss(
    online: &OnlineNetwork,
    target: &TargetNetwork,
    view1: &Tensor,
    view2: &Tensor,
) -> Result<(Tensor, SymmetricBreakdown)> {
    let spec = &online.spec;
    let p1 = online.forward_online(view1, true)?;
    let p2 = online.forward_online(view2, true)?;
    let z1 = target.forward_target(view1, true)?;
    let z2 = target.forward_target(view2, true)?;
    let alpha = spec.partition.alpha;
    let d12 = pr_distances_normalized(&p1, &z2, spec.norm_eps, spec.distance)?;
    let d21 = pr_distances_normalized(&p2, &z1, spec.norm_eps, spec.distance)?;
    let loss = (d12.mean_total(alpha)? + d21.mean_total(alpha)?)?;
    let part = |d: &crate::partition::BatchDistances| -> Result<PrLossBreakdown> {
        Ok(PrLossBreakdown::new(scalar(&d.content.mean_all()?)?, scalar(&d.style.mean_all()?)?, alpha))
    };
    let breakdown = SymmetricBreakdown { forward: part(&d12)?, backward: part(&d21)?, total: scalar(&loss)? };
    Ok((loss, breakdown))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByolTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub ema: EmaSchedule,
    pub augmentation: AugmentationPolicy,
    pub seed: u64,
}

impl ByolTrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            optimizer: AdamConfig { weight_decay: 1e-6, ..AdamConfig::with_lr(1e-3) },
            ema: EmaSchedule::default(),
            augmentation: AugmentationPolicy::byol(32),
            seed,
        }
    }
}

pub struct ByolState {
    pub online: OnlineNetwork,
    pub target: TargetNetwork,
    pub optimizer: Adam,
    pub config: ByolTrainConfig,
    pub epoch: usize,
    /// Planned number of optimizer steps, used by the EMA ramp.
    pub total_steps: u64,
    pub loss_history: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

const BYOL_EPOCH_STREAM: u64 = 0xB0E;

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch.max(1)) as u64
}

impl ByolState {
    pub fn new(spec: ByolSpec, config: ByolTrainConfig, dataset_len: usize) -> Result<Self> {
        if config.batch_size < 2 {
            return Err(Error::Parameter("batch normalization needs batches of at least 2".into()));
        }
        config.augmentation.validate()?;
        if config.augmentation.output_size != spec.input_size {
            return Err(Error::Parameter(format!(
                "augmentation produces {} px views, network expects {}",
                config.augmentation.output_size, spec.input_size
            )));
        }
        let online = OnlineNetwork::new(spec, config.seed)?;
        let target = TargetNetwork::from_online(&online)?;
        let total_steps = steps_per_epoch(dataset_len, config.batch_size) * config.epochs as u64;
        Ok(Self {
            online,
            target,
            optimizer: Adam::new(config.optimizer),
            config,
            epoch: 0,
            total_steps,
            loss_history: Vec::new(),
            epoch_losses: Vec::new(),
        })
    }

    fn views(&self, data: &LabeledImages, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut a = Vec::with_capacity(indices.len());
        let mut b = Vec::with_capacity(indices.len());
        for &i in indices {
            let mut r = rng::derived(self.config.seed, &[BYOL_EPOCH_STREAM, self.epoch as u64, i as u64]);
            let (v1, v2) = augment_two_views(&data.images[i], &self.config.augmentation, &mut r)?;
            a.push(v1);
            b.push(v2);
        }
        let dtype = self.online.store.dtype();
        let ra: Vec<&RgbImage> = a.iter().collect();
        let rb: Vec<&RgbImage> = b.iter().collect();
        Ok((images_to_tensor(&ra, dtype)?, images_to_tensor(&rb, dtype)?))
    }

    /// One optimizer step on the online network followed by the EMA update.
    pub fn step(&mut self, view1: &Tensor, view2: &Tensor) -> Result<SymmetricBreakdown> {
        let (loss, breakdown) = symmetric_pr_byol_loss(&self.online, &self.target, view1, view2)?;
        let step = self.loss_history.len();
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged {
                step,
                diagnostics: format!(
                    "{breakdown:?}; view1 mean {:?}; view2 mean {:?}",
                    scalar(&view1.mean_all()?).ok(),
                    scalar(&view2.mean_all()?).ok()
                ),
            });
        }
        let grads = loss.backward()?;
        self.optimizer.step(&self.online.store, &grads)?;
        let tau = self.config.ema.tau(self.optimizer.steps(), self.total_steps);
        ema_update(&self.online, &self.target, tau)?;
        self.loss_history.push(breakdown.total);
        Ok(breakdown)
    }

    /// Trains for `epochs` more epochs. Shuffling and augmentation draw from
    /// generators derived from `(seed, epoch)`, so resuming reproduces an
    /// uninterrupted run.
    pub fn train(&mut self, data: &LabeledImages, epochs: usize) -> Result<()> {
        let bs = self.config.batch_size;
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut r = rng::derived(self.config.seed, &[BYOL_EPOCH_STREAM, self.epoch as u64]);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
            let mut sum = 0.0;
            let mut count = 0;
            // a trailing batch of one cannot be batch-normalized
            for chunk in order.chunks(bs).filter(|c| c.len() >= 2) {
                let (v1, v2) = self.views(data, chunk)?;
                sum += self.step(&v1, &v2)?.total;
                count += 1;
            }
            let mean = sum / count.max(1) as f64;
            self.epoch_losses.push(mean);
            self.epoch += 1;
            log::info!("byol epoch {} mean loss {mean:.4}", self.epoch);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let spec = &self.online.spec;
        let mut h = CheckpointHeader::new(ModelKind::Byol, serde_json::to_value(spec)?, spec.partition, self.online.store.dtype());
        h.epoch = self.epoch;
        h.seed = self.config.seed;
        h.loss_history = self.loss_history.clone();
        h.epoch_losses = self.epoch_losses.clone();
        h.optimizer_step = self.optimizer.steps();
        h.state = serde_json::json!({ "config": self.config, "total_steps": self.total_steps });
        let mut c = Checkpoint::new(h);
        c.insert_all("online", self.online.store.named_tensors());
        c.insert_all("target", self.target.store.named_tensors());
        c.insert_all("optimizer", self.optimizer.state_tensors());
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        if h.kind != ModelKind::Byol {
            return Err(Error::Structure(format!("checkpoint holds a {:?} model, not BYOL", h.kind)));
        }
        let spec: ByolSpec = serde_json::from_value(h.spec.clone())?;
        let config: ByolTrainConfig = serde_json::from_value(h.state["config"].clone())?;
        let total_steps = h.state["total_steps"].as_u64().ok_or_else(|| Error::Format("missing total_steps".into()))?;
        let online = OnlineNetwork::new(spec, config.seed)?;
        online.store.load(&ckpt.role("online"))?;
        let target = TargetNetwork::from_online(&online)?;
        target.store.load(&ckpt.role("target"))?;
        let optimizer = Adam::restore(config.optimizer, h.optimizer_step, &ckpt.role("optimizer"))?;
        Ok(Self {
            online,
            target,
            optimizer,
            config,
            epoch: h.epoch,
            total_steps,
            loss_history: h.loss_history.clone(),
            epoch_losses: h.epoch_losses.clone(),
        })
    }
}

pub fn train_byol(spec: ByolSpec, config: ByolTrainConfig, data: &LabeledImages) -> Result<ByolState> {
    let epochs = config.epochs;
    let mut state = ByolState::new(spec, config, data.len())?;
    state.train(data, epochs)?;
    Ok(state)
}

/// Frozen evaluation-mode representations of un-augmented images.
pub struct ByolFeatures {
    pub backbone: Vec<Vec<f64>>,
    pub prediction: Vec<Vec<f64>>,
    pub spec: PartitionSpec,
}

impl ByolFeatures {
    pub fn content(&self) -> Vec<Vec<f64>> {
        self.prediction.iter().map(|r| r[..self.spec.content_dim].to_vec()).collect()
    }

    pub fn style(&self) -> Vec<Vec<f64>> {
        self.prediction.iter().map(|r| r[self.spec.content_dim..].to_vec()).collect()
    }
}

/// Runs the online network in evaluation mode over `data`, resized to the
/// network's input size with a full-image crop.
pub fn extract_features(online: &OnlineNetwork, data: &LabeledImages, batch: usize) -> Result<ByolFeatures> {
    let policy = AugmentationPolicy::identity(online.spec.input_size);
    let mut backbone = Vec::with_capacity(data.len());
    let mut prediction = Vec::with_capacity(data.len());
    let mut r = rng::seeded(0);
    for chunk in data.images.chunks(batch.max(1)) {
        let views: Vec<RgbImage> =
            chunk.iter().map(|img| crate::data::augment::augment_view(img, &policy, 0, &mut r)).collect::<Result<_>>()?;
        let x = images_to_tensor(&views.iter().collect::<Vec<_>>(), online.store.dtype())?;
        let out = online.forward(&x, false)?;
        backbone.extend(out.features.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        prediction.extend(out.prediction.values().to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(ByolFeatures { backbone, prediction, spec: online.spec.partition })
}

/// Per-dimension standard deviation of unit-normalized rows.
pub fn normalized_dimension_std(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = rows.first().map(|r| r.len()).ok_or_else(|| Error::Dimension("no rows".into()))?;
    let n = rows.len() as f64;
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                Ok(r.iter().map(|v| v / norm).collect())
            } else {
                Err(Error::Degenerate("zero-norm embedding".into()))
            }
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; d];
    for r in &unit {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in &unit {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    Ok(var.into_iter().map(f64::sqrt).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes::synthetic_shapes;

    fn tiny() -> ByolSpec {
        ByolSpec {
            backbone: BackboneSpec { stem: Stem::Small, widths: vec![4, 8], blocks: vec![1, 1] },
            input_size: 8,
            output_dim: 8,
            hidden_multiplier: 2,
            partition: PartitionSpec::new(6, 2, 0.5).unwrap(),
            distance: NormalizedDistance::Euclidean,
            norm_eps: 1e-12,
            precision: Precision::F64,
        }
    }

    fn views(n: usize, seed: u64) -> Tensor {
        let imgs = synthetic_shapes(n, 8, seed);
        images_to_tensor(&imgs.iter().collect::<Vec<_>>(), DType::F64).unwrap()
    }

    #[test]
    fn presets_split_as_documented() {
        let d = ByolSpec::desk();
        assert_eq!((d.partition.content_dim, d.partition.style_dim), (48, 16));
        let p = ByolSpec::resnet18();
        assert_eq!((p.partition.content_dim, p.partition.style_dim, p.output_dim), (192, 64, 256));
        assert_eq!(PartitionSpec::proportional(64, 3, 1, 1.0).unwrap().content_dim, 48);
    }

    #[test]
    fn resnet18_preset_output_width() {
        let mut spec = ByolSpec::resnet18();
        spec.input_size = 32;
        spec.hidden_multiplier = 1;
        let net = OnlineNetwork::new(spec, 0).unwrap();
        let imgs = synthetic_shapes(2, 32, 0);
        let x = images_to_tensor(&imgs.iter().collect::<Vec<_>>(), DType::F32).unwrap();
        let p = net.forward_online(&x, true).unwrap();
        assert_eq!(p.values().dims(), &[2, 256]);
        assert_eq!(p.content().unwrap().dims(), &[2, 192]);
    }

    #[test]
    fn shapes_and_determinism() {
        let online = OnlineNetwork::new(tiny(), 1).unwrap();
        let target = TargetNetwork::from_online(&online).unwrap();
        let x = views(4, 1);
        let a = online.forward_online(&x, false).unwrap().values().to_vec2::<f64>().unwrap();
        let b = online.forward_online(&x, false).unwrap().values().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
        assert_eq!(target.forward_target(&x, false).unwrap().values().dims(), &[4, 8]);
        let bad = Tensor::zeros((1, 3, 9, 8), DType::F64, &candle_core::Device::Cpu).unwrap();
        assert!(matches!(online.forward_online(&bad, false), Err(Error::Dimension(_))));
    }

    #[test]
    fn target_receives_no_gradient() {
        let online = OnlineNetwork::new(tiny(), 2).unwrap();
        let target = TargetNetwork::from_online(&online).unwrap();
        let (loss, _) = symmetric_pr_byol_loss(&online, &target, &views(4, 2), &views(4, 3)).unwrap();
        let grads = loss.backward().unwrap();
        for (_, v) in target.store().trainable() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
        assert!(online.store().trainable().any(|(_, v)| grads.get(v.as_tensor()).is_some()));
    }

    #[test]
    fn symmetric_loss_gradient_matches_finite_differences() {
        let spec = ByolSpec { backbone: BackboneSpec { stem: Stem::Strided, ..tiny().backbone }, ..tiny() };
        let online = OnlineNetwork::new(spec, 5).unwrap();
        let target = TargetNetwork::from_online(&OnlineNetwork::new(online.spec().clone(), 6).unwrap()).unwrap();
        let (v1, v2) = (views(4, 7), views(4, 8));
        let eval = || symmetric_pr_byol_loss(&online, &target, &v1, &v2).unwrap().1.total;
        let (loss, _) = symmetric_pr_byol_loss(&online, &target, &v1, &v2).unwrap();
        let grads = loss.backward().unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (name, var) in online.store().trainable() {
            let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let shape = var.as_tensor().dims().to_vec();
            let set = |v: Vec<f64>| var.set(&Tensor::from_vec(v, shape.as_slice(), &candle_core::Device::Cpu).unwrap()).unwrap();
            for i in 0..base.len() {
                let mut v = base.clone();
                v[i] += h;
                set(v.clone());
                let up = eval();
                v[i] = base[i] - h;
                set(v);
                let down = eval();
                let numeric = (up - down) / (2.0 * h);
                let e = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-4);
                assert!(e < 1e-4, "{name}[{i}]: analytic {} numeric {numeric}", analytic[i]);
                worst = worst.max(e);
            }
            set(base);
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn ema_extremes_and_arithmetic() {
        let online = OnlineNetwork::new(tiny(), 3).unwrap();
        let other = OnlineNetwork::new(tiny(), 4).unwrap();
        let target = TargetNetwork::from_online(&other).unwrap();
        let before = target.store().fingerprint().unwrap();
        ema_update(&online, &target, 1.0).unwrap();
        assert_eq!(target.store().fingerprint().unwrap(), before);
        ema_update(&online, &target, 0.0).unwrap();
        for (name, v) in target.store().trainable() {
            let o = online.store().get(name).unwrap();
            assert_eq!(v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap(), o.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap());
        }
        // τ = 0: target projection equals the online projector path
        let x = views(3, 5);
        let t = target.forward_target(&x, false).unwrap().values().to_vec2::<f64>().unwrap();
        let o = online.forward(&x, false).unwrap().projection.to_vec2::<f64>().unwrap();
        assert_eq!(t, o);
        assert!(ema_update(&online, &target, 1.5).is_err());
    }

    #[test]
    fn ema_scalar_case() {
        let schedule = EmaSchedule { base: 0.99, cosine: false };
        let tau = schedule.tau(10, 100);
        assert!((tau * 1.0 + (1.0 - tau) * 0.0 - 0.99).abs() < 1e-15);
        let ramp = EmaSchedule { base: 0.996, cosine: true };
        assert!((ramp.tau(0, 100) - 0.996).abs() < 1e-15);
        assert!((ramp.tau(100, 100) - 1.0).abs() < 1e-15);
        for k in 0..=100 {
            let t = ramp.tau(k, 100);
            assert!((0.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn loss_bounds_and_one_step_contract() {
        let spec = tiny();
        let alpha = spec.partition.alpha;
        let data = LabeledImages::new(synthetic_shapes(8, 8, 6));
        let config = ByolTrainConfig {
            epochs: 1,
            batch_size: 4,
            optimizer: AdamConfig::with_lr(1e-2),
            ema: EmaSchedule { base: 0.9, cosine: false },
            augmentation: AugmentationPolicy::byol(8),
            seed: 1,
        };
        let mut state = ByolState::new(spec, config, data.len()).unwrap();
        let (v1, v2) = state.views(&data, &[0, 1, 2, 3]).unwrap();
        let online_before = state.online.store().fingerprint().unwrap();
        let target_before: Vec<(String, Vec<f64>)> = state
            .target
            .store()
            .trainable()
            .map(|(k, v)| (k.clone(), v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()))
            .collect();
        let b = state.step(&v1, &v2).unwrap();
        assert!(b.total >= -4.0 * alpha - 1e-12 && b.total <= 4.0 + 1e-12);
        assert_ne!(state.online.store().fingerprint().unwrap(), online_before);
        // EMA convexity: each target value lies between its old value and the updated online value
        for ((name, old), (_, now)) in target_before.iter().zip(state.target.store().trainable()) {
            let now = now.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let online = state.online.store().get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for ((t, o), n) in old.iter().zip(&online).zip(&now) {
                let (lo, hi) = if t < o { (t, o) } else { (o, t) };
                assert!(*n >= lo - 1e-12 && *n <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_resume() {
        let data = LabeledImages::new(synthetic_shapes(6, 8, 7));
        let config = ByolTrainConfig {
            epochs: 2,
            batch_size: 3,
            optimizer: AdamConfig::with_lr(1e-3),
            ema: EmaSchedule::default(),
            augmentation: AugmentationPolicy::byol(8),
            seed: 2,
        };
        let full = train_byol(tiny(), config.clone(), &data).unwrap();
        let mut half = ByolState::new(tiny(), config, data.len()).unwrap();
        half.train(&data, 1).unwrap();
        let mut resumed = ByolState::from_checkpoint(&half.to_checkpoint().unwrap()).unwrap();
        resumed.train(&data, 1).unwrap();
        assert_eq!(resumed.online.store().fingerprint().unwrap(), full.online.store().fingerprint().unwrap());
        assert_eq!(resumed.target.store().fingerprint().unwrap(), full.target.store().fingerprint().unwrap());
        assert_eq!(resumed.loss_history, full.loss_history);
    }

    #[test]
    fn normalized_std_detects_collapse() {
        let collapsed = vec![vec![1.0, 2.0, 3.0]; 10];
        assert!(normalized_dimension_std(&collapsed).unwrap().iter().all(|&s| s < 1e-12));
        let spread: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64, -(i as f64)]).collect();
        assert!(normalized_dimension_std(&spread).unwrap()[1] > 0.01);
    }
}
