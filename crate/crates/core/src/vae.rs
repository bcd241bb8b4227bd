//! Convolutional VAE whose posterior mean is a partitioned embedding.
//!
//! Training minimizes `ELBO(x_a) + L_pr(mu(x_a), mu(x_p))` over same-class
//! pairs, where `L_pr` is the raw Euclidean partitioned loss on the mean
//! vectors.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader, ModelKind};
use crate::data::{LabeledImages, PositiveSampler};
use crate::error::{Error, Result};
use crate::nn::layers::{sigmoid, softplus};
use crate::nn::ops::ConvGeometry;
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Conv2d, ConvTranspose2d, Linear, ParamStore};
use crate::partition::{pr_distances_euclidean, EmbeddingBatch, PartitionSpec, PartitionedEmbedding};
use crate::rng::{self, SeededRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Pixel likelihood of the reconstruction term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// Bernoulli cross-entropy on `[0, 1]` pixels, summed over pixels.
    #[default]
    Bernoulli,
    /// Squared error summed over pixels.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvVaeSpec {
    pub input_channels: usize,
    pub input_size: usize,
    /// Encoder channel widths; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub partition: PartitionSpec,
    #[serde(default)]
    pub likelihood: Likelihood,
    /// Also add `ELBO(x_p)` to the objective.
    #[serde(default)]
    pub symmetric_elbo: bool,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for ConvVaeSpec {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: 28,
            channels: vec![32, 64, 128],
            kernel: 3,
            stride: 2,
            padding: 1,
            partition: PartitionSpec { content_dim: 7, style_dim: 3, alpha: 1.0 },
            likelihood: Likelihood::Bernoulli,
            symmetric_elbo: false,
            precision: Precision::F32,
        }
    }
}

impl ConvVaeSpec {
    pub fn latent_dim(&self) -> usize {
        self.partition.total_dim()
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry { kernel: self.kernel, stride: self.stride, padding: self.padding }
    }

    /// Spatial side after each encoder layer, starting with the input.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let g = self.geometry();
        let mut sizes = vec![self.input_size];
        for _ in &self.channels {
            let last = *sizes.last().unwrap();
            sizes.push(g.output_size(last));
        }
        sizes
    }

    /// Output padding of each decoder layer so the decoder retraces the
    /// encoder's spatial sizes in reverse.
    pub fn output_paddings(&self) -> Result<Vec<usize>> {
        let g = self.geometry();
        let sizes = self.spatial_sizes();
        (1..sizes.len())
            .rev()
            .map(|i| {
                let base = g.transposed_output_size(sizes[i], 0);
                let target = sizes[i - 1];
                if target < base || target - base >= g.stride.max(1) {
                    return Err(Error::Parameter(format!(
                        "decoder cannot map {} back to {target} with this geometry",
                        sizes[i]
                    )));
                }
                Ok(target - base)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.channels.is_empty() || self.channels.contains(&0) || self.input_channels == 0 {
            return Err(Error::Parameter("encoder channel widths must be positive and non-empty".into()));
        }
        if self.kernel == 0 || self.stride == 0 || self.input_size + 2 * self.padding < self.kernel {
            return Err(Error::Parameter("invalid convolution geometry".into()));
        }
        if self.spatial_sizes().contains(&0) {
            return Err(Error::Parameter("encoder reduces the input to nothing".into()));
        }
        self.output_paddings()?;
        Ok(())
    }
}

/// Posterior of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: PartitionedEmbedding,
    pub logvar: Vec<f64>,
}

impl LatentDistribution {
    pub fn new(mu: PartitionedEmbedding, logvar: Vec<f64>) -> Result<Self> {
        if logvar.len() != mu.values().len() {
            return Err(Error::Dimension(format!("mu has {} dims, logvar {}", mu.values().len(), logvar.len())));
        }
        Ok(Self { mu, logvar })
    }
}

/// Posteriors of a batch: `mu` and `logvar` are `[n, latent]`.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub mu: EmbeddingBatch,
    pub logvar: Tensor,
}

impl LatentBatch {
    pub fn to_distributions(&self) -> Result<Vec<LatentDistribution>> {
        let mus = self.mu.to_embeddings()?;
        let lvs = self.logvar.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        mus.into_iter().zip(lvs).map(|(m, l)| LatentDistribution::new(m, l)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub pr: f64,
    pub total: f64,
    pub content_distance: f64,
    pub style_distance: f64,
}

/// `z = mu + exp(logvar / 2) · n`, `n ~ N(0, I)`.
pub fn reparameterize(dist: &LatentDistribution, rng: &mut SeededRng) -> Vec<f64> {
    let n = rng::normal_vec(rng, dist.logvar.len());
    dist.mu.values().iter().zip(&dist.logvar).zip(n).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect()
}

/// Batched reparameterization with explicit noise; differentiable in `mu`
/// and `logvar`.
pub fn reparameterize_with(latent: &LatentBatch, noise: &Tensor) -> Result<Tensor> {
    Ok((latent.mu.values() + ((&latent.logvar * 0.5)?.exp()? * noise)?)?)
}

pub fn standard_normal(shape: &[usize], dtype: DType, rng: &mut SeededRng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Ok(Tensor::from_vec(rng::normal_vec(rng, n), shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `KL(N(mu, diag e^logvar) ‖ N(0, I))` for one posterior.
pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

/// Batch mean of the closed-form KL, as a scalar tensor.
pub fn kl_term(latent: &LatentBatch) -> Result<Tensor> {
    let mu = latent.mu.values();
    let lv = &latent.logvar;
    let per = ((mu.sqr()? + lv.exp()?)? - (lv + 1.0)?)?.sum(D::Minus1)?;
    Ok((per.mean_all()? * 0.5)?)
}

fn per_sample_sum(t: &Tensor) -> Result<Tensor> {
    Ok(t.flatten_from(1)?.sum(1)?)
}

/// Reconstruction and KL terms from decoder probabilities in `[0, 1]`.
/// Both are summed per sample and averaged over the batch.
pub fn elbo_terms(x: &Tensor, reconstruction: &Tensor, latent: &LatentBatch) -> Result<(Tensor, Tensor)> {
    if x.dims() != reconstruction.dims() {
        return Err(Error::Dimension(format!("input {:?} vs reconstruction {:?}", x.dims(), reconstruction.dims())));
    }
    let flat = reconstruction.flatten_all()?.to_dtype(DType::F64)?;
    let (lo, hi) = (flat.min(0)?.to_scalar::<f64>()?, flat.max(0)?.to_scalar::<f64>()?);
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(Error::Domain(format!("reconstruction values span [{lo}, {hi}], outside [0, 1]")));
    }
    let tiny = if x.dtype() == DType::F32 { 1e-7 } else { 1e-15 };
    let r = reconstruction.clamp(tiny, 1.0 - tiny)?;
    let ce = ((x * r.log()?)? + ((x.neg()? + 1.0)? * (r.neg()? + 1.0)?.log()?)?)?.neg()?;
    Ok((per_sample_sum(&ce)?.mean_all()?, kl_term(latent)?))
}

fn reconstruction_from_logits(x: &Tensor, logits: &Tensor, likelihood: Likelihood) -> Result<Tensor> {
    let per_pixel = match likelihood {
        // -[x log σ(l) + (1-x) log(1-σ(l))] = softplus(l) - x·l
        Likelihood::Bernoulli => (softplus(logits)? - (x * logits)?)?,
        Likelihood::Mse => (sigmoid(logits)? - x)?.sqr()?,
    };
    Ok(per_sample_sum(&per_pixel)?.mean_all()?)
}

pub struct ConvVae {
    spec: ConvVaeSpec,
    store: ParamStore,
    encoder: Vec<Conv2d>,
    mu_head: Linear,
    logvar_head: Linear,
    decoder_input: Linear,
    decoder: Vec<ConvTranspose2d>,
}

const INIT_STREAM: u64 = 0x1417;

impl ConvVae {
    /// Fresh model; parameters depend only on `(spec, seed)`.
    pub fn new(spec: ConvVaeSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::derived(seed, &[INIT_STREAM]);
        let mut store = ParamStore::new(spec.precision.dtype());
        let g = spec.geometry();
        let mut encoder = Vec::new();
        let mut prev = spec.input_channels;
        for (i, &c) in spec.channels.iter().enumerate() {
            encoder.push(Conv2d::new(&mut store, &format!("encoder.{i}"), prev, c, g, true, &mut rng)?);
            prev = c;
        }
        let side = *spec.spatial_sizes().last().unwrap();
        let flat = prev * side * side;
        let latent = spec.latent_dim();
        let mu_head = Linear::new(&mut store, "mu", flat, latent, &mut rng)?;
        let logvar_head = Linear::new(&mut store, "logvar", flat, latent, &mut rng)?;
        let decoder_input = Linear::new(&mut store, "decoder.input", latent, flat, &mut rng)?;
        let mut decoder = Vec::new();
        let outs: Vec<usize> =
            spec.channels.iter().rev().skip(1).copied().chain(std::iter::once(spec.input_channels)).collect();
        for (i, (out, op)) in outs.into_iter().zip(spec.output_paddings()?).enumerate() {
            decoder.push(ConvTranspose2d::new(&mut store, &format!("decoder.{i}"), prev, out, g, op, &mut rng)?);
            prev = out;
        }
        Ok(Self { spec, store, encoder, mu_head, logvar_head, decoder_input, decoder })
    }

    pub fn spec(&self) -> &ConvVaeSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn partition(&self) -> PartitionSpec {
        self.spec.partition
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.spec.partition.alpha = alpha;
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let s = &self.spec;
        if dims.len() != 4 || dims[1] != s.input_channels || dims[2] != s.input_size || dims[3] != s.input_size {
            return Err(Error::Dimension(format!(
                "input {dims:?} does not match [n, {}, {}, {}]",
                s.input_channels, s.input_size, s.input_size
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<LatentBatch> {
        self.check_input(x)?;
        let mut h = x.to_dtype(self.dtype())?;
        for conv in &self.encoder {
            h = conv.forward(&h)?.relu()?;
        }
        let h = h.flatten_from(1)?;
        let mu = self.mu_head.forward(&h)?;
        let logvar = self.logvar_head.forward(&h)?;
        Ok(LatentBatch { mu: EmbeddingBatch::new(mu, self.spec.partition)?, logvar })
    }

    /// Decoder output before the sigmoid.
    pub fn decode_logits(&self, z: &Tensor) -> Result<Tensor> {
        let (n, d) = z.dims2()?;
        if d != self.spec.latent_dim() {
            return Err(Error::Dimension(format!("latent width {d}, model expects {}", self.spec.latent_dim())));
        }
        let side = self.spec.spatial_sizes()[self.spec.channels.len()];
        let top = *self.spec.channels.last().unwrap();
        let mut h = self.decoder_input.forward(&z.to_dtype(self.dtype())?)?.relu()?.reshape((n, top, side, side))?;
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            h = layer.forward(&h)?;
            if i != last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Pixel probabilities in `[0, 1]`, same shape as the input.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        sigmoid(&self.decode_logits(z)?)
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(self.encode(x)?.mu.values())
    }

    fn elbo_parts(&self, x: &Tensor, latent: &LatentBatch, noise: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = reparameterize_with(latent, noise)?;
        let logits = self.decode_logits(&z)?;
        let recon = reconstruction_from_logits(&x.to_dtype(self.dtype())?, &logits, self.spec.likelihood)?;
        Ok((recon, kl_term(latent)?))
    }

    /// The training objective with explicit reparameterization noise
    /// (`noise_a`, and `noise_p` when the ELBO is symmetrized). Returns the
    /// differentiable total and its breakdown.
    pub fn objective_with_noise(
        &self,
        x_a: &Tensor,
        x_p: &Tensor,
        noise_a: &Tensor,
        noise_p: Option<&Tensor>,
    ) -> Result<(Tensor, VaeLossBreakdown)> {
        let la = self.encode(x_a)?;
        let lp = self.encode(x_p)?;
        let (mut recon, mut kl) = self.elbo_parts(x_a, &la, noise_a)?;
        if self.spec.symmetric_elbo {
            let np = noise_p.ok_or_else(|| Error::Parameter("symmetric ELBO needs positive-side noise".into()))?;
            let (r, k) = self.elbo_parts(x_p, &lp, np)?;
            recon = (recon + r)?;
            kl = (kl + k)?;
        }
        let d = pr_distances_euclidean(&la.mu, &lp.mu)?;
        let alpha = self.spec.partition.alpha;
        let pr = d.mean_total(alpha)?;
        let total = ((&recon + &kl)? + &pr)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let breakdown = VaeLossBreakdown {
            reconstruction: scalar(&recon)?,
            kl: scalar(&kl)?,
            pr: scalar(&pr)?,
            total: scalar(&total)?,
            content_distance: scalar(&d.content.mean_all()?)?,
            style_distance: scalar(&d.style.mean_all()?)?,
        };
        Ok((total, breakdown))
    }

    /// Samples reparameterization noise from `rng` and evaluates the objective.
    pub fn pr_vae_loss(&self, x_a: &Tensor, x_p: &Tensor, rng: &mut SeededRng) -> Result<(Tensor, VaeLossBreakdown)> {
        let shape = [x_a.dims()[0], self.spec.latent_dim()];
        let na = standard_normal(&shape, self.dtype(), rng)?;
        let np = if self.spec.symmetric_elbo { Some(standard_normal(&shape, self.dtype(), rng)?) } else { None };
        self.objective_with_noise(x_a, x_p, &na, np.as_ref())
    }

    /// Posterior means of every image, in batches, as `[n, latent]` rows.
    pub fn encode_means(&self, data: &LabeledImages, batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let x = data.tensor(chunk, self.dtype())?;
            out.extend(self.encode(&x)?.mu.values().to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    /// Decodes latent rows in batches into images of the model's input shape.
    pub fn decode_rows(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.spec.latent_dim();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Dimension(format!("latent row of length {}, expected {d}", bad.len())));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let z = Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?;
        self.decode(&z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 128, optimizer: AdamConfig::with_lr(1e-3), grad_clip: None, seed: 0 }
    }
}

/// A model together with everything needed to continue training it.
pub struct VaeState {
    pub model: ConvVae,
    pub optimizer: Adam,
    pub config: VaeTrainConfig,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub last_breakdown: Option<VaeLossBreakdown>,
}

const EPOCH_STREAM: u64 = 0xE90C;

fn finite_or_diverged(step: usize, b: &VaeLossBreakdown, stats: impl FnOnce() -> String) -> Result<()> {
    if [b.reconstruction, b.kl, b.pr, b.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step, diagnostics: format!("{b:?}; {}", stats()) })
    }
}

fn tensor_summary(name: &str, t: &Tensor) -> String {
    let f = || -> Result<String> {
        let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
        Ok(format!("{name}: n={} non-finite={} min={lo:.4e} max={hi:.4e} mean={mean:.4e}", v.len(), v.len() - finite.len()))
    };
    f().unwrap_or_else(|e| format!("{name}: <{e}>"))
}

impl VaeState {
    pub fn new(spec: ConvVaeSpec, config: VaeTrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        let model = ConvVae::new(spec, config.seed)?;
        Ok(Self {
            model,
            optimizer: Adam::new(config.optimizer),
            config,
            epoch: 0,
            loss_history: Vec::new(),
            epoch_losses: Vec::new(),
            last_breakdown: None,
        })
    }

    /// Runs `epochs` more epochs. Epoch `e` draws its shuffling, positives
    /// and noise from a generator derived from `(seed, e)`, so stopping and
    /// resuming reproduces an uninterrupted run.
    pub fn train(&mut self, data: &LabeledImages, epochs: usize) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let sampler = PositiveSampler::new(&data.labels())?;
        let all: Vec<usize> = (0..data.len()).collect();
        let images = data.tensor(&all, self.model.dtype())?;
        for _ in 0..epochs {
            let mut rng = rng::derived(self.config.seed, &[EPOCH_STREAM, self.epoch as u64]);
            let batches = sampler.epoch(self.config.batch_size, &mut rng);
            let mut sum = 0.0;
            for b in &batches {
                let ia = Tensor::from_vec(b.anchors.iter().map(|&i| i as u32).collect::<Vec<_>>(), b.len(), &Device::Cpu)?;
                let ip = Tensor::from_vec(b.positives.iter().map(|&i| i as u32).collect::<Vec<_>>(), b.len(), &Device::Cpu)?;
                let xa = images.index_select(&ia, 0)?;
                let xp = images.index_select(&ip, 0)?;
                let (loss, breakdown) = self.model.pr_vae_loss(&xa, &xp, &mut rng)?;
                let step = self.loss_history.len();
                finite_or_diverged(step, &breakdown, || {
                    let l = self.model.encode(&xa);
                    match l {
                        Ok(l) => format!(
                            "{}; {}; {}",
                            tensor_summary("x_a", &xa),
                            tensor_summary("mu_a", l.mu.values()),
                            tensor_summary("logvar_a", &l.logvar)
                        ),
                        Err(e) => format!("encode failed: {e}"),
                    }
                })?;
                let mut grads = loss.backward()?;
                if let Some(max) = self.config.grad_clip {
                    clip_grad_norm(self.model.store(), &mut grads, max)?;
                }
                self.optimizer.step(self.model.store(), &grads)?;
                self.loss_history.push(breakdown.total);
                self.last_breakdown = Some(breakdown);
                sum += breakdown.total;
            }
            let mean = sum / batches.len().max(1) as f64;
            self.epoch_losses.push(mean);
            self.epoch += 1;
            log::info!("vae epoch {} mean loss {mean:.4}", self.epoch);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let spec = &self.model.spec;
        let mut h = CheckpointHeader::new(ModelKind::Vae, serde_json::to_value(spec)?, spec.partition, self.model.dtype());
        h.epoch = self.epoch;
        h.seed = self.config.seed;
        h.loss_history = self.loss_history.clone();
        h.epoch_losses = self.epoch_losses.clone();
        h.optimizer_step = self.optimizer.steps();
        h.state = serde_json::to_value(&self.config)?;
        let mut c = Checkpoint::new(h);
        c.insert_all("model", self.model.store.named_tensors());
        c.insert_all("optimizer", self.optimizer.state_tensors());
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        if h.kind != ModelKind::Vae {
            return Err(Error::Structure(format!("checkpoint holds a {:?} model, not a VAE", h.kind)));
        }
        let spec: ConvVaeSpec = serde_json::from_value(h.spec.clone())?;
        let config: VaeTrainConfig = serde_json::from_value(h.state.clone())?;
        let model = ConvVae::new(spec, config.seed)?;
        model.store.load(&ckpt.role("model"))?;
        let optimizer = Adam::restore(config.optimizer, h.optimizer_step, &ckpt.role("optimizer"))?;
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: h.epoch,
            loss_history: h.loss_history.clone(),
            epoch_losses: h.epoch_losses.clone(),
            last_breakdown: None,
        })
    }
}

/// Builds a model from `spec` and trains it for `config.epochs` epochs.
pub fn train_vae(spec: ConvVaeSpec, config: VaeTrainConfig, data: &LabeledImages) -> Result<VaeState> {
    let epochs = config.epochs;
    let mut state = VaeState::new(spec, config)?;
    state.train(data, epochs)?;
    Ok(state)
}

/// Loads only the model part of a VAE checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<ConvVae> {
    Ok(VaeState::from_checkpoint(ckpt)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RgbImage;

    fn toy_spec() -> ConvVaeSpec {
        ConvVaeSpec {
            input_size: 8,
            channels: vec![4, 6, 8],
            partition: PartitionSpec::new(3, 1, 0.7).unwrap(),
            precision: Precision::F64,
            ..ConvVaeSpec::default()
        }
    }

    fn random_images(n: usize, side: usize, seed: u64) -> LabeledImages {
        let mut r = rng::seeded(seed);
        LabeledImages::new(
            (0..n)
                .map(|i| {
                    let px = (0..side * side * 3).map(|_| rand::Rng::random::<u8>(&mut r)).collect();
                    RgbImage::new(side, side, px, (i % 2) as u8).unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn default_geometry() {
        let s = ConvVaeSpec::default();
        assert_eq!(s.spatial_sizes(), vec![28, 14, 7, 4]);
        assert_eq!(s.output_paddings().unwrap(), vec![0, 1, 1]);
        assert_eq!(s.latent_dim(), 10);
    }

    #[test]
    fn shapes_roundtrip_and_determinism() {
        let m = ConvVae::new(ConvVaeSpec::default(), 1).unwrap();
        let data = random_images(3, 28, 2);
        let x = data.tensor(&[0, 1, 2], DType::F32).unwrap();
        let l = m.encode(&x).unwrap();
        assert_eq!(l.mu.values().dims(), &[3, 10]);
        assert_eq!(l.logvar.dims(), &[3, 10]);
        let r = m.reconstruct(&x).unwrap();
        assert_eq!(r.dims(), x.dims());
        let x2 = data.tensor(&[0, 0], DType::F32).unwrap();
        let rows = m.encode(&x2).unwrap().mu.values().to_vec2::<f32>().unwrap();
        assert_eq!(rows[0], rows[1]);
        assert!(matches!(m.encode(&Tensor::zeros((1, 3, 27, 28), DType::F32, &Device::Cpu).unwrap()), Err(Error::Dimension(_))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_closed_form(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!((kl_closed_form(&[1.0, 0.0, 0.0], &[0.0; 3]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn elbo_domain_check() {
        let spec = PartitionSpec::new(1, 1, 1.0).unwrap();
        let latent = LatentBatch {
            mu: EmbeddingBatch::new(Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap(), spec).unwrap(),
            logvar: Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap(),
        };
        let x = Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap();
        let bad = Tensor::new(&[[0.5f64, 1.2]], &Device::Cpu).unwrap();
        assert!(matches!(elbo_terms(&x, &bad, &latent), Err(Error::Domain(_))));
        let ok = Tensor::new(&[[0.5f64, 0.5]], &Device::Cpu).unwrap();
        let (r, k) = elbo_terms(&x, &ok, &latent).unwrap();
        assert!((r.to_scalar::<f64>().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(k.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn zero_variance_reparameterization_is_mean() {
        let spec = PartitionSpec::new(2, 1, 1.0).unwrap();
        let d = LatentDistribution::new(PartitionedEmbedding::new(vec![1.0, -2.0, 0.5], spec).unwrap(), vec![-1e4; 3]).unwrap();
        assert_eq!(reparameterize(&d, &mut rng::seeded(0)), vec![1.0, -2.0, 0.5]);
        let a = reparameterize(&LatentDistribution { logvar: vec![0.0; 3], ..d.clone() }, &mut rng::seeded(4));
        let b = reparameterize(&LatentDistribution { logvar: vec![0.0; 3], ..d }, &mut rng::seeded(4));
        assert_eq!(a, b);
    }

    #[test]
    fn coincident_pair_and_alpha_zero() {
        let mut spec = toy_spec();
        let data = random_images(2, 8, 5);
        let xa = data.tensor(&[0], DType::F64).unwrap();
        let xp = data.tensor(&[1], DType::F64).unwrap();
        let noise = standard_normal(&[1, 4], DType::F64, &mut rng::seeded(0)).unwrap();
        let m = ConvVae::new(spec.clone(), 3).unwrap();
        let (_, same) = m.objective_with_noise(&xa, &xa, &noise, None).unwrap();
        assert_eq!(same.pr, 0.0);
        assert!((same.total - (same.reconstruction + same.kl)).abs() < 1e-12);

        spec.partition.alpha = 0.0;
        let m = ConvVae::new(spec, 3).unwrap();
        let (_, b) = m.objective_with_noise(&xa, &xp, &noise, None).unwrap();
        let mu = |x: &Tensor| m.encode(x).unwrap().mu.values().to_vec2::<f64>().unwrap().remove(0);
        let (ma, mp) = (mu(&xa), mu(&xp));
        let content: f64 = ma[..3].iter().zip(&mp[..3]).map(|(a, p)| (a - p) * (a - p)).sum::<f64>().sqrt();
        assert!((b.total - (b.reconstruction + b.kl + content)).abs() < 1e-10);
    }

    #[test]
    fn one_epoch_history_and_noop_resume() {
        let data = random_images(64, 8, 6);
        let config = VaeTrainConfig { epochs: 1, batch_size: 20, seed: 9, ..VaeTrainConfig::default() };
        let state = train_vae(toy_spec(), config, &data).unwrap();
        assert_eq!(state.loss_history.len(), 4);
        assert_eq!(state.epoch, 1);
        let ckpt = state.to_checkpoint().unwrap();
        let mut resumed = VaeState::from_checkpoint(&ckpt).unwrap();
        resumed.train(&data, 0).unwrap();
        assert_eq!(resumed.model.store().fingerprint().unwrap(), state.model.store().fingerprint().unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = random_images(30, 8, 7);
        let config = VaeTrainConfig { epochs: 2, batch_size: 8, seed: 1, ..VaeTrainConfig::default() };
        let full = train_vae(toy_spec(), config.clone(), &data).unwrap();
        let mut half = train_vae(toy_spec(), VaeTrainConfig { epochs: 1, ..config }, &data).unwrap();
        let mut resumed = VaeState::from_checkpoint(&half.to_checkpoint().unwrap()).unwrap();
        resumed.train(&data, 1).unwrap();
        half.train(&data, 1).unwrap();
        assert_eq!(resumed.model.store().fingerprint().unwrap(), full.model.store().fingerprint().unwrap());
        assert_eq!(half.loss_history, full.loss_history);
    }
}
