//! Gaussian noise injection into one part of the representation, and the
//! accuracy sweep over noise intensities.

use serde::{Deserialize, Serialize};

use super::probe::LinearProbe;
use crate::error::{Error, Result};
use crate::partition::{Part, PartitionSpec, PartitionedEmbedding};
use crate::rng::{self, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEvalConfig {
    pub part: Part,
    pub t: f64,
    /// Independent draws per sample; accuracy is averaged over them.
    pub draws: usize,
    pub seed: u64,
}

/// Adds `t · n`, `n ~ N(0, I)`, to the targeted part. The other part is
/// copied unchanged.
pub fn perturb(mu: &PartitionedEmbedding, part: Part, t: f64, rng: &mut SeededRng) -> PartitionedEmbedding {
    let mut out = mu.clone();
    if t == 0.0 {
        return out;
    }
    let target = out.part_mut(part);
    let noise = rng::normal_vec(rng, target.len());
    for (v, n) in target.iter_mut().zip(noise) {
        *v += t * n;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCell {
    /// `clean`, `content` or `style`.
    pub part: String,
    pub t: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseTable {
    pub clean: f64,
    pub cells: Vec<NoiseCell>,
}

impl NoiseTable {
    pub fn get(&self, part: Part, t: f64) -> Option<f64> {
        self.cells.iter().find(|c| c.part == part.as_str() && c.t == t).map(|c| c.accuracy)
    }
}

const NOISE_STREAM: u64 = 0x7015E;

fn cell_seed(seed: u64, part: Part, t: f64, draw: usize) -> u64 {
    let p = match part {
        Part::Content => 0,
        Part::Style => 1,
    };
    rng::derive_seed(seed, &[NOISE_STREAM, p, t.to_bits(), draw as u64])
}

/// Accuracy of `probe` on `features` with noise on each part at each `t`.
/// Every `(part, t, draw)` cell uses its own seed, so cells are independent
/// of evaluation order. `t = 0` reproduces the clean accuracy exactly.
pub fn noise_sweep(
    features: &[Vec<f64>],
    labels: &[u8],
    spec: &PartitionSpec,
    probe: &LinearProbe,
    ts: &[f64],
    draws: usize,
    seed: u64,
) -> Result<NoiseTable> {
    if draws == 0 {
        return Err(Error::Parameter("noise sweep needs at least one draw".into()));
    }
    if let Some(t) = ts.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::Parameter(format!("noise intensity {t} must be finite and non-negative")));
    }
    let embeddings: Vec<PartitionedEmbedding> =
        features.iter().map(|f| PartitionedEmbedding::new(f.clone(), *spec)).collect::<Result<_>>()?;
    let clean = probe.accuracy(features, labels)?;
    let mut cells = vec![NoiseCell { part: "clean".into(), t: 0.0, accuracy: clean }];
    for part in [Part::Content, Part::Style] {
        for &t in ts {
            let mut acc = 0.0;
            for d in 0..draws {
                let mut r = rng::seeded(cell_seed(seed, part, t, d));
                let noisy: Vec<Vec<f64>> = embeddings.iter().map(|e| perturb(e, part, t, &mut r).into_values()).collect();
                acc += probe.accuracy(&noisy, labels)?;
            }
            cells.push(NoiseCell { part: part.as_str().into(), t, accuracy: acc / draws as f64 });
        }
    }
    Ok(NoiseTable { clean, cells })
}
