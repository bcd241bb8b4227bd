//! Same-class positive sampling for the VAE objective.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Uniformly picks another index with the anchor's label.
pub fn sample_positive(labels: &[u8], anchor_index: usize, rng: &mut SeededRng) -> Result<usize> {
    let Some(&label) = labels.get(anchor_index) else {
        return Err(Error::Sampling(format!("anchor {anchor_index} out of range for {} labels", labels.len())));
    };
    let candidates: Vec<usize> =
        labels.iter().enumerate().filter(|&(i, &l)| l == label && i != anchor_index).map(|(i, _)| i).collect();
    if candidates.is_empty() {
        return Err(Error::Sampling(format!("class {label} has a single sample; no positive exists")));
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// Precomputed per-class index lists for repeated positive draws.
#[derive(Clone, Debug)]
pub struct PositiveSampler {
    by_class: Vec<Vec<usize>>,
    position: Vec<usize>,
    labels: Vec<u8>,
}

impl PositiveSampler {
    pub fn new(labels: &[u8]) -> Result<Self> {
        let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut by_class = vec![Vec::new(); classes];
        let mut position = vec![0; labels.len()];
        for (i, &l) in labels.iter().enumerate() {
            position[i] = by_class[l as usize].len();
            by_class[l as usize].push(i);
        }
        if let Some((c, _)) = by_class.iter().enumerate().find(|(_, v)| v.len() == 1) {
            return Err(Error::Sampling(format!("class {c} has a single sample; no positive exists")));
        }
        Ok(Self { by_class, position, labels: labels.to_vec() })
    }

    /// Same distribution as [`sample_positive`] in O(1).
    pub fn sample(&self, anchor: usize, rng: &mut SeededRng) -> usize {
        let class = &self.by_class[self.labels[anchor] as usize];
        let k = rng.random_range(0..class.len() - 1);
        if k == self.position[anchor] {
            class[class.len() - 1]
        } else {
            class[k]
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// A shuffled epoch of anchors, each with a fresh positive, in batches.
    pub fn epoch(&self, batch_size: usize, rng: &mut SeededRng) -> Vec<PairBatch> {
        let mut order: Vec<usize> = (0..self.labels.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .map(|anchors| {
                let positives: Vec<usize> = anchors.iter().map(|&a| self.sample(a, rng)).collect();
                PairBatch {
                    anchors: anchors.to_vec(),
                    positives,
                    labels: anchors.iter().map(|&a| self.labels[a]).collect(),
                }
            })
            .collect()
    }
}

/// Anchor/positive index pairs into a dataset; `anchors[i]` and
/// `positives[i]` share `labels[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub labels: Vec<u8>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}
