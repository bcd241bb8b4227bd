//! Linear probe: multinomial logistic regression on frozen features,
//! trained full-batch with Adam on standardized inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub max_epochs: usize,
    pub lr: f64,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    #[serde(default)]
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { max_epochs: 500, lr: 0.05, tolerance: 1e-5, l2: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `classes × dim`, acting on standardized features.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Standardization fitted on the training features.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub epochs: usize,
    pub final_grad_norm: f64,
    pub config: ProbeConfig,
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let dim = features.first().map(|f| f.len()).ok_or_else(|| Error::Training("no features to fit".into()))?;
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::Dimension(format!("feature of length {} among length-{dim} features", bad.len())));
    }
    Ok(dim)
}

fn softmax_into(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.dim() {
            return Err(Error::Dimension(format!("probe expects {} features, got {}", self.dim(), feature.len())));
        }
        let z = self.standardize(feature);
        Ok(self.weight.iter().zip(&self.bias).map(|(w, b)| b + w.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>()).collect())
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, feature: &[f64]) -> Result<u8> {
        let l = self.logits(feature)?;
        let mut best = 0;
        for (i, v) in l.iter().enumerate() {
            if *v > l[best] {
                best = i;
            }
        }
        Ok(best as u8)
    }

    /// Percentage of correctly classified rows.
    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::Dimension(format!("{} features for {} labels", features.len(), labels.len())));
        }
        let mut correct = 0usize;
        for (f, &l) in features.iter().zip(labels) {
            correct += (self.predict(f)? == l) as usize;
        }
        Ok(100.0 * correct as f64 / labels.len() as f64)
    }
}

/// Fits a probe on frozen `features`. Weights start at zero, so the result
/// is a deterministic function of the inputs and config.
pub fn fit_probe(features: &[Vec<f64>], labels: &[u8], config: &ProbeConfig) -> Result<LinearProbe> {
    let dim = check_features(features)?;
    if features.len() != labels.len() {
        return Err(Error::Dimension(format!("{} features for {} labels", features.len(), labels.len())));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Training("probe needs at least two classes".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, x), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let mut probe = LinearProbe {
        weight: vec![vec![0.0; dim]; classes],
        bias: vec![0.0; classes],
        mean,
        scale,
        epochs: 0,
        final_grad_norm: f64::INFINITY,
        config: config.clone(),
    };
    let z: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();

    let width = dim + 1;
    let count = classes * width;
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m1 = vec![0.0; count];
    let mut m2 = vec![0.0; count];
    let mut grad = vec![0.0; count];
    let mut p = vec![0.0; classes];
    for epoch in 1..=config.max_epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in z.iter().zip(labels) {
            for (k, pk) in p.iter_mut().enumerate() {
                *pk = probe.bias[k] + probe.weight[k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_into(&mut p);
            for k in 0..classes {
                let e = (p[k] - f64::from(u8::from(k == y as usize))) / n;
                let row = &mut grad[k * width..(k + 1) * width];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += e * xi;
                }
                row[dim] += e;
            }
        }
        if config.l2 > 0.0 {
            for k in 0..classes {
                for j in 0..dim {
                    grad[k * width + j] += config.l2 * probe.weight[k][j];
                }
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        probe.final_grad_norm = norm;
        if norm < config.tolerance {
            break;
        }
        probe.epochs = epoch;
        let (c1, c2) = (1.0 - f64::powi(b1, epoch as i32), 1.0 - f64::powi(b2, epoch as i32));
        for i in 0..count {
            m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
            let step = config.lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
            let (k, j) = (i / width, i % width);
            if j == dim {
                probe.bias[k] -= step;
            } else {
                probe.weight[k][j] -= step;
            }
        }
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Perceptron convergence certifies linear separability of the toy set.
    fn perceptron_separates(x: &[Vec<f64>], y: &[u8]) -> bool {
        let mut w = vec![0.0; x[0].len() + 1];
        for _ in 0..1000 {
            let mut mistakes = 0;
            for (f, &l) in x.iter().zip(y) {
                let s = if l == 1 { 1.0 } else { -1.0 };
                let a: f64 = w[0] + f.iter().zip(&w[1..]).map(|(p, q)| p * q).sum::<f64>();
                if s * a <= 0.0 {
                    mistakes += 1;
                    w[0] += s;
                    for (wi, fi) in w[1..].iter_mut().zip(f) {
                        *wi += s * fi;
                    }
                }
            }
            if mistakes == 0 {
                return true;
            }
        }
        false
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let mut r = rng::seeded(3);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let c = (i % 2) as u8;
            let center = if c == 0 { -2.0 } else { 2.0 };
            x.push(vec![center + r.random_range(-1.0..1.0), r.random_range(-3.0..3.0)]);
            y.push(c);
        }
        assert!(perceptron_separates(&x, &y));
        let p = fit_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(p.accuracy(&x, &y).unwrap(), 100.0);
    }

    #[test]
    fn constant_features_give_majority_rate() {
        let x = vec![vec![1.0, 2.0]; 10];
        let y = [0, 0, 0, 1, 1, 2, 0, 0, 2, 0];
        let p = fit_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(p.accuracy(&x, &y).unwrap(), 60.0);
    }

    #[test]
    fn single_class_is_training_error() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(fit_probe(&x, &[4, 4], &ProbeConfig::default()), Err(Error::Training(_))));
    }

    #[test]
    fn converged_probe_stops_early() {
        // overlapping classes have a finite optimum
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64]).collect();
        let y: Vec<u8> = (0..40).map(|i| ((i * 3) % 2) as u8).collect();
        let cfg = ProbeConfig { max_epochs: 20_000, lr: 0.05, tolerance: 1e-5, ..ProbeConfig::default() };
        let p = fit_probe(&x, &y, &cfg).unwrap();
        assert!(p.final_grad_norm < 1e-5);
        assert!(p.epochs < 20_000);
    }
}
