use rayon::prelude::*;

use super::{forward, EncoderConfig, ParamSet};
use crate::autodiff::Tensor;
use crate::error::{CastError, Result};

/// Softmax linear classifier over standardized frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `[classes, dim]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub train_accuracy: f32,
    /// Set when the training labels cover a single class.
    pub degenerate: bool,
}

impl LinearProbe {
    pub fn logits(&self, feature: &[f32]) -> Vec<f32> {
        let z: Vec<f32> = feature
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect();
        (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + row.iter().zip(&z).map(|(w, x)| w * x).sum::<f32>()
            })
            .collect()
    }

    pub fn predict(&self, feature: &[f32]) -> usize {
        let logits = self.logits(feature);
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[usize]) -> f32 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &l)| self.predict(f) == l)
            .count();
        hits as f32 / features.len() as f32
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        Ok(vec![
            ("probe.weight".into(), Tensor::new(&[self.classes, self.dim], self.weights.clone())?),
            ("probe.bias".into(), Tensor::new(&[self.classes], self.bias.clone())?),
            ("probe.mean".into(), Tensor::new(&[self.dim], self.mean.clone())?),
            ("probe.std".into(), Tensor::new(&[self.dim], self.std.clone())?),
        ])
    }

    pub fn from_tensors(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CastError::InvalidArgument(format!("probe file lacks `{name}`")))
        };
        let w = find("probe.weight")?;
        if w.rank() != 2 {
            return Err(CastError::shape("probe", "probe.weight must be a matrix"));
        }
        Ok(LinearProbe {
            classes: w.shape()[0],
            dim: w.shape()[1],
            weights: w.to_vec(),
            bias: find("probe.bias")?.to_vec(),
            mean: find("probe.mean")?.to_vec(),
            std: find("probe.std")?.to_vec(),
            train_accuracy: f32::NAN,
            degenerate: false,
        })
    }
}

/// Pooled last-stage features of each image; the encoder is only read.
pub fn extract_features(
    config: &EncoderConfig,
    params: &ParamSet,
    images: &[Tensor],
) -> Result<Vec<Vec<f32>>> {
    let frozen = params.detached();
    images
        .par_iter()
        .map(|img| forward(config, &frozen, img).map(|o| o.pooled.to_vec()))
        .collect()
}

/// Full-batch softmax regression with heavy-ball momentum.
pub fn train_probe(
    features: &[Vec<f32>],
    labels: &[usize],
    classes: usize,
    epochs: usize,
) -> Result<LinearProbe> {
    if features.is_empty() {
        return Err(CastError::EmptyDataset);
    }
    if features.len() != labels.len() {
        return Err(CastError::InvalidArgument(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CastError::InvalidArgument(format!("label {bad} outside {classes} classes")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(CastError::shape("probe", "features have differing lengths"));
    }
    let n = features.len() as f64;

    let mut mean = vec![0.0f64; dim];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v as f64 / n;
        }
    }
    let mut std = vec![0.0f64; dim];
    for f in features {
        for ((s, &v), m) in std.iter_mut().zip(f).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(mean.iter().zip(&std)).map(|(&v, (m, s))| (v as f64 - m) / s).collect())
        .collect();

    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    let degenerate = distinct < 2;
    if degenerate {
        log::warn!("linear probe trained on a single class; accuracy is trivially 1");
    }

    let lr = 0.5;
    let beta = 0.9;
    let l2 = 1e-4;
    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    let mut vw = vec![0.0f64; classes * dim];
    let mut vb = vec![0.0f64; classes];
    for _ in 0..epochs.max(1) {
        let mut gw = vec![0.0f64; classes * dim];
        let mut gb = vec![0.0f64; classes];
        for (x, &y) in z.iter().zip(labels) {
            let logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + w[c * dim..(c + 1) * dim].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..classes {
                let p = exps[c] / total - if c == y { 1.0 } else { 0.0 };
                gb[c] += p / n;
                for (g, v) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *g += p * v / n;
                }
            }
        }
        for i in 0..w.len() {
            vw[i] = beta * vw[i] + gw[i] + l2 * w[i];
            w[i] -= lr * vw[i];
        }
        for c in 0..classes {
            vb[c] = beta * vb[c] + gb[c];
            b[c] -= lr * vb[c];
        }
    }

    let mut probe = LinearProbe {
        classes,
        dim,
        weights: w.into_iter().map(|v| v as f32).collect(),
        bias: b.into_iter().map(|v| v as f32).collect(),
        mean: mean.into_iter().map(|v| v as f32).collect(),
        std: std.into_iter().map(|v| v as f32).collect(),
        train_accuracy: 0.0,
        degenerate,
    };
    probe.train_accuracy = probe.accuracy(features, labels);
    Ok(probe)
}

/// Trains a probe on frozen encoder features of labeled images.
pub fn linear_probe_train(
    config: &EncoderConfig,
    params: &ParamSet,
    images: &[Tensor],
    labels: &[usize],
    classes: usize,
    epochs: usize,
) -> Result<LinearProbe> {
    if images.is_empty() {
        return Err(CastError::EmptyDataset);
    }
    let features = extract_features(config, params, images)?;
    train_probe(&features, labels, classes, epochs)
}
