//! Logistic head over frozen, precomputed embeddings.
//!
//! The probe is differentiable with respect to embeddings only. Without a
//! differentiable embedding function it can score clean data but cannot
//! drive a pixel-space attack.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Manifest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub image_path: String,
    pub embedding: Vec<f64>,
}

/// Reads a JSON-lines embeddings file (blank lines ignored).
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Rows must match manifest records one-to-one, in order, by `image_path`.
pub fn align_embeddings<'a>(m: &Manifest, rows: &'a [EmbeddingRow]) -> Result<Vec<&'a [f64]>> {
    if rows.len() != m.records.len() {
        return Err(Error::Alignment {
            index: rows.len().min(m.records.len()),
            expected: format!("{} rows", m.records.len()),
            found: format!("{} rows", rows.len()),
        });
    }
    let dim = rows.first().map_or(0, |r| r.embedding.len());
    rows.iter()
        .zip(&m.records)
        .enumerate()
        .map(|(i, (row, rec))| {
            if row.image_path != rec.image_path {
                return Err(Error::Alignment {
                    index: i,
                    expected: rec.image_path.clone(),
                    found: row.image_path.clone(),
                });
            }
            if row.embedding.len() != dim || dim == 0 {
                return Err(Error::Alignment {
                    index: i,
                    expected: format!("embedding of dimension {dim}"),
                    found: format!("dimension {}", row.embedding.len()),
                });
            }
            Ok(row.embedding.as_slice())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, e: &[f64]) -> f64 {
        self.weights.iter().zip(e).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn score_embedding(&self, e: &[f64]) -> Result<f64> {
        if e.len() != self.dim() {
            return Err(Error::InvalidConfig(format!(
                "embedding dimension {} != probe dimension {}",
                e.len(),
                self.dim()
            )));
        }
        Ok(sigmoid(self.logit(e)))
    }
}

/// Full-batch gradient descent on mean binary cross-entropy.
/// Returns the probe and the per-iteration loss trace.
pub fn fit_logistic(xs: &[&[f64]], ys: &[f64], cfg: &ProbeConfig) -> (LinearProbe, Vec<f64>) {
    let dim = xs.first().map_or(0, |x| x.len());
    let n = xs.len() as f64;
    let mut probe = LinearProbe {
        weights: vec![0.0; dim],
        bias: 0.0,
    };
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z = probe.logit(x);
            let p = sigmoid(z);
            loss += softplus(z) - y * z;
            let r = p - y;
            gb += r;
            for (g, v) in gw.iter_mut().zip(x.iter()) {
                *g += r * v;
            }
        }
        trace.push(loss / n);
        for (w, g) in probe.weights.iter_mut().zip(&gw) {
            *w -= cfg.learning_rate * (g / n + cfg.l2 * *w);
        }
        probe.bias -= cfg.learning_rate * gb / n;
    }
    (probe, trace)
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub struct ProbeFit {
    pub probe: LinearProbe,
    pub loss_trace: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains on the manifest's train split using aligned embeddings.
pub fn train_linear_probe(m: &Manifest, rows: &[EmbeddingRow], cfg: &ProbeConfig) -> Result<ProbeFit> {
    let aligned = align_embeddings(m, rows)?;
    let (xs, ys): (Vec<&[f64]>, Vec<f64>) = m
        .records
        .iter()
        .zip(&aligned)
        .filter(|(r, _)| r.split == Split::Train)
        .map(|(r, e)| (*e, if r.label == Label::Synthetic { 1.0 } else { 0.0 }))
        .unzip();
    let positives = ys.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == ys.len() {
        return Err(Error::InsufficientData("train split needs both labels".into()));
    }
    let (probe, loss_trace) = fit_logistic(&xs, &ys, cfg);
    let correct = xs
        .iter()
        .zip(&ys)
        .filter(|(x, &y)| (sigmoid(probe.logit(x)) >= 0.5) == (y == 1.0))
        .count();
    let train_accuracy = correct as f64 / xs.len() as f64;
    if train_accuracy < super::MIN_TRAIN_ACCURACY {
        return Err(Error::NonConvergence {
            accuracy: train_accuracy,
            loss_trace,
        });
    }
    Ok(ProbeFit {
        probe,
        loss_trace,
        train_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn sigmoid_symmetry() {
        for z in [-30.0, -1.0, 0.0, 2.5] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn separable_points_are_fit() {
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![if i < 10 { -1.0 } else { 1.0 }, 0.3]).collect();
        let xs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let ys: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        let (probe, trace) = fit_logistic(&xs, &ys, &ProbeConfig::default());
        assert!(trace.last().unwrap() < &trace[0]);
        assert!(probe.logit(&[1.0, 0.3]) > 0.0 && probe.logit(&[-1.0, 0.3]) < 0.0);
    }
}
