//! Detector scoring contract, reference detectors, training, and checkpoints.

pub mod cnn;
pub mod probe;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Manifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::image::ImageArray;
use crate::json;
use crate::transforms::{sample_transform, TransformDistribution};

pub use cnn::{Cnn, CnnArch};
pub use probe::{EmbeddingRow, LinearProbe, ProbeConfig};

pub(crate) use probe::{sigmoid, softplus};

/// Training below this train-split accuracy is reported as non-convergence.
pub const MIN_TRAIN_ACCURACY: f64 = 0.8;

pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.f64";

/// A pixel-space detector producing the probability that an image is synthetic.
pub trait Detector: Sync {
    fn identifier(&self) -> &str;

    /// Required square input side, if fixed.
    fn input_size(&self) -> Option<usize>;

    fn differentiable(&self) -> bool;

    fn logit(&self, x: &ImageArray) -> Result<f64>;

    /// Logit and `dlogit/dx`.
    fn logit_and_grad(&self, _x: &ImageArray) -> Result<(f64, ImageArray)> {
        Err(Error::NonDifferentiableDetector(self.identifier().to_string()))
    }

    fn probability(&self, x: &ImageArray) -> Result<f64> {
        Ok(sigmoid(self.logit(x)?))
    }
}

/// One probability per image, computed in parallel; order preserved.
pub fn score<D: Detector + ?Sized>(d: &D, batch: &[ImageArray]) -> Result<Vec<f64>> {
    batch.par_iter().map(|x| d.probability(x)).collect()
}

/// A trained CNN with its checkpoint identity.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnDetector {
    pub identifier: String,
    pub net: Cnn,
}

impl Detector for CnnDetector {
    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn input_size(&self) -> Option<usize> {
        Some(self.net.arch().input_size)
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn logit(&self, x: &ImageArray) -> Result<f64> {
        self.net.logit(x)
    }

    fn logit_and_grad(&self, x: &ImageArray) -> Result<(f64, ImageArray)> {
        self.net.logit_and_input_grad(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: CnnArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probability of passing a training image through a random deployment
    /// transform before each step.
    pub augment_probability: f64,
    pub augment_transforms: TransformDistribution,
    /// Targets become `s/2` and `1 − s/2`; bounds the fitted logit scale.
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: CnnArch::default(),
            epochs: 10,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
            augment_probability: 0.0,
            augment_transforms: TransformDistribution::default(),
            label_smoothing: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPath {
    pub image_path: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    /// Test-split scores at the end of training; a reloaded checkpoint must
    /// reproduce them.
    pub validation: Vec<ScoredPath>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Soft cross-entropy target: `smoothing / 2` for real, `1 − smoothing / 2`
/// for synthetic.
fn label_target(label: Label, smoothing: f64) -> f64 {
    if label.is_synthetic() {
        1.0 - smoothing / 2.0
    } else {
        smoothing / 2.0
    }
}

/// BCE with logits: `softplus(z) − y·z`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

pub fn load_split(m: &Manifest, split: Split) -> Result<Vec<(&SampleRecord, ImageArray)>> {
    let recs: Vec<&SampleRecord> = m.split(split).collect();
    recs.par_iter()
        .map(|r| Ok((*r, m.load_record(r)?)))
        .collect()
}

pub struct CnnFit {
    pub detector: CnnDetector,
    pub metrics: TrainMetrics,
    pub config_hash: String,
}

/// Seeded Adam training of the desk-scale CNN on the manifest's train split.
/// Bit-deterministic for a fixed seed: per-sample gradients are computed in
/// parallel but summed in a fixed order.
pub fn train_cnn_detector(m: &Manifest, cfg: &TrainConfig) -> Result<CnnFit> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(Error::InvalidConfig(format!(
            "label_smoothing {} must be in [0, 1)",
            cfg.label_smoothing
        )));
    }
    cfg.augment_transforms.validate()?;
    let train = load_split(m, Split::Train)?;
    for label in [Label::Real, Label::Synthetic] {
        if !train.iter().any(|(r, _)| r.label == label) {
            return Err(Error::InsufficientData(format!("train split has no {label} images")));
        }
    }
    let arch = CnnArch {
        input_size: m.image_size,
        ..cfg.arch.clone()
    };
    let config_hash = json::config_hash(cfg)?;
    let mut net = Cnn::new(arch, cfg.seed)?;
    let mut adam = Adam::new(net.n_params());
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let aug = cfg.augment_transforms.with_seed(cfg.seed ^ 0x5eed_a116);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let base = step * cfg.batch_size as u64;
            let results: Vec<Result<(f64, Vec<f64>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let (rec, img) = &train[i];
                    let draw_index = base + j as u64;
                    let input = if augment_this(cfg, &aug, draw_index) {
                        sample_transform(&aug, draw_index).apply(img)?
                    } else {
                        img.clone()
                    };
                    let y = label_target(rec.label, cfg.label_smoothing);
                    let mut g = vec![0.0; net.n_params()];
                    let z = net.accumulate_param_grad(&input, |z| sigmoid(z) - y, &mut g)?;
                    Ok((bce_with_logit(z, y), g))
                })
                .collect();
            let mut grad = vec![0.0; net.n_params()];
            for r in results {
                let (loss, g) = r?;
                total += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(net.params_mut(), &grad, cfg.learning_rate);
            step += 1;
        }
        epoch_loss.push(total / train.len() as f64);
    }

    let detector = CnnDetector {
        identifier: format!("cnn-{}", &config_hash[..12]),
        net,
    };
    let images: Vec<ImageArray> = train.iter().map(|(_, x)| x.clone()).collect();
    let scores = score(&detector, &images)?;
    let correct = train
        .iter()
        .zip(&scores)
        .filter(|((r, _), &s)| (s >= 0.5) == r.label.is_synthetic())
        .count();
    let train_accuracy = correct as f64 / train.len() as f64;
    if train_accuracy < MIN_TRAIN_ACCURACY {
        return Err(Error::NonConvergence {
            accuracy: train_accuracy,
            loss_trace: epoch_loss,
        });
    }

    let test = load_split(m, Split::Test)?;
    let test_images: Vec<ImageArray> = test.iter().map(|(_, x)| x.clone()).collect();
    let validation = test
        .iter()
        .zip(score(&detector, &test_images)?)
        .map(|((r, _), s)| ScoredPath {
            image_path: r.image_path.clone(),
            score: s,
        })
        .collect();

    Ok(CnnFit {
        detector,
        metrics: TrainMetrics {
            epoch_loss,
            train_accuracy,
            validation,
        },
        config_hash,
    })
}

fn augment_this(cfg: &TrainConfig, aug: &TransformDistribution, draw_index: u64) -> bool {
    if cfg.augment_probability <= 0.0 {
        return false;
    }
    // Independent coin per draw, from a stream disjoint from the transform's.
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(aug.rng_seed ^ 0xc01f);
    rng.set_stream(draw_index);
    rng.random::<f64>() < cfg.augment_probability
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Cnn { input_size: usize, channels: Vec<usize> },
    LinearProbe { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub identifier: String,
    pub architecture: Architecture,
    pub config_hash: String,
    pub train_metrics: TrainMetrics,
    pub params_file: String,
    pub dtype: String,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedDetector {
    Cnn(CnnDetector),
    Probe { identifier: String, probe: LinearProbe },
}

fn write_params(dir: &Path, params: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    Ok(())
}

/// Checkpoint directory: `meta.json` plus `params.f64`, the flat parameter
/// vector as little-endian `f64`.
pub fn save_cnn_checkpoint(fit: &CnnFit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let arch = fit.detector.net.arch();
    let meta = CheckpointMeta {
        identifier: fit.detector.identifier.clone(),
        architecture: Architecture::Cnn {
            input_size: arch.input_size,
            channels: arch.channels.clone(),
        },
        config_hash: fit.config_hash.clone(),
        train_metrics: fit.metrics.clone(),
        params_file: PARAMS_FILE.into(),
        dtype: "f64le".into(),
        n_params: fit.detector.net.n_params(),
    };
    json::write_sorted(&dir.join(META_FILE), &meta)?;
    write_params(dir, fit.detector.net.params())
}

/// Probe parameters are stored as `[bias, w_0, …, w_{d−1}]`.
pub fn save_probe_checkpoint(
    probe: &LinearProbe,
    identifier: &str,
    config_hash: &str,
    metrics: &TrainMetrics,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        identifier: identifier.into(),
        architecture: Architecture::LinearProbe { dim: probe.dim() },
        config_hash: config_hash.into(),
        train_metrics: metrics.clone(),
        params_file: PARAMS_FILE.into(),
        dtype: "f64le".into(),
        n_params: probe.dim() + 1,
    };
    json::write_sorted(&dir.join(META_FILE), &meta)?;
    let mut params = vec![probe.bias];
    params.extend_from_slice(&probe.weights);
    write_params(dir, &params)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, LoadedDetector)> {
    let meta: CheckpointMeta = json::read(&dir.join(META_FILE))?;
    let bytes = fs::read(dir.join(&meta.params_file))?;
    if meta.dtype != "f64le" || bytes.len() != 8 * meta.n_params {
        return Err(Error::InvalidConfig(format!(
            "checkpoint {}: {} bytes for {} {} parameters",
            dir.display(),
            bytes.len(),
            meta.n_params,
            meta.dtype
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let det = match &meta.architecture {
        Architecture::Cnn { input_size, channels } => LoadedDetector::Cnn(CnnDetector {
            identifier: meta.identifier.clone(),
            net: Cnn::from_params(
                CnnArch {
                    input_size: *input_size,
                    channels: channels.clone(),
                },
                params,
            )?,
        }),
        Architecture::LinearProbe { dim } => {
            if params.len() != dim + 1 {
                return Err(Error::InvalidConfig(format!("probe dim {dim} vs {} params", params.len())));
            }
            LoadedDetector::Probe {
                identifier: meta.identifier.clone(),
                probe: LinearProbe {
                    bias: params[0],
                    weights: params[1..].to_vec(),
                },
            }
        }
    };
    Ok((meta, det))
}

pub fn load_cnn_checkpoint(dir: &Path) -> Result<CnnDetector> {
    match load_checkpoint(dir)?.1 {
        LoadedDetector::Cnn(d) => Ok(d),
        LoadedDetector::Probe { identifier, .. } => Err(Error::NonDifferentiableDetector(identifier)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(f64);

    impl Detector for Fixed {
        fn identifier(&self) -> &str {
            "fixed"
        }
        fn input_size(&self) -> Option<usize> {
            None
        }
        fn differentiable(&self) -> bool {
            false
        }
        fn logit(&self, _x: &ImageArray) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn zero_logit_scores_one_half() {
        let imgs = vec![ImageArray::zeros(8, 8); 3];
        assert_eq!(score(&Fixed(0.0), &imgs).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn non_differentiable_detector_refuses_gradients() {
        assert!(matches!(
            Fixed(1.0).logit_and_grad(&ImageArray::zeros(8, 8)),
            Err(Error::NonDifferentiableDetector(_))
        ));
    }

    #[test]
    fn extreme_logits_stay_in_unit_interval() {
        let imgs = vec![ImageArray::zeros(8, 8)];
        assert_eq!(score(&Fixed(1e4), &imgs).unwrap()[0], 1.0);
        assert_eq!(score(&Fixed(-1e4), &imgs).unwrap()[0], 0.0);
    }

    #[test]
    fn bce_matches_definition() {
        let z: f64 = 0.7;
        let p = 1.0 / (1.0 + (-z).exp());
        assert!((bce_with_logit(z, 1.0) + p.ln()).abs() < 1e-12);
        assert!((bce_with_logit(z, 0.0) + (1.0 - p).ln()).abs() < 1e-12);
    }
}
