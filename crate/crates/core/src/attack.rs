//! Band-constrained projected-gradient attacks with expectation over
//! transformation (EOT), and scoring of clean/attacked conditions.
//!
//! The objective is the expected binary cross-entropy toward the *real*
//! label over random deployment transforms:
//! `E_t[ softplus(logit(t(clamp(x + δ)))) ]`. Each step averages the gradient
//! over `eot_samples` fresh draws, takes a signed step of `step_size`, and
//! projects onto the ε-ball restricted to the band.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Manifest, SampleRecord, Split};
use crate::detector::{sigmoid, softplus, Detector};
use crate::error::{Error, Result};
use crate::image::ImageArray;
use crate::json;
use crate::metrics::{ScoreEntry, ScoreSet};
use crate::perturb::{
    apply_delta, build_band_mask, project, BandMask, BandSide, PerturbationArtifact, Regime,
    DEFAULT_BAND_FRACTION, DEFAULT_EPSILON,
};
use crate::timestamp;
use crate::transforms::{sample_transform, TransformDistribution, TransformDraw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniversalConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for UniversalConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// `None` means `epsilon / 8`.
    pub step_size: Option<f64>,
    pub iterations: usize,
    pub eot_samples: usize,
    pub band_side: BandSide,
    pub band_fraction: f64,
    pub target: Target,
    pub transform_dist: TransformDistribution,
    pub seed: u64,
    pub universal: UniversalConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            step_size: None,
            iterations: 100,
            eot_samples: 4,
            band_side: BandSide::Bottom,
            band_fraction: DEFAULT_BAND_FRACTION,
            target: Target::Real,
            transform_dist: TransformDistribution::default(),
            seed: 0,
            universal: UniversalConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 8.0)
    }

    /// ε = 0 (and with it a zero step) is accepted: the feasible set is {0}.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be finite and >= 0", self.epsilon));
        }
        let step = self.step();
        if !(step.is_finite() && (step > 0.0 || (step == 0.0 && self.epsilon == 0.0))) {
            return bad(format!("step_size {step} must be > 0"));
        }
        if self.iterations == 0 || self.eot_samples == 0 {
            return bad("iterations and eot_samples must be >= 1".into());
        }
        if self.universal.epochs == 0 || self.universal.batch_size == 0 {
            return bad("universal epochs and batch_size must be >= 1".into());
        }
        self.transform_dist.validate()
    }

    pub fn config_hash(&self) -> Result<String> {
        json::config_hash(self)
    }

    pub fn mask_for(&self, height: usize, width: usize) -> Result<BandMask> {
        build_band_mask(height, width, self.band_side, self.band_fraction)
    }

    /// Transform distribution used while optimizing.
    pub fn attack_transforms(&self) -> TransformDistribution {
        self.transform_dist.with_seed(stream_seed(self.seed, DrawStream::Attack))
    }
}

/// Which transform stream a set of draws comes from. Streams derived from
/// the same base seed never coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawStream {
    Attack,
    Evaluation,
}

const ATTACK_STREAM: u64 = 0xa77a_c000;
const EVAL_STREAM: u64 = 0xe7a1_0000;
const SHUFFLE_STREAM: u64 = 0x5bf1_e000;

pub fn stream_seed(seed: u64, stream: DrawStream) -> u64 {
    let tag = match stream {
        DrawStream::Attack => ATTACK_STREAM,
        DrawStream::Evaluation => EVAL_STREAM,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.random()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    /// Expected loss at the start of each step, averaged over that step's draws.
    pub loss: Vec<f64>,
    /// Mean probability of the target (real) class at the start of each step.
    pub target_probability: Vec<f64>,
    /// Running minimum of `loss`.
    pub best_loss: Vec<f64>,
}

impl AttackTrace {
    fn push(&mut self, loss: f64, target_probability: f64) {
        let best = self.best_loss.last().map_or(loss, |b| b.min(loss));
        self.loss.push(loss);
        self.target_probability.push(target_probability);
        self.best_loss.push(best);
    }

    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }
}

struct EotResult {
    loss: f64,
    target_probability: f64,
    grad: Vec<f64>,
}

/// Loss, real-class probability and `∂loss/∂δ` for one image under one draw.
fn draw_gradient<D: Detector + ?Sized>(
    x: &ImageArray,
    delta: &[f32],
    t: &TransformDraw,
    d: &D,
) -> Result<EotResult> {
    let adv = apply_delta(x, delta)?;
    let y = t.apply(&adv)?;
    let (z, dz_dy) = d.logit_and_grad(&y)?;
    // BCE toward label 0 (real): softplus(z), d/dz = sigmoid(z).
    let p_syn = sigmoid(z);
    let mut g = dz_dy;
    g.data_mut().iter_mut().for_each(|v| *v *= p_syn);
    let g = t.vjp(&adv, &g)?;
    let mut grad = g.into_vec();
    // Clamp in `apply_delta`: no gradient where x + δ left [0,1].
    for ((gv, &xv), &dv) in grad.iter_mut().zip(x.data()).zip(delta) {
        let v = xv + f64::from(dv);
        if !(0.0..=1.0).contains(&v) {
            *gv = 0.0;
        }
    }
    Ok(EotResult {
        loss: softplus(z),
        target_probability: 1.0 - p_syn,
        grad,
    })
}

/// Batch-mean of per-image EOT means. `slot_base` fixes the draw indices:
/// image `i` of the batch uses draws `(slot_base + i)·eot + j`.
fn batch_gradient<D: Detector + ?Sized>(
    images: &[&ImageArray],
    delta: &[f32],
    d: &D,
    dist: &TransformDistribution,
    eot: usize,
    slot_base: u64,
) -> Result<EotResult> {
    let jobs: Vec<(usize, u64)> = (0..images.len())
        .flat_map(|i| (0..eot).map(move |j| (i, ((slot_base + i as u64) * eot as u64) + j as u64)))
        .collect();
    let results: Vec<Result<EotResult>> = jobs
        .par_iter()
        .map(|&(i, idx)| draw_gradient(images[i], delta, &sample_transform(dist, idx), d))
        .collect();

    let n = delta.len();
    let mut total = EotResult {
        loss: 0.0,
        target_probability: 0.0,
        grad: vec![0.0; n],
    };
    let mut results = results.into_iter();
    for _ in images {
        let mut per = EotResult {
            loss: 0.0,
            target_probability: 0.0,
            grad: vec![0.0; n],
        };
        for _ in 0..eot {
            let r = results.next().expect("one result per job")?;
            per.loss += r.loss;
            per.target_probability += r.target_probability;
            per.grad.iter_mut().zip(&r.grad).for_each(|(a, b)| *a += b);
        }
        let k = eot as f64;
        total.loss += per.loss / k;
        total.target_probability += per.target_probability / k;
        total.grad.iter_mut().zip(&per.grad).for_each(|(a, b)| *a += b / k);
    }
    let b = images.len() as f64;
    total.loss /= b;
    total.target_probability /= b;
    total.grad.iter_mut().for_each(|g| *g /= b);
    Ok(total)
}

/// `project(δ − step·sign(g))`.
fn signed_step(delta: &[f32], grad: &[f64], step: f64, mask: &BandMask, epsilon: f64) -> Result<Vec<f32>> {
    let moved: Vec<f32> = delta
        .iter()
        .zip(grad)
        .map(|(&d, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (f64::from(d) - step * s) as f32
        })
        .collect();
    project(&moved, mask, epsilon)
}

fn check_detector<D: Detector + ?Sized>(d: &D, x: &ImageArray) -> Result<()> {
    if !d.differentiable() {
        return Err(Error::NonDifferentiableDetector(d.identifier().to_string()));
    }
    if let Some(n) = d.input_size() {
        if x.shape() != (3, n, n) {
            return Err(Error::ShapeMismatch {
                expected: (3, n, n),
                actual: x.shape(),
            });
        }
    }
    Ok(())
}

/// Optimizes a perturbation for a single image. δ starts at zero; the run is
/// deterministic given `cfg.seed`.
pub fn pgd_eot_per_image<D: Detector + ?Sized>(
    x: &ImageArray,
    image_id: &str,
    d: &D,
    cfg: &AttackConfig,
) -> Result<(PerturbationArtifact, AttackTrace)> {
    cfg.validate()?;
    check_detector(d, x)?;
    let mask = cfg.mask_for(x.height(), x.width())?;
    let dist = cfg.attack_transforms();
    let mut delta = vec![0.0f32; x.len()];
    let mut trace = AttackTrace::default();
    for k in 0..cfg.iterations {
        let r = batch_gradient(&[x], &delta, d, &dist, cfg.eot_samples, k as u64)?;
        trace.push(r.loss, r.target_probability);
        delta = signed_step(&delta, &r.grad, cfg.step(), &mask, cfg.epsilon)?;
    }
    let artifact = PerturbationArtifact {
        delta,
        mask,
        epsilon: cfg.epsilon,
        regime: Regime::PerImage,
        source_image_id: Some(image_id.to_string()),
        config_hash: cfg.config_hash()?,
        created: timestamp::reproducible_now(),
    };
    artifact.validate()?;
    Ok((artifact, trace))
}

/// Optimizes one perturbation shared by all `images`: seeded shuffles per
/// epoch, one signed step (and projection) per batch.
pub fn universal_train<D: Detector + ?Sized>(
    images: &[ImageArray],
    d: &D,
    cfg: &AttackConfig,
) -> Result<(PerturbationArtifact, AttackTrace)> {
    cfg.validate()?;
    let first = images
        .first()
        .ok_or_else(|| Error::InsufficientData("universal training needs images".into()))?;
    for x in images {
        first.check_shape(x)?;
        check_detector(d, x)?;
    }
    let mask = cfg.mask_for(first.height(), first.width())?;
    let dist = cfg.attack_transforms();
    let batch_size = cfg.universal.batch_size;
    let mut delta = vec![0.0f32; first.len()];
    let mut trace = AttackTrace::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step: u64 = 0;
    for epoch in 0..cfg.universal.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let refs: Vec<&ImageArray> = batch.iter().map(|&i| &images[i]).collect();
            let r = batch_gradient(&refs, &delta, d, &dist, cfg.eot_samples, step * batch_size as u64)?;
            trace.push(r.loss, r.target_probability);
            delta = signed_step(&delta, &r.grad, cfg.step(), &mask, cfg.epsilon)?;
            step += 1;
        }
    }
    let artifact = PerturbationArtifact {
        delta,
        mask,
        epsilon: cfg.epsilon,
        regime: Regime::Universal,
        source_image_id: None,
        config_hash: cfg.config_hash()?,
        created: timestamp::reproducible_now(),
    };
    artifact.validate()?;
    Ok((artifact, trace))
}

pub fn synthetic_records(m: &Manifest, split: Split) -> Vec<&SampleRecord> {
    m.split(split).filter(|r| r.label == Label::Synthetic).collect()
}

/// Per-image attacks on every synthetic test image, in manifest order.
/// Images are processed in parallel; results do not depend on thread count.
pub fn attack_test_split<D: Detector + ?Sized>(
    m: &Manifest,
    d: &D,
    cfg: &AttackConfig,
) -> Result<Vec<(PerturbationArtifact, AttackTrace)>> {
    synthetic_records(m, Split::Test)
        .par_iter()
        .map(|r| pgd_eot_per_image(&m.load_record(r)?, &r.image_path, d, cfg))
        .collect()
}

/// Universal perturbation trained on the synthetic train split.
pub fn universal_from_manifest<D: Detector + ?Sized>(
    m: &Manifest,
    d: &D,
    cfg: &AttackConfig,
) -> Result<(PerturbationArtifact, AttackTrace)> {
    let recs = synthetic_records(m, Split::Train);
    if recs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "universal training needs >= 2 synthetic train images, found {}",
            recs.len()
        )));
    }
    let images = recs
        .par_iter()
        .map(|r| m.load_record(r))
        .collect::<Result<Vec<_>>>()?;
    universal_train(&images, d, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    PerImage,
    Universal,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::PerImage => "per_image",
            Condition::Universal => "universal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Pristine,
    Deployment,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Pristine => "pristine",
            EvalMode::Deployment => "deployment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub transform_dist: TransformDistribution,
    pub n_draws: usize,
    /// Evaluation draws by default; `attack` re-uses the optimization stream
    /// (for measuring how well attacks transfer to unseen draws).
    pub draw_stream: DrawStream,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            transform_dist: TransformDistribution::default(),
            n_draws: 8,
            draw_stream: DrawStream::Evaluation,
        }
    }
}

impl EvalConfig {
    pub fn transforms(&self) -> TransformDistribution {
        self.transform_dist.with_seed(stream_seed(self.seed, self.draw_stream))
    }
}

pub enum Artifacts<'a> {
    None,
    PerImage(&'a HashMap<String, PerturbationArtifact>),
    Universal(&'a PerturbationArtifact),
}

/// Scores every test record under `condition`. Real images are never
/// perturbed. In deployment mode each sample's score is the mean probability
/// over `n_draws` transform draws; sample `i` uses draws `i·n_draws + j`.
pub fn evaluate_condition<D: Detector + ?Sized>(
    m: &Manifest,
    d: &D,
    condition: Condition,
    artifacts: Artifacts<'_>,
    mode: EvalMode,
    cfg: &EvalConfig,
) -> Result<ScoreSet> {
    if mode == EvalMode::Deployment {
        cfg.transform_dist.validate()?;
        if cfg.n_draws == 0 {
            return Err(Error::InvalidConfig("n_draws must be >= 1".into()));
        }
    }
    let dist = cfg.transforms();
    let records: Vec<(usize, &SampleRecord)> = m.split(Split::Test).enumerate().collect();
    let entries = records
        .par_iter()
        .map(|&(i, rec)| {
            let mut x = m.load_record(rec)?;
            if rec.label.is_synthetic() {
                let delta = match (condition, &artifacts) {
                    (Condition::Clean, _) => None,
                    (Condition::PerImage, Artifacts::PerImage(map)) => Some(
                        &map.get(&rec.image_path)
                            .ok_or_else(|| Error::MissingArtifact(rec.image_path.clone()))?
                            .delta,
                    ),
                    (Condition::Universal, Artifacts::Universal(a)) => Some(&a.delta),
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "condition `{}` given mismatched artifacts",
                            condition.as_str()
                        )))
                    }
                };
                if let Some(delta) = delta {
                    x = apply_delta(&x, delta)?;
                }
            }
            let score = match mode {
                EvalMode::Pristine => d.probability(&x)?,
                EvalMode::Deployment => {
                    let mut sum = 0.0;
                    for j in 0..cfg.n_draws {
                        let t = sample_transform(&dist, (i * cfg.n_draws + j) as u64);
                        sum += d.probability(&t.apply(&x)?)?;
                    }
                    sum / cfg.n_draws as f64
                }
            };
            Ok(ScoreEntry {
                sample_id: rec.image_path.clone(),
                label: rec.label,
                prompt_id: rec.prompt_id.clone(),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet {
        entries,
        condition: condition.as_str().to_string(),
        eval_mode: mode.as_str().to_string(),
        seed: cfg.seed,
    })
}
