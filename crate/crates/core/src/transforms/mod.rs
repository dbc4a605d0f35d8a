//! Differentiable deployment transforms and the randomized sampler used for
//! expectation over transformation.
//!
//! Every transform is exposed as a forward map plus a vector-Jacobian
//! product (`vjp`) that pulls an output gradient back onto the input. The
//! only non-smooth pieces are the `[0,1]` clamps (gradient masked where the
//! pre-clamp value leaves the range) and JPEG rounding (straight-through).
//!
//! The screenshot transform is one plausible realization of a
//! "screenshot-like" distortion: downscale/upscale, additive sensor-style
//! Gaussian noise, then re-encode.

pub mod jpeg;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Bilinear, ImageArray};

pub use jpeg::Rounding;

pub const MIN_RESIZED_SIDE: usize = 8;

fn resized_side(n: usize, scale: f64) -> Result<usize> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidConfig(format!("resize scale {scale} not in (0, 1]")));
    }
    let side = (scale * n as f64).round() as usize;
    if side < MIN_RESIZED_SIDE {
        return Err(Error::DegenerateScale { scale, height: n });
    }
    Ok(side)
}

struct ResizeOps {
    down: Bilinear,
    up: Bilinear,
}

fn resize_ops(x: &ImageArray, scale: f64) -> Result<ResizeOps> {
    let (h, w) = (x.height(), x.width());
    let sh = resized_side(h, scale)?;
    let sw = resized_side(w, scale)?;
    Ok(ResizeOps {
        down: Bilinear::new(h, w, sh, sw),
        up: Bilinear::new(sh, sw, h, w),
    })
}

/// Bilinear downscale to `round(scale·H)` then back up to `H×W`, clamped.
pub fn resize_chain(x: &ImageArray, scale: f64) -> Result<ImageArray> {
    let ops = resize_ops(x, scale)?;
    Ok(ops.up.forward(&ops.down.forward(x)).clamp_unit())
}

pub fn resize_chain_vjp(x: &ImageArray, scale: f64, grad_out: &ImageArray) -> Result<ImageArray> {
    x.check_shape(grad_out)?;
    let ops = resize_ops(x, scale)?;
    let pre = ops.up.forward(&ops.down.forward(x));
    let masked = mask_clamped(&pre, grad_out);
    Ok(ops.down.backward(&ops.up.backward(&masked)))
}

/// Zeroes gradient entries whose forward value fell outside `[0,1]`.
fn mask_clamped(pre: &ImageArray, grad: &ImageArray) -> ImageArray {
    let mut g = grad.clone();
    for (gv, &v) in g.data_mut().iter_mut().zip(pre.data()) {
        if !(0.0..=1.0).contains(&v) {
            *gv = 0.0;
        }
    }
    g
}

pub fn jpeg_differentiable(x: &ImageArray, quality: u32) -> Result<ImageArray> {
    jpeg::jpeg_forward(x, quality, Rounding::StraightThrough)
}

pub fn jpeg_differentiable_vjp(x: &ImageArray, quality: u32, grad_out: &ImageArray) -> Result<ImageArray> {
    jpeg::jpeg_backward(x, grad_out, quality, Rounding::StraightThrough)
}

/// Deterministic zero-mean Gaussian noise field for one screenshot draw.
pub fn screenshot_noise(height: usize, width: usize, std: f64, seed: u64) -> Result<ImageArray> {
    let mut noise = ImageArray::zeros(height, width);
    if std == 0.0 {
        return Ok(noise);
    }
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::InvalidConfig(format!("noise std {std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in noise.data_mut() {
        *v = normal.sample(&mut rng);
    }
    Ok(noise)
}

fn add(a: &ImageArray, b: &ImageArray) -> ImageArray {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

/// `jpeg(resize_chain(x, scale) + noise, quality)`, clamped. The noise is a
/// fixed function of `noise_seed`, so each draw is a deterministic map.
pub fn screenshot_transform(
    x: &ImageArray,
    scale: f64,
    noise_std: f64,
    quality: u32,
    noise_seed: u64,
) -> Result<ImageArray> {
    let resized = resize_chain(x, scale)?;
    let noise = screenshot_noise(x.height(), x.width(), noise_std, noise_seed)?;
    jpeg_differentiable(&add(&resized, &noise), quality)
}

pub fn screenshot_vjp(
    x: &ImageArray,
    scale: f64,
    noise_std: f64,
    quality: u32,
    noise_seed: u64,
    grad_out: &ImageArray,
) -> Result<ImageArray> {
    let resized = resize_chain(x, scale)?;
    let noise = screenshot_noise(x.height(), x.width(), noise_std, noise_seed)?;
    let g = jpeg_differentiable_vjp(&add(&resized, &noise), quality, grad_out)?;
    resize_chain_vjp(x, scale, &g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Identity,
    Resize,
    Jpeg,
    Screenshot,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Identity,
        TransformKind::Resize,
        TransformKind::Jpeg,
        TransformKind::Screenshot,
    ];
}

/// One sampled deployment transform with concrete parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformDraw {
    Identity,
    Resize {
        scale: f64,
    },
    Jpeg {
        quality: u32,
    },
    Screenshot {
        scale: f64,
        noise_std: f64,
        quality: u32,
        noise_seed: u64,
    },
}

impl TransformDraw {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformDraw::Identity => TransformKind::Identity,
            TransformDraw::Resize { .. } => TransformKind::Resize,
            TransformDraw::Jpeg { .. } => TransformKind::Jpeg,
            TransformDraw::Screenshot { .. } => TransformKind::Screenshot,
        }
    }

    pub fn apply(&self, x: &ImageArray) -> Result<ImageArray> {
        match *self {
            TransformDraw::Identity => Ok(x.clone()),
            TransformDraw::Resize { scale } => resize_chain(x, scale),
            TransformDraw::Jpeg { quality } => jpeg_differentiable(x, quality),
            TransformDraw::Screenshot {
                scale,
                noise_std,
                quality,
                noise_seed,
            } => screenshot_transform(x, scale, noise_std, quality, noise_seed),
        }
    }

    /// Pulls `grad_out` (gradient w.r.t. `apply(x)`) back onto `x`.
    pub fn vjp(&self, x: &ImageArray, grad_out: &ImageArray) -> Result<ImageArray> {
        x.check_shape(grad_out)?;
        match *self {
            TransformDraw::Identity => Ok(grad_out.clone()),
            TransformDraw::Resize { scale } => resize_chain_vjp(x, scale, grad_out),
            TransformDraw::Jpeg { quality } => jpeg_differentiable_vjp(x, quality, grad_out),
            TransformDraw::Screenshot {
                scale,
                noise_std,
                quality,
                noise_seed,
            } => screenshot_vjp(x, scale, noise_std, quality, noise_seed, grad_out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindWeights {
    pub identity: f64,
    pub resize: f64,
    pub jpeg: f64,
    pub screenshot: f64,
}

impl KindWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.identity, self.resize, self.jpeg, self.screenshot]
    }

    pub fn only(kind: TransformKind) -> Self {
        let mut w = [0.0; 4];
        w[TransformKind::ALL.iter().position(|k| *k == kind).unwrap()] = 1.0;
        Self {
            identity: w[0],
            resize: w[1],
            jpeg: w[2],
            screenshot: w[3],
        }
    }
}

impl Default for KindWeights {
    fn default() -> Self {
        Self {
            identity: 0.1,
            resize: 0.3,
            jpeg: 0.3,
            screenshot: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRanges {
    pub resize_scale: (f64, f64),
    pub jpeg_quality: (u32, u32),
    pub screenshot_scale: (f64, f64),
    pub screenshot_noise_std: (f64, f64),
    pub screenshot_quality: (u32, u32),
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            resize_scale: (0.5, 1.0),
            jpeg_quality: (30, 95),
            screenshot_scale: (0.6, 0.9),
            screenshot_noise_std: (0.0, 0.02),
            screenshot_quality: (50, 90),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformDistribution {
    pub kind_weights: KindWeights,
    pub ranges: TransformRanges,
    pub rng_seed: u64,
}

impl Default for TransformDistribution {
    fn default() -> Self {
        Self {
            kind_weights: KindWeights::default(),
            ranges: TransformRanges::default(),
            rng_seed: 0,
        }
    }
}

impl TransformDistribution {
    pub fn identity_only() -> Self {
        Self {
            kind_weights: KindWeights::only(TransformKind::Identity),
            ..Self::default()
        }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self { rng_seed, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.kind_weights.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("kind weights must be non-negative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("kind weights sum to {sum}, not 1")));
        }
        let r = &self.ranges;
        let unit = |(lo, hi): (f64, f64), name: &str| {
            if lo > 0.0 && lo <= hi && hi <= 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} range ({lo}, {hi}) not within (0, 1]")))
            }
        };
        let quality = |(lo, hi): (u32, u32), name: &str| {
            if (1..=100).contains(&lo) && lo <= hi && hi <= 100 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} range ({lo}, {hi}) not within [1, 100]")))
            }
        };
        unit(r.resize_scale, "resize_scale")?;
        unit(r.screenshot_scale, "screenshot_scale")?;
        quality(r.jpeg_quality, "jpeg_quality")?;
        quality(r.screenshot_quality, "screenshot_quality")?;
        let (lo, hi) = r.screenshot_noise_std;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("screenshot_noise_std range ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Deterministic function of `(dist.rng_seed, draw_index)`: each index owns
/// an independent ChaCha stream.
pub fn sample_transform(dist: &TransformDistribution, draw_index: u64) -> TransformDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(dist.rng_seed);
    rng.set_stream(draw_index);

    let u: f64 = rng.random();
    let weights = dist.kind_weights.as_array();
    let mut acc = 0.0;
    let mut kind = None;
    for (k, w) in TransformKind::ALL.iter().zip(weights) {
        acc += w;
        if w > 0.0 && u < acc {
            kind = Some(*k);
            break;
        }
    }
    // Rounding slack in the cumulative sum: fall back to the last weighted kind.
    let kind = kind.unwrap_or_else(|| {
        TransformKind::ALL
            .iter()
            .zip(weights)
            .rev()
            .find(|(_, w)| *w > 0.0)
            .map(|(k, _)| *k)
            .unwrap_or(TransformKind::Identity)
    });

    let r = &dist.ranges;
    match kind {
        TransformKind::Identity => TransformDraw::Identity,
        TransformKind::Resize => TransformDraw::Resize {
            scale: rng.random_range(r.resize_scale.0..=r.resize_scale.1),
        },
        TransformKind::Jpeg => TransformDraw::Jpeg {
            quality: rng.random_range(r.jpeg_quality.0..=r.jpeg_quality.1),
        },
        TransformKind::Screenshot => TransformDraw::Screenshot {
            scale: rng.random_range(r.screenshot_scale.0..=r.screenshot_scale.1),
            noise_std: rng.random_range(r.screenshot_noise_std.0..=r.screenshot_noise_std.1),
            quality: rng.random_range(r.screenshot_quality.0..=r.screenshot_quality.1),
            noise_seed: rng.random(),
        },
    }
}
