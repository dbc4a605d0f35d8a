//! Band-constrained perturbations: mask construction, projection onto the
//! feasible set, application, and on-disk artifacts.
//!
//! Deltas are stored as `f32`. The effective bound used by [`project`] is the
//! largest `f32` not exceeding ε, so a projected delta satisfies
//! `|δ| ≤ ε` exactly after widening back to `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageArray, CHANNELS};
use crate::json;

pub const DEFAULT_EPSILON: f64 = 16.0 / 255.0;
pub const DEFAULT_BAND_FRACTION: f64 = 0.22;
pub const META_FILE: &str = "meta.json";
pub const DELTA_FILE: &str = "delta.f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandSide {
    Top,
    Bottom,
}

impl BandSide {
    pub fn as_str(self) -> &'static str {
        match self {
            BandSide::Top => "top",
            BandSide::Bottom => "bottom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandMask {
    pub side: BandSide,
    pub fraction: f64,
    pub height: usize,
    pub width: usize,
    pub rows: usize,
}

fn band_rows(height: usize, fraction: f64) -> usize {
    (fraction * height as f64).floor() as usize
}

/// Horizontal band covering `floor(fraction · height)` rows at the top or bottom.
pub fn build_band_mask(height: usize, width: usize, side: BandSide, fraction: f64) -> Result<BandMask> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidConfig(format!("band mask needs at least 8×8, got {height}×{width}")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("band fraction {fraction} not in (0, 1]")));
    }
    let rows = band_rows(height, fraction);
    if rows == 0 {
        return Err(Error::DegenerateBand { fraction, height });
    }
    Ok(BandMask {
        side,
        fraction,
        height,
        width,
        rows,
    })
}

impl BandMask {
    /// First and one-past-last masked row.
    pub fn row_range(&self) -> std::ops::Range<usize> {
        match self.side {
            BandSide::Top => 0..self.rows,
            BandSide::Bottom => self.height - self.rows..self.height,
        }
    }

    pub fn contains_row(&self, y: usize) -> bool {
        self.row_range().contains(&y)
    }

    pub fn len(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (CHANNELS, self.height, self.width)
    }

    /// The mask as a `height × width` array of 0/1.
    pub fn to_array(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.height * self.width];
        for y in self.row_range() {
            out[y * self.width..][..self.width].fill(1);
        }
        out
    }

    /// Whether flat CHW index `i` lies inside the band.
    #[inline]
    pub fn contains_index(&self, i: usize) -> bool {
        self.contains_row((i / self.width) % self.height)
    }

    fn check_invariants(&self) -> std::result::Result<(), String> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(format!("fraction {} not in (0, 1]", self.fraction));
        }
        let expected = band_rows(self.height, self.fraction);
        if self.rows != expected || self.rows == 0 {
            return Err(format!(
                "rows {} != floor({} · {}) = {expected}",
                self.rows, self.fraction, self.height
            ));
        }
        Ok(())
    }
}

/// Largest `f32` that does not exceed `epsilon`.
pub fn epsilon_f32(epsilon: f64) -> f32 {
    let e = epsilon as f32;
    if f64::from(e) > epsilon {
        e.next_down()
    } else {
        e
    }
}

fn check_len(delta_len: usize, mask: &BandMask) -> Result<()> {
    if delta_len != mask.len() {
        return Err(Error::ShapeMismatch {
            expected: mask.shape(),
            actual: (delta_len / (mask.height * mask.width).max(1), mask.height, mask.width),
        });
    }
    Ok(())
}

/// Clamp to `[−ε, ε]` elementwise, then zero outside the band. Idempotent.
pub fn project(delta: &[f32], mask: &BandMask, epsilon: f64) -> Result<Vec<f32>> {
    check_len(delta.len(), mask)?;
    let e = epsilon_f32(epsilon.max(0.0));
    Ok(delta
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !mask.contains_index(i) || v.is_nan() {
                0.0
            } else {
                v.clamp(-e, e)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    PerImage,
    Universal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationArtifact {
    pub delta: Vec<f32>,
    pub mask: BandMask,
    pub epsilon: f64,
    pub regime: Regime,
    pub source_image_id: Option<String>,
    pub config_hash: String,
    pub created: String,
}

impl PerturbationArtifact {
    pub fn max_abs(&self) -> f64 {
        self.delta.iter().fold(0.0f64, |m, v| m.max(f64::from(v.abs())))
    }

    /// Checks every artifact invariant; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Error::MalformedArtifact {
            field: field.into(),
            reason,
        };
        self.mask.check_invariants().map_err(|r| bad("mask", r))?;
        if self.delta.len() != self.mask.len() {
            return Err(bad(
                "delta",
                format!("{} values for shape {:?}", self.delta.len(), self.mask.shape()),
            ));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(bad("epsilon", format!("{} is not a finite non-negative bound", self.epsilon)));
        }
        if let Some(i) = self.delta.iter().position(|v| !v.is_finite()) {
            return Err(bad("delta", format!("non-finite value at index {i}")));
        }
        let max = self.max_abs();
        if max > self.epsilon + 1e-9 {
            return Err(bad("delta", format!("epsilon bound violated: max |delta| {max} > {}", self.epsilon)));
        }
        if let Some(i) = self
            .delta
            .iter()
            .enumerate()
            .position(|(i, &v)| v != 0.0 && !self.mask.contains_index(i))
        {
            return Err(bad("delta", format!("mask support violated: nonzero at index {i} outside band")));
        }
        match (self.regime, &self.source_image_id) {
            (Regime::Universal, Some(id)) => {
                return Err(bad("source_image_id", format!("universal artifact names source `{id}`")))
            }
            (Regime::PerImage, None) => {
                return Err(bad("source_image_id", "per-image artifact without a source".into()))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn delta_image(&self) -> ImageArray {
        let data = self.delta.iter().map(|&v| f64::from(v)).collect();
        ImageArray::from_vec(self.mask.height, self.mask.width, data).expect("validated shape")
    }
}

/// `clamp(x + δ, 0, 1)`.
pub fn apply_perturbation(x: &ImageArray, a: &PerturbationArtifact) -> Result<ImageArray> {
    apply_delta(x, &a.delta)
}

pub fn apply_delta(x: &ImageArray, delta: &[f32]) -> Result<ImageArray> {
    if delta.len() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: x.shape(),
            actual: (delta.len() / (x.height() * x.width()).max(1), x.height(), x.width()),
        });
    }
    let mut out = x.clone();
    for (o, &d) in out.data_mut().iter_mut().zip(delta) {
        *o = (*o + f64::from(d)).clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactMeta {
    mask: BandMask,
    epsilon: f64,
    regime: Regime,
    source_image_id: Option<String>,
    config_hash: String,
    created: String,
    shape: [usize; 3],
    dtype: String,
    layout: String,
}

/// Writes `meta.json` and `delta.f32` (little-endian, CHW) into `dir`.
pub fn save_artifact(a: &PerturbationArtifact, dir: &Path) -> Result<()> {
    a.validate()?;
    fs::create_dir_all(dir)?;
    let meta = ArtifactMeta {
        mask: a.mask,
        epsilon: a.epsilon,
        regime: a.regime,
        source_image_id: a.source_image_id.clone(),
        config_hash: a.config_hash.clone(),
        created: a.created.clone(),
        shape: [CHANNELS, a.mask.height, a.mask.width],
        dtype: "f32le".into(),
        layout: "CHW".into(),
    };
    json::write_sorted(&dir.join(META_FILE), &meta)?;
    let bytes: Vec<u8> = a.delta.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(DELTA_FILE), bytes)?;
    Ok(())
}

pub fn load_artifact(dir: &Path) -> Result<PerturbationArtifact> {
    let bad = |field: &str, reason: String| Error::MalformedArtifact {
        field: field.into(),
        reason,
    };
    let meta_text = fs::read_to_string(dir.join(META_FILE))?;
    let meta: ArtifactMeta =
        serde_json::from_str(&meta_text).map_err(|e| bad("meta.json", e.to_string()))?;
    if meta.dtype != "f32le" {
        return Err(bad("dtype", format!("unsupported `{}`", meta.dtype)));
    }
    if meta.layout != "CHW" {
        return Err(bad("layout", format!("unsupported `{}`", meta.layout)));
    }
    if meta.shape != [CHANNELS, meta.mask.height, meta.mask.width] {
        return Err(bad("shape", format!("{:?} disagrees with mask", meta.shape)));
    }
    let bytes = fs::read(dir.join(DELTA_FILE))?;
    let n = meta.shape.iter().product::<usize>();
    if bytes.len() != 4 * n {
        return Err(bad("delta", format!("{} bytes, expected {}", bytes.len(), 4 * n)));
    }
    let delta = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let a = PerturbationArtifact {
        delta,
        mask: meta.mask,
        epsilon: meta.epsilon,
        regime: meta.regime,
        source_image_id: meta.source_image_id,
        config_hash: meta.config_hash,
        created: meta.created,
    };
    a.validate()?;
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_band_rows() {
        let m = build_band_mask(224, 224, BandSide::Bottom, 0.22).unwrap();
        assert_eq!(m.rows, 49);
        assert_eq!(m.row_range(), 175..224);
        let m = build_band_mask(224, 224, BandSide::Top, 0.22).unwrap();
        assert_eq!(m.row_range(), 0..49);
        let arr = m.to_array();
        assert!(arr[..49 * 224].iter().all(|&v| v == 1));
        assert!(arr[49 * 224..].iter().all(|&v| v == 0));
    }

    #[test]
    fn degenerate_band() {
        assert!(matches!(
            build_band_mask(8, 8, BandSide::Top, 0.05),
            Err(Error::DegenerateBand { .. })
        ));
    }

    #[test]
    fn project_saturates_inside_band_only() {
        let m = build_band_mask(16, 8, BandSide::Bottom, 0.25).unwrap();
        let p = project(&vec![1.0; m.len()], &m, DEFAULT_EPSILON).unwrap();
        let e = epsilon_f32(DEFAULT_EPSILON);
        for (i, v) in p.iter().enumerate() {
            let y = (i / 8) % 16;
            assert_eq!(*v, if y >= 12 { e } else { 0.0 });
        }
        assert!(f64::from(e) <= DEFAULT_EPSILON);
        assert!(DEFAULT_EPSILON - f64::from(e) < 1e-8);
    }

    #[test]
    fn project_rejects_wrong_shape() {
        let m = build_band_mask(8, 8, BandSide::Top, 0.5).unwrap();
        assert!(matches!(project(&[0.0; 5], &m, 0.1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_delta_leaves_image_unchanged() {
        let x = ImageArray::filled(8, 8, 0.3);
        assert_eq!(apply_delta(&x, &vec![0.0; x.len()]).unwrap(), x);
    }

    #[test]
    fn application_clamps_to_unit_range() {
        let m = build_band_mask(8, 8, BandSide::Top, 0.5).unwrap();
        let d = project(&vec![1.0; m.len()], &m, DEFAULT_EPSILON).unwrap();
        let y = apply_delta(&ImageArray::filled(8, 8, 1.0), &d).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    fn artifact(regime: Regime) -> PerturbationArtifact {
        let mask = build_band_mask(8, 8, BandSide::Top, 0.5).unwrap();
        let raw: Vec<f32> = (0..mask.len()).map(|i| (i as f32 * 0.37).sin()).collect();
        PerturbationArtifact {
            delta: project(&raw, &mask, DEFAULT_EPSILON).unwrap(),
            mask,
            epsilon: DEFAULT_EPSILON,
            regime,
            source_image_id: (regime == Regime::PerImage).then(|| "img.png".into()),
            config_hash: "abc".into(),
            created: "1970-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn universal_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = artifact(Regime::Universal);
        save_artifact(&a, dir.path()).unwrap();
        assert_eq!(load_artifact(dir.path()).unwrap(), a);
    }

    #[test]
    fn corrupted_delta_violates_epsilon() {
        let dir = tempfile::tempdir().unwrap();
        save_artifact(&artifact(Regime::PerImage), dir.path()).unwrap();
        let path = dir.path().join(DELTA_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(&0.5f32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match load_artifact(dir.path()) {
            Err(Error::MalformedArtifact { field, reason }) => {
                assert_eq!(field, "delta");
                assert!(reason.contains("epsilon"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_delta_outside_band() {
        let dir = tempfile::tempdir().unwrap();
        save_artifact(&artifact(Regime::PerImage), dir.path()).unwrap();
        let path = dir.path().join(DELTA_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 4;
        bytes[last..].copy_from_slice(&0.01f32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match load_artifact(dir.path()) {
            Err(Error::MalformedArtifact { reason, .. }) => assert!(reason.contains("mask")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn universal_with_source_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_artifact(&artifact(Regime::Universal), dir.path()).unwrap();
        let path = dir.path().join(META_FILE);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"source_image_id\": null", "\"source_image_id\": \"x.png\"");
        fs::write(&path, text).unwrap();
        match load_artifact(dir.path()) {
            Err(Error::MalformedArtifact { field, .. }) => assert_eq!(field, "source_image_id"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
