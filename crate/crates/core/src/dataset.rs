//! Real/synthetic image catalogs: manifest I/O, validation, image ingestion
//! and the procedural toy dataset.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, ImageArray, CHANNELS};
use crate::json;
use crate::timestamp;

pub const DEFAULT_IMAGE_SIZE: usize = 224;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Toy "generator artifact": sinusoidal grid.
pub const SIGNATURE_AMPLITUDE: f64 = 0.015;
pub const SIGNATURE_PERIOD: f64 = 8.0;
pub const TRAIN_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Synthetic,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Synthetic => "synthetic",
        }
    }

    pub fn is_synthetic(self) -> bool {
        self == Label::Synthetic
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image_path: String,
    pub label: Label,
    pub prompt_id: Option<String>,
    pub seed: Option<u64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub image_size: usize,
    pub created: String,
    pub records: Vec<SampleRecord>,
    /// Directory that relative `image_path`s resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, rec: &SampleRecord) -> PathBuf {
        self.root.join(&rec.image_path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn prompt_ids(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter_map(|r| r.prompt_id.as_deref())
            .collect()
    }

    pub fn load_record(&self, rec: &SampleRecord) -> Result<ImageArray> {
        load_image(&self.resolve(rec), self.image_size)
    }

    /// Writes the manifest as `manifest.json` inside `self.root`.
    pub fn save(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.root)?;
        let path = self.root.join(MANIFEST_FILE);
        json::write_sorted(&path, self)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Invariant {
    RealHasPrompt,
    SyntheticMissingPrompt,
    DuplicatePath,
    SplitMissingLabel { split: Split, label: Label },
    PromptNotInTest { prompt_id: String },
    BadImageSize,
    BadTimestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub indices: Vec<usize>,
    pub invariant: Invariant,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match &self.invariant {
            Invariant::RealHasPrompt => "real record carries a prompt_id".to_string(),
            Invariant::SyntheticMissingPrompt => "synthetic record has null prompt_id".to_string(),
            Invariant::DuplicatePath => "duplicate image_path".to_string(),
            Invariant::SplitMissingLabel { split, label } => {
                format!("split `{}` has no {} record", split.as_str(), label)
            }
            Invariant::PromptNotInTest { prompt_id } => {
                format!("prompt_id `{prompt_id}` has no synthetic test record")
            }
            Invariant::BadImageSize => "image_size must be positive".to_string(),
            Invariant::BadTimestamp => "created is not an ISO-8601 timestamp".to_string(),
        };
        if self.indices.is_empty() {
            write!(f, "{what}")
        } else {
            write!(f, "records {:?}: {what}", self.indices)
        }
    }
}

/// Checks every manifest and record invariant; an empty list means valid.
pub fn validate_manifest(m: &Manifest) -> Vec<Violation> {
    let mut out = Vec::new();
    if m.image_size == 0 {
        out.push(Violation {
            indices: vec![],
            invariant: Invariant::BadImageSize,
        });
    }
    if !timestamp::is_iso8601(&m.created) {
        out.push(Violation {
            indices: vec![],
            invariant: Invariant::BadTimestamp,
        });
    }

    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (i, rec) in m.records.iter().enumerate() {
        match (rec.label, &rec.prompt_id) {
            (Label::Real, Some(_)) => out.push(Violation {
                indices: vec![i],
                invariant: Invariant::RealHasPrompt,
            }),
            (Label::Synthetic, None) => out.push(Violation {
                indices: vec![i],
                invariant: Invariant::SyntheticMissingPrompt,
            }),
            _ => {}
        }
        if let Some(&j) = first_seen.get(rec.image_path.as_str()) {
            out.push(Violation {
                indices: vec![j, i],
                invariant: Invariant::DuplicatePath,
            });
        } else {
            first_seen.insert(&rec.image_path, i);
        }
    }

    for split in [Split::Train, Split::Test] {
        for label in [Label::Real, Label::Synthetic] {
            if !m.records.iter().any(|r| r.split == split && r.label == label) {
                out.push(Violation {
                    indices: vec![],
                    invariant: Invariant::SplitMissingLabel { split, label },
                });
            }
        }
    }

    let tested: BTreeSet<&str> = m
        .records
        .iter()
        .filter(|r| r.split == Split::Test && r.label == Label::Synthetic)
        .filter_map(|r| r.prompt_id.as_deref())
        .collect();
    for prompt in m.prompt_ids() {
        if !tested.contains(prompt) {
            let indices = m
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.prompt_id.as_deref() == Some(prompt))
                .map(|(i, _)| i)
                .collect();
            out.push(Violation {
                indices,
                invariant: Invariant::PromptNotInTest {
                    prompt_id: prompt.to_string(),
                },
            });
        }
    }
    out
}

/// Parses a manifest without touching the referenced images.
pub fn parse_manifest(text: &str, root: &Path) -> Result<Manifest> {
    let malformed = |index: Option<usize>, reason: String| Error::MalformedManifest { index, reason };
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| malformed(None, e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(None, "top level is not an object".into()))?;

    let field = |key: &str| {
        obj.get(key)
            .ok_or_else(|| malformed(None, format!("missing field `{key}`")))
    };
    let name = field("name")?
        .as_str()
        .ok_or_else(|| malformed(None, "`name` is not a string".into()))?
        .to_string();
    let image_size = field("image_size")?
        .as_u64()
        .ok_or_else(|| malformed(None, "`image_size` is not a non-negative integer".into()))?
        as usize;
    let created = field("created")?
        .as_str()
        .ok_or_else(|| malformed(None, "`created` is not a string".into()))?
        .to_string();
    let raw_records = field("records")?
        .as_array()
        .ok_or_else(|| malformed(None, "`records` is not an array".into()))?;

    let records = raw_records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            SampleRecord::deserialize(r).map_err(|e| malformed(Some(i), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Manifest {
        name,
        image_size,
        created,
        records,
        root: root.to_path_buf(),
    })
}

/// Loads and validates a manifest file; record order is preserved.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = parse_manifest(&text, &root)?;
    if let Some(v) = validate_manifest(&m).into_iter().next() {
        return Err(Error::MalformedManifest {
            index: v.indices.first().copied(),
            reason: v.to_string(),
        });
    }
    for rec in &m.records {
        let p = m.resolve(rec);
        if !p.exists() {
            return Err(Error::MissingImage(p));
        }
    }
    Ok(m)
}

/// Decodes an 8-bit RGB image to `pixel / 255`, bilinearly resized to
/// `size × size` when the source differs.
pub fn load_image(path: &Path, size: usize) -> Result<ImageArray> {
    let img = ImageArray::load_rgb8(path)?;
    Ok(resize_bilinear(&img, size, size))
}

/// Parameters of [`generate_toy_dataset`].
#[derive(Debug, Clone, Copy)]
pub struct ToySpec {
    pub n_per_class: usize,
    pub n_prompts: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Peak amplitude of the synthetic-class signature.
    pub signature_amplitude: f64,
    /// Shift the signature phase by prompt (see [`signature_phase`]);
    /// otherwise every synthetic image carries the same grid.
    pub per_prompt_phase: bool,
}

impl ToySpec {
    pub fn new(n_per_class: usize, n_prompts: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            n_prompts,
            image_size: DEFAULT_IMAGE_SIZE,
            seed,
            signature_amplitude: SIGNATURE_AMPLITUDE,
            per_prompt_phase: false,
        }
    }
}

fn record_seed(dataset_seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index);
    // Stay inside the exactly representable JSON integer range.
    rng.random::<u64>() >> 11
}

fn coarse_grid(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> ImageArray {
    let data = (0..CHANNELS * n * n).map(|_| rng.random_range(lo..hi)).collect();
    ImageArray::from_vec(n, n, data).expect("grid shape")
}

/// Smooth colour texture: a coarse luminance field with per-channel tint and
/// a finer, weaker detail layer, all bilinearly upsampled.
pub fn toy_texture(seed: u64, size: usize) -> ImageArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lum = coarse_grid(&mut rng, 6, 0.25, 0.75);
    let tint = coarse_grid(&mut rng, 6, -0.08, 0.08);
    let detail = coarse_grid(&mut rng, 19, -0.06, 0.06);
    let lum = resize_bilinear(&lum, size, size);
    let tint = resize_bilinear(&tint, size, size);
    let detail = resize_bilinear(&detail, size, size);

    let mut out = ImageArray::zeros(size, size);
    let n = size * size;
    for c in 0..CHANNELS {
        for i in 0..n {
            // Luminance shared across channels; tint and detail per channel.
            let v = lum.data()[i] + tint.data()[c * n + i] + detail.data()[c * n + i];
            out.data_mut()[c * n + i] = v;
        }
    }
    out
}

/// The class-separating cue added to toy synthetic images, with its
/// horizontal phase shifted by `phase` radians.
pub fn toy_signature(size: usize, amplitude: f64, phase: f64) -> ImageArray {
    let w = 2.0 * std::f64::consts::PI / SIGNATURE_PERIOD;
    let mut out = ImageArray::zeros(size, size);
    for c in 0..CHANNELS {
        for y in 0..size {
            for x in 0..size {
                let i = out.index(c, y, x);
                out.data_mut()[i] = amplitude
                    * ((x as f64 + 0.5) * w + phase).sin()
                    * ((y as f64 + 0.5) * w).sin();
            }
        }
    }
    out
}

/// Phase of prompt `k` of `n`: evenly spaced, so the signatures of all
/// prompts sum to zero and no single pattern cancels every one of them.
pub fn signature_phase(k: usize, n: usize) -> f64 {
    2.0 * std::f64::consts::PI * k as f64 / n.max(1) as f64
}

/// A toy texture, plus `signature` for synthetic images.
pub fn toy_image(seed: u64, size: usize, signature: Option<&ImageArray>) -> ImageArray {
    let mut img = toy_texture(seed, size);
    if let Some(sig) = signature {
        for (v, s) in img.data_mut().iter_mut().zip(sig.data()) {
            *v += s;
        }
    }
    img.clamp_unit()
}

fn train_count(n: usize) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n - 1)
}

/// Writes a balanced toy dataset (8-bit PNGs plus `manifest.json`) to
/// `out_dir` and returns the manifest. Bit-deterministic for a fixed seed.
pub fn generate_toy_dataset(out_dir: &Path, spec: ToySpec) -> Result<Manifest> {
    let ToySpec {
        n_per_class,
        n_prompts,
        image_size,
        seed,
        signature_amplitude,
        per_prompt_phase,
    } = spec;
    if n_prompts == 0 || n_per_class < n_prompts {
        return Err(Error::InvalidConfig(format!(
            "need n_per_class >= n_prompts >= 1, got {n_per_class} and {n_prompts}"
        )));
    }
    if image_size < 8 {
        return Err(Error::InvalidConfig(format!("image_size {image_size} < 8")));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)?;

    let signatures: Vec<ImageArray> = (0..n_prompts)
        .map(|k| {
            let phase = if per_prompt_phase { signature_phase(k, n_prompts) } else { 0.0 };
            toy_signature(image_size, signature_amplitude, phase)
        })
        .collect();
    let mut records = Vec::with_capacity(2 * n_per_class);
    for label in [Label::Real, Label::Synthetic] {
        for k in 0..n_per_class {
            let global = records.len() as u64;
            let rseed = record_seed(seed, global);
            let rel = format!("images/{}_{k:04}.png", label.as_str());
            let sig = label.is_synthetic().then(|| &signatures[k % n_prompts]);
            toy_image(rseed, image_size, sig).save_png(&out_dir.join(&rel))?;
            records.push(SampleRecord {
                image_path: rel,
                label,
                prompt_id: label.is_synthetic().then(|| format!("toy_{}", k % n_prompts)),
                seed: Some(rseed),
                split: Split::Train,
            });
        }
    }

    // Stratify by (label, prompt): shuffle each group and send the tail to test.
    let mut groups: BTreeMap<(Label, Option<String>), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry((r.label, r.prompt_id.clone())).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        let n_train = train_count(members.len());
        for &i in &members[n_train..] {
            records[i].split = Split::Test;
        }
    }

    let manifest = Manifest {
        name: "toy".into(),
        image_size,
        created: timestamp::reproducible_now(),
        records,
        root: out_dir.to_path_buf(),
    };
    if let Some(v) = validate_manifest(&manifest).into_iter().next() {
        return Err(Error::InvalidConfig(format!("toy parameters yield an invalid manifest: {v}")));
    }
    manifest.save()?;
    Ok(manifest)
}
