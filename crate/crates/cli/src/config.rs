//! Run configuration: one JSON file per run, with command-line overrides.
//!
//! Resolution order: built-in defaults, then the `--config` file, then
//! `--set key.path=value` pairs and dedicated flags. Every key in the file or
//! an override must already exist in the default tree.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use deploygap_core::attack::{AttackConfig, Condition, DrawStream, EvalConfig, EvalMode};
use deploygap_core::dataset::{ToySpec, DEFAULT_IMAGE_SIZE, SIGNATURE_AMPLITUDE};
use deploygap_core::detector::{ProbeConfig, TrainConfig};
use deploygap_core::json;
use deploygap_core::metrics::{BootstrapConfig, ReportOptions, DEFAULT_ECE_BINS, DEFAULT_HISTOGRAM_BINS};
use deploygap_core::transforms::TransformDistribution;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub per_image_artifacts: Option<PathBuf>,
    pub universal_artifact: Option<PathBuf>,
    pub scores: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub n_prompts: usize,
    pub image_size: usize,
    pub seed: u64,
    pub signature_amplitude: f64,
    pub per_prompt_phase: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_per_class: 50,
            n_prompts: 5,
            image_size: DEFAULT_IMAGE_SIZE,
            seed: 0,
            signature_amplitude: SIGNATURE_AMPLITUDE,
            per_prompt_phase: false,
        }
    }
}

impl DataConfig {
    pub fn toy_spec(&self) -> ToySpec {
        ToySpec {
            n_per_class: self.n_per_class,
            n_prompts: self.n_prompts,
            image_size: self.image_size,
            seed: self.seed,
            signature_amplitude: self.signature_amplitude,
            per_prompt_phase: self.per_prompt_phase,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Cnn,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub kind: DetectorKind,
    pub cnn: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Cnn,
            cnn: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub condition: Condition,
    pub eval_mode: EvalMode,
}

impl std::str::FromStr for Pair {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let (c, m) = s
            .split_once(':')
            .with_context(|| format!("pair `{s}` must look like condition:eval_mode"))?;
        Ok(Self {
            condition: serde_json::from_value(Value::String(c.trim().into()))
                .with_context(|| format!("unknown condition `{c}`"))?,
            eval_mode: serde_json::from_value(Value::String(m.trim().into()))
                .with_context(|| format!("unknown eval mode `{m}`"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub seed: u64,
    pub n_draws: usize,
    pub transform_dist: TransformDistribution,
    pub draw_stream: DrawStream,
    /// Empty: every pair the supplied artifacts allow.
    pub pairs: Vec<Pair>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            seed: e.seed,
            n_draws: e.n_draws,
            transform_dist: e.transform_dist,
            draw_stream: e.draw_stream,
            pairs: Vec::new(),
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed,
            transform_dist: self.transform_dist.clone(),
            n_draws: self.n_draws,
            draw_stream: self.draw_stream,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub ece_bins: usize,
    pub histogram_bins: usize,
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
    pub threshold: f64,
    pub stratified: bool,
    pub figures: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        let b = BootstrapConfig::default();
        Self {
            ece_bins: DEFAULT_ECE_BINS,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            n_resamples: b.n_resamples,
            level: b.level,
            seed: b.seed,
            threshold: b.threshold,
            stratified: b.stratified,
            figures: true,
        }
    }
}

impl ReportSection {
    pub fn options(&self) -> ReportOptions {
        ReportOptions {
            ece_bins: self.ece_bins,
            histogram_bins: self.histogram_bins,
            bootstrap: BootstrapConfig {
                n_resamples: self.n_resamples,
                level: self.level,
                seed: self.seed,
                threshold: self.threshold,
                stratified: self.stratified,
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: DataConfig,
    pub train: TrainSection,
    pub attack: AttackConfig,
    pub eval: EvalSection,
    pub report: ReportSection,
}

/// Overlays `patch` onto `base`, rejecting keys absent from `base`.
fn merge(base: &mut Value, patch: Value, at: &str) -> anyhow::Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => bail!("unknown config key `{path}`"),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

/// Parses `value` as JSON, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut patch = value;
    for part in key.rsplit('.') {
        let mut obj = serde_json::Map::new();
        obj.insert(part.to_string(), patch);
        patch = Value::Object(obj);
    }
    merge(root, patch, "")
}

/// Accumulates overrides from flags, applied after the config file.
#[derive(Debug, Default)]
pub struct Overrides(Vec<(String, Value)>);

impl Overrides {
    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.0.push((key.to_string(), serde_json::to_value(value).expect("serializable override")));
    }

    pub fn opt<T: Serialize>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    /// `key.path=value` strings from `--set`.
    pub fn raw(&mut self, assignments: &[String]) -> anyhow::Result<()> {
        for a in assignments {
            let (k, v) = a
                .split_once('=')
                .with_context(|| format!("override `{a}` must look like key.path=value"))?;
            self.0.push((k.trim().to_string(), parse_value(v)));
        }
        Ok(())
    }
}

pub fn resolve(config: Option<&Path>, overrides: Overrides) -> anyhow::Result<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut tree, file, "").with_context(|| format!("in config {}", path.display()))?;
    }
    // Step size follows epsilon unless pinned explicitly.
    let eps_overridden = overrides.0.iter().any(|(k, _)| k == "attack.epsilon");
    let step_overridden = overrides.0.iter().any(|(k, _)| k == "attack.step_size");
    for (k, v) in overrides.0 {
        set_path(&mut tree, &k, v).with_context(|| format!("override `{k}`"))?;
    }
    if eps_overridden && !step_overridden {
        tree["attack"]["step_size"] = Value::Null;
    }
    Ok(serde_json::from_value(tree).context("config does not match the expected schema")?)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config: &'a RunConfig,
    config_hash: String,
    version: &'static str,
}

/// Writes `run.json` into `dir`: the command, resolved config and its hash.
pub fn write_run_record(dir: &Path, command: &str, cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let record = RunRecord {
        command,
        config: cfg,
        config_hash: json::config_hash(cfg)?,
        version: env!("CARGO_PKG_VERSION"),
    };
    json::write_sorted(&dir.join(RUN_FILE), &record)?;
    Ok(())
}
