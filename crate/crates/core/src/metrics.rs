//! Detection statistics over scored samples: AUC, threshold metrics,
//! calibration, per-prompt breakdowns, histograms and bootstrap intervals.
//!
//! Synthetic is the positive class throughout; a score is the detector's
//! probability that the sample is synthetic.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::json;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_HISTOGRAM_BINS: usize = 20;
pub const DEFAULT_RESAMPLES: usize = 2000;
pub const DEFAULT_LEVEL: f64 = 0.95;
const MAX_REDRAWS_PER_RESAMPLE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub sample_id: String,
    pub label: Label,
    pub prompt_id: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
    pub condition: String,
    pub eval_mode: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreSetHeader {
    condition: String,
    eval_mode: String,
    seed: u64,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !(0.0..=1.0).contains(&e.score) {
                return Err(Error::InvalidConfig(format!("entry {i} score {} outside [0,1]", e.score)));
            }
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate sample_id `{}`", e.sample_id)));
            }
        }
        Ok(())
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// JSON lines: a header object, then one object per entry.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = ScoreSetHeader {
            condition: self.condition.clone(),
            eval_mode: self.eval_mode.clone(),
            seed: self.seed,
        };
        let mut out = json::canonical(&header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&json::canonical(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ScoreSetHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::InvalidConfig("empty score file".into()))?,
        )?;
        let entries = lines
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect::<Result<Vec<ScoreEntry>>>()?;
        let s = Self {
            entries,
            condition: header.condition,
            eval_mode: header.eval_mode,
            seed: header.seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

fn split_scores<'a>(entries: impl IntoIterator<Item = &'a ScoreEntry>) -> (Vec<f64>, Vec<f64>) {
    let mut syn = Vec::new();
    let mut real = Vec::new();
    for e in entries {
        match e.label {
            Label::Synthetic => syn.push(e.score),
            Label::Real => real.push(e.score),
        }
    }
    (syn, real)
}

fn auc_of(syn: &[f64], real: &mut [f64]) -> Result<f64> {
    if syn.is_empty() {
        return Err(Error::SingleClass("real"));
    }
    if real.is_empty() {
        return Err(Error::SingleClass("synthetic"));
    }
    real.sort_by(f64::total_cmp);
    // Wins are counted in half-units so the sum stays an exact integer.
    let mut half_wins: u64 = 0;
    for &s in syn {
        let below = real.partition_point(|&r| r < s);
        let not_above = real.partition_point(|&r| r <= s);
        half_wins += 2 * below as u64 + (not_above - below) as u64;
    }
    Ok(half_wins as f64 / (2.0 * syn.len() as f64 * real.len() as f64))
}

/// Mann–Whitney AUC with ties counted as one half.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let (syn, mut real) = split_scores(&s.entries);
    auc_of(&syn, &mut real)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub fake_to_real_rate: f64,
}

/// Fraction of entries classified correctly; predicted synthetic iff `score ≥ threshold`.
pub fn accuracy(s: &ScoreSet, threshold: f64) -> f64 {
    accuracy_of(s.entries.iter(), threshold)
}

fn accuracy_of<'a>(entries: impl ExactSizeIterator<Item = &'a ScoreEntry>, threshold: f64) -> f64 {
    let n = entries.len();
    if n == 0 {
        return f64::NAN;
    }
    let correct = entries
        .filter(|e| (e.score >= threshold) == e.label.is_synthetic())
        .count();
    correct as f64 / n as f64
}

fn fake_to_real_of(syn: &[f64], threshold: f64) -> Result<f64> {
    if syn.is_empty() {
        return Err(Error::SingleClass("real"));
    }
    Ok(syn.iter().filter(|&&v| v < threshold).count() as f64 / syn.len() as f64)
}

pub fn fake_to_real_rate(s: &ScoreSet, threshold: f64) -> Result<f64> {
    fake_to_real_of(&split_scores(&s.entries).0, threshold)
}

pub fn threshold_metrics(s: &ScoreSet, threshold: f64) -> Result<ThresholdMetrics> {
    Ok(ThresholdMetrics {
        accuracy: accuracy(s, threshold),
        fake_to_real_rate: fake_to_real_rate(s, threshold)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    /// `None` for empty bins.
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
    pub count: usize,
}

/// Binary ECE over `n_bins` equal-width confidence bins spanning `[0.5, 1]`.
/// Confidence is `max(score, 1 − score)`; bins are left-closed, the last one
/// also right-closed; empty bins contribute nothing.
pub fn ece(s: &ScoreSet, n_bins: usize) -> Result<(f64, Vec<ReliabilityBin>)> {
    if n_bins == 0 {
        return Err(Error::InvalidConfig("ece needs at least one bin".into()));
    }
    let width = 0.5 / n_bins as f64;
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for e in &s.entries {
        let pred_syn = e.score >= DEFAULT_THRESHOLD;
        let c = if pred_syn { e.score } else { 1.0 - e.score };
        let b = (((c - 0.5) / width).floor().max(0.0) as usize).min(n_bins - 1);
        conf_sum[b] += c;
        count[b] += 1;
        if pred_syn == e.label.is_synthetic() {
            correct[b] += 1;
        }
    }
    let n = s.entries.len() as f64;
    let mut total = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mean_confidence, acc) = if count[b] == 0 {
                (None, None)
            } else {
                let k = count[b] as f64;
                let mc = conf_sum[b] / k;
                let acc = correct[b] as f64 / k;
                total += k / n * (acc - mc).abs();
                (Some(mc), Some(acc))
            };
            ReliabilityBin {
                lo: 0.5 + b as f64 * width,
                hi: if b + 1 == n_bins { 1.0 } else { 0.5 + (b + 1) as f64 * width },
                mean_confidence,
                accuracy: acc,
                count: count[b],
            }
        })
        .collect();
    Ok((if s.entries.is_empty() { 0.0 } else { total }, bins))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptRate {
    pub rate: f64,
    pub n: usize,
}

/// Fake→real rate restricted to each prompt's synthetic entries.
pub fn per_prompt_rates(s: &ScoreSet, threshold: f64) -> BTreeMap<String, PromptRate> {
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for e in s.entries.iter().filter(|e| e.label.is_synthetic()) {
        if let Some(p) = &e.prompt_id {
            let g = groups.entry(p.clone()).or_default();
            g.1 += 1;
            if e.score < threshold {
                g.0 += 1;
            }
        }
    }
    groups
        .into_iter()
        .map(|(p, (flipped, n))| {
            (
                p,
                PromptRate {
                    rate: flipped as f64 / n as f64,
                    n,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: BTreeMap<Label, Vec<usize>>,
}

/// Equal-width score histogram over `[0,1]` per label (last bin right-closed).
pub fn histogram(s: &ScoreSet, n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let mut counts: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for label in [Label::Real, Label::Synthetic] {
        counts.insert(label, vec![0; n_bins]);
    }
    for e in &s.entries {
        let b = ((e.score * n_bins as f64).floor() as usize).min(n_bins - 1);
        counts.get_mut(&e.label).expect("both labels")[b] += 1;
    }
    let edges = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
    Ok(Histogram { edges, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Auc,
    Accuracy,
    FakeToRealRate,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Auc, MetricKind::Accuracy, MetricKind::FakeToRealRate];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Auc => "auc",
            MetricKind::Accuracy => "accuracy",
            MetricKind::FakeToRealRate => "fake_to_real_rate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
    pub threshold: f64,
    /// Resample each label separately, keeping class counts fixed.
    pub stratified: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            stratified: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_resamples: usize,
    pub level: f64,
    /// Degenerate resamples that were discarded and redrawn.
    pub redraws: usize,
}

/// `None` when the resample cannot support the metric.
fn metric_on(entries: &[&ScoreEntry], metric: MetricKind, threshold: f64) -> Option<f64> {
    let (syn, mut real) = split_scores(entries.iter().copied());
    match metric {
        MetricKind::Auc => auc_of(&syn, &mut real).ok(),
        MetricKind::Accuracy => Some(accuracy_of(entries.iter().copied(), threshold)),
        MetricKind::FakeToRealRate => fake_to_real_of(&syn, threshold).ok(),
    }
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0,1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let frac = pos - i as f64;
    sorted[i] + (sorted[j] - sorted[i]) * frac
}

/// Percentile bootstrap. Resample `r` draws from its own ChaCha stream
/// `(seed, r)`, so results do not depend on evaluation order or thread count.
pub fn bootstrap_ci(s: &ScoreSet, metric: MetricKind, cfg: &BootstrapConfig) -> Result<ConfidenceInterval> {
    if cfg.n_resamples == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "bootstrap needs resamples > 0 and level in (0,1), got {} and {}",
            cfg.n_resamples, cfg.level
        )));
    }
    if metric_on(&s.entries.iter().collect::<Vec<_>>(), metric, cfg.threshold).is_none() {
        return Err(Error::SingleClass(if s.count(Label::Synthetic) == 0 {
            "real"
        } else {
            "synthetic"
        }));
    }
    let n = s.entries.len();
    let (syn_idx, real_idx): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| s.entries[i].label.is_synthetic());

    let outcomes: Vec<(Option<f64>, usize)> = (0..cfg.n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            let mut degenerate = 0;
            for _ in 0..MAX_REDRAWS_PER_RESAMPLE {
                let sample: Vec<&ScoreEntry> = if cfg.stratified {
                    let mut pick = |pool: &[usize]| -> Vec<&ScoreEntry> {
                        (0..pool.len())
                            .map(|_| &s.entries[pool[rng.random_range(0..pool.len())]])
                            .collect()
                    };
                    let mut v = pick(&syn_idx);
                    v.extend(pick(&real_idx));
                    v
                } else {
                    (0..n).map(|_| &s.entries[rng.random_range(0..n)]).collect()
                };
                match metric_on(&sample, metric, cfg.threshold) {
                    Some(v) => return (Some(v), degenerate),
                    None => degenerate += 1,
                }
            }
            (None, degenerate)
        })
        .collect();

    let redraws: usize = outcomes.iter().map(|o| o.1).sum();
    let attempts = redraws + outcomes.iter().filter(|o| o.0.is_some()).count();
    if outcomes.iter().any(|o| o.0.is_none()) || too_degenerate(redraws, attempts) {
        return Err(Error::NonConvergentResampling {
            degenerate: redraws,
            attempts,
        });
    }
    let mut values: Vec<f64> = outcomes.into_iter().filter_map(|o| o.0).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - cfg.level) / 2.0;
    Ok(ConfidenceInterval {
        // Clamp guards the mean against last-ulp disagreement with the
        // interpolated percentiles when every resample agrees.
        mean: mean.clamp(values[0], values[values.len() - 1]),
        lo: percentile_sorted(&values, alpha),
        hi: percentile_sorted(&values, 1.0 - alpha),
        n_resamples: cfg.n_resamples,
        level: cfg.level,
        redraws,
    })
}

/// More than half of all draws were degenerate.
fn too_degenerate(redraws: usize, attempts: usize) -> bool {
    2 * redraws > attempts
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub ece_bins: usize,
    pub histogram_bins: usize,
    pub bootstrap: BootstrapConfig,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            ece_bins: DEFAULT_ECE_BINS,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub condition: String,
    pub eval_mode: String,
    pub n_entries: usize,
    pub threshold: f64,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub fake_to_real_rate: Option<f64>,
    pub ece: f64,
    pub n_bins: usize,
    pub reliability_bins: Vec<ReliabilityBin>,
    pub per_prompt: BTreeMap<String, PromptRate>,
    pub histograms: Histogram,
    pub cis: BTreeMap<MetricKind, ConfidenceInterval>,
}

/// Every statistic for one score set. Metrics that the data cannot support
/// (e.g. AUC with a single label) are reported as absent.
pub fn build_report(s: &ScoreSet, opts: &ReportOptions) -> Result<MetricsReport> {
    s.validate()?;
    let threshold = opts.bootstrap.threshold;
    let (ece_value, reliability_bins) = ece(s, opts.ece_bins)?;
    let mut cis = BTreeMap::new();
    for metric in MetricKind::ALL {
        match bootstrap_ci(s, metric, &opts.bootstrap) {
            Ok(ci) => {
                cis.insert(metric, ci);
            }
            Err(Error::SingleClass(_)) | Err(Error::NonConvergentResampling { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(MetricsReport {
        condition: s.condition.clone(),
        eval_mode: s.eval_mode.clone(),
        n_entries: s.entries.len(),
        threshold,
        auc: auc(s).ok(),
        accuracy: accuracy(s, threshold),
        fake_to_real_rate: fake_to_real_rate(s, threshold).ok(),
        ece: ece_value,
        n_bins: opts.ece_bins,
        reliability_bins,
        per_prompt: per_prompt_rates(s, threshold),
        histograms: histogram(s, opts.histogram_bins)?,
        cis,
    })
}
