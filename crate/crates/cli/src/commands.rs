use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use deploygap_core::attack::{
    attack_test_split, evaluate_condition, universal_from_manifest, Artifacts, AttackTrace, Condition, EvalMode,
};
use deploygap_core::dataset::{
    generate_toy_dataset, load_manifest, parse_manifest, validate_manifest, Manifest, Split,
};
use deploygap_core::detector::probe::{align_embeddings, read_embeddings, train_linear_probe};
use deploygap_core::detector::{
    load_checkpoint, save_cnn_checkpoint, save_probe_checkpoint, train_cnn_detector, LoadedDetector, ScoredPath,
    TrainMetrics,
};
use deploygap_core::metrics::{build_report, ScoreEntry, ScoreSet};
use deploygap_core::perturb::{load_artifact, save_artifact, PerturbationArtifact, Regime};
use deploygap_core::{json, Error};
use serde::{Deserialize, Serialize};

use crate::config::{write_run_record, DetectorKind, Pair, RunConfig};
use crate::report;
use crate::{Failure, Stage, StageExt};

pub const INDEX_FILE: &str = "index.json";
pub const TRACE_FILE: &str = "trace.json";
pub const METRICS_FILE: &str = "metrics.json";

fn required<'a>(p: &'a Option<PathBuf>, what: &str, stage: Stage) -> Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| anyhow!("missing required path `{what}` (flag or config key paths.{what})"))
        .stage(stage)
}

fn manifest(cfg: &RunConfig, stage: Stage) -> Result<Manifest, Failure> {
    let path = required(&cfg.paths.manifest, "manifest", stage)?;
    load_manifest(path).stage(stage)
}

pub fn data_toy(cfg: &RunConfig) -> Result<(), Failure> {
    let out = required(&cfg.paths.out, "out", Stage::Data)?;
    let m = generate_toy_dataset(out, cfg.data.toy_spec()).stage(Stage::Data)?;
    write_run_record(out, "data toy", cfg).stage(Stage::Data)?;
    println!(
        "wrote {} records ({} train, {} test) to {}",
        m.records.len(),
        m.split(Split::Train).count(),
        m.split(Split::Test).count(),
        out.display()
    );
    Ok(())
}

pub fn data_validate(cfg: &RunConfig) -> Result<(), Failure> {
    let path = required(&cfg.paths.manifest, "manifest", Stage::Data)?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .stage(Stage::Data)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let m = parse_manifest(&text, root).stage(Stage::Data)?;
    let mut problems: Vec<String> = validate_manifest(&m).iter().map(ToString::to_string).collect();
    for (i, r) in m.records.iter().enumerate() {
        if !m.resolve(r).is_file() {
            problems.push(format!("record {i}: image {} not found", r.image_path));
        }
    }
    if let Some(out) = &cfg.paths.out {
        write_run_record(out, "data validate", cfg).stage(Stage::Data)?;
    }
    if problems.is_empty() {
        println!("{}: {} records, no violations", path.display(), m.records.len());
        return Ok(());
    }
    for p in &problems {
        println!("violation: {p}");
    }
    Err(anyhow!("{} violation(s) in {}", problems.len(), path.display())).stage(Stage::Data)
}

fn clean_scores(m: &Manifest, validation: &[ScoredPath], seed: u64) -> anyhow::Result<ScoreSet> {
    let by_path: HashMap<&str, f64> = validation.iter().map(|v| (v.image_path.as_str(), v.score)).collect();
    let entries = m
        .split(Split::Test)
        .map(|r| {
            Ok(ScoreEntry {
                sample_id: r.image_path.clone(),
                label: r.label,
                prompt_id: r.prompt_id.clone(),
                score: *by_path
                    .get(r.image_path.as_str())
                    .ok_or_else(|| anyhow!("no validation score for {}", r.image_path))?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(ScoreSet {
        entries,
        condition: Condition::Clean.as_str().into(),
        eval_mode: EvalMode::Pristine.as_str().into(),
        seed,
    })
}

#[derive(Serialize)]
struct NonConvergenceTrace<'a> {
    accuracy: f64,
    loss_trace: &'a [f64],
}

pub fn detector_train(cfg: &RunConfig) -> Result<(), Failure> {
    let st = Stage::Training;
    let out = required(&cfg.paths.out, "out", st)?;
    let m = manifest(cfg, st)?;
    fs::create_dir_all(out).stage(st)?;
    let result = match cfg.train.kind {
        DetectorKind::Cnn => train_cnn_detector(&m, &cfg.train.cnn).and_then(|fit| {
            save_cnn_checkpoint(&fit, out)?;
            Ok((fit.detector.identifier.clone(), fit.metrics))
        }),
        DetectorKind::Probe => {
            let path = required(&cfg.paths.embeddings, "embeddings", st)?;
            let rows = read_embeddings(path).stage(Stage::Data)?;
            train_linear_probe(&m, &rows, &cfg.train.probe).and_then(|fit| {
                let hash = json::config_hash(&cfg.train.probe)?;
                let identifier = format!("probe-{}", &hash[..12]);
                let aligned = align_embeddings(&m, &rows)?;
                let validation = m
                    .records
                    .iter()
                    .zip(&aligned)
                    .filter(|(r, _)| r.split == Split::Test)
                    .map(|(r, e)| {
                        Ok(ScoredPath {
                            image_path: r.image_path.clone(),
                            score: fit.probe.score_embedding(e)?,
                        })
                    })
                    .collect::<deploygap_core::Result<Vec<_>>>()?;
                let metrics = TrainMetrics {
                    epoch_loss: fit.loss_trace,
                    train_accuracy: fit.train_accuracy,
                    validation,
                };
                save_probe_checkpoint(&fit.probe, &identifier, &hash, &metrics, out)?;
                Ok((identifier, metrics))
            })
        }
    };
    let (identifier, metrics) = match result {
        Err(Error::NonConvergence { accuracy, loss_trace }) => {
            let trace = NonConvergenceTrace {
                accuracy,
                loss_trace: &loss_trace,
            };
            json::write_sorted(&out.join(TRACE_FILE), &trace).stage(st)?;
            return Err(Error::NonConvergence { accuracy, loss_trace })
                .with_context(|| format!("loss trace written to {}", out.join(TRACE_FILE).display()))
                .stage(st);
        }
        other => other.stage(st)?,
    };
    let seed = match cfg.train.kind {
        DetectorKind::Cnn => cfg.train.cnn.seed,
        DetectorKind::Probe => 0,
    };
    let scores = clean_scores(&m, &metrics.validation, seed).stage(st)?;
    let rep = build_report(&scores, &cfg.report.options()).stage(st)?;
    json::write_sorted(&out.join(METRICS_FILE), &rep).stage(st)?;
    write_run_record(out, "detector train", cfg).stage(st)?;
    println!(
        "{identifier}: train accuracy {:.4}, clean test AUC {}, fake->real {}",
        metrics.train_accuracy,
        fmt_opt(rep.auc),
        fmt_opt(rep.fake_to_real_rate)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub source_image_id: String,
    pub dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub regime: Regime,
    pub artifacts: Vec<IndexEntry>,
}

fn artifact_dir_name(i: usize, id: &str) -> String {
    let clean: String = id.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    format!("{i:04}_{clean}")
}

fn write_artifact(a: &PerturbationArtifact, trace: &AttackTrace, dir: &Path) -> anyhow::Result<()> {
    save_artifact(a, dir)?;
    json::write_sorted(&dir.join(TRACE_FILE), trace)?;
    // Round trip through the validating loader; any mismatch is a bug.
    let back = load_artifact(dir)?;
    if back.delta != a.delta {
        return Err(anyhow!("artifact {} did not round-trip", dir.display()));
    }
    Ok(())
}

fn load_pixel_detector(cfg: &RunConfig, st: Stage) -> Result<deploygap_core::detector::CnnDetector, Failure> {
    let path = required(&cfg.paths.detector, "detector", st)?;
    match load_checkpoint(path).stage(st)?.1 {
        LoadedDetector::Cnn(d) => Ok(d),
        LoadedDetector::Probe { identifier, .. } => Err(Error::NonDifferentiableDetector(format!(
            "{identifier}: the linear probe scores embeddings, not pixels"
        )))
        .stage(st),
    }
}

pub fn attack(cfg: &RunConfig, universal: bool) -> Result<(), Failure> {
    let st = Stage::Artifact;
    let out = required(&cfg.paths.out, "out", st)?;
    cfg.attack.validate().stage(st)?;
    let m = manifest(cfg, st)?;
    let det = load_pixel_detector(cfg, st)?;
    fs::create_dir_all(out).stage(st)?;
    if universal {
        let (a, trace) = universal_from_manifest(&m, &det, &cfg.attack).stage(st)?;
        write_artifact(&a, &trace, out).stage(st)?;
        write_run_record(out, "attack universal", cfg).stage(st)?;
        println!(
            "universal artifact: max |delta| {:.6}, final mean real-probability {:.4}",
            a.max_abs(),
            trace.target_probability.last().copied().unwrap_or(f64::NAN)
        );
        return Ok(());
    }
    let results = attack_test_split(&m, &det, &cfg.attack).stage(st)?;
    let mut index = ArtifactIndex {
        regime: Regime::PerImage,
        artifacts: Vec::with_capacity(results.len()),
    };
    let mut final_p = 0.0;
    for (i, (a, trace)) in results.iter().enumerate() {
        let id = a.source_image_id.clone().unwrap_or_default();
        let name = artifact_dir_name(i, &id);
        write_artifact(a, trace, &out.join(&name)).stage(st)?;
        final_p += trace.target_probability.last().copied().unwrap_or(0.0);
        index.artifacts.push(IndexEntry {
            source_image_id: id,
            dir: name,
        });
    }
    json::write_sorted(&out.join(INDEX_FILE), &index).stage(st)?;
    write_run_record(out, "attack per-image", cfg).stage(st)?;
    println!(
        "{} per-image artifacts in {}; mean final real-probability {:.4}",
        results.len(),
        out.display(),
        final_p / results.len().max(1) as f64
    );
    Ok(())
}

pub fn load_per_image(dir: &Path) -> deploygap_core::Result<HashMap<String, PerturbationArtifact>> {
    let index_path = dir.join(INDEX_FILE);
    if !index_path.is_file() {
        return Err(Error::MissingArtifact(index_path.display().to_string()));
    }
    let index: ArtifactIndex = json::read(&index_path)?;
    index
        .artifacts
        .iter()
        .map(|e| {
            let p = dir.join(&e.dir);
            if !p.is_dir() {
                return Err(Error::MissingArtifact(p.display().to_string()));
            }
            Ok((e.source_image_id.clone(), load_artifact(&p)?))
        })
        .collect()
}

fn load_universal(dir: &Path) -> deploygap_core::Result<PerturbationArtifact> {
    if !dir.join(deploygap_core::perturb::META_FILE).is_file() {
        return Err(Error::MissingArtifact(dir.display().to_string()));
    }
    load_artifact(dir)
}

pub fn scores_file_name(p: &Pair) -> String {
    format!("scores_{}_{}.jsonl", p.condition.as_str(), p.eval_mode.as_str())
}

pub fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let st = Stage::Evaluation;
    let out = required(&cfg.paths.out, "out", st)?;
    let m = manifest(cfg, st)?;
    let det = load_pixel_detector(cfg, st)?;
    let mut pairs = cfg.eval.pairs.clone();
    if pairs.is_empty() {
        let mut conditions = vec![Condition::Clean];
        if cfg.paths.per_image_artifacts.is_some() {
            conditions.push(Condition::PerImage);
        }
        if cfg.paths.universal_artifact.is_some() {
            conditions.push(Condition::Universal);
        }
        for condition in conditions {
            for eval_mode in [EvalMode::Pristine, EvalMode::Deployment] {
                pairs.push(Pair { condition, eval_mode });
            }
        }
    }
    let needs = |c: Condition| pairs.iter().any(|p| p.condition == c);
    let missing = |what: &str| Error::MissingArtifact(format!("no {what} artifacts given (paths.{what}_artifact(s))"));
    let per_image = if needs(Condition::PerImage) {
        let dir = cfg.paths.per_image_artifacts.as_deref().ok_or_else(|| missing("per_image")).stage(st)?;
        Some(load_per_image(dir).stage(st)?)
    } else {
        None
    };
    let universal = if needs(Condition::Universal) {
        let dir = cfg.paths.universal_artifact.as_deref().ok_or_else(|| missing("universal")).stage(st)?;
        Some(load_universal(dir).stage(st)?)
    } else {
        None
    };
    fs::create_dir_all(out).stage(st)?;
    let ecfg = cfg.eval.eval_config();
    for p in &pairs {
        let artifacts = match p.condition {
            Condition::Clean => Artifacts::None,
            Condition::PerImage => Artifacts::PerImage(per_image.as_ref().expect("loaded above")),
            Condition::Universal => Artifacts::Universal(universal.as_ref().expect("loaded above")),
        };
        let s = evaluate_condition(&m, &det, p.condition, artifacts, p.eval_mode, &ecfg).stage(st)?;
        let path = out.join(scores_file_name(p));
        s.save(&path).stage(st)?;
        println!(
            "{:>9} / {:<10} AUC {}  fake->real {}  -> {}",
            p.condition.as_str(),
            p.eval_mode.as_str(),
            fmt_opt(deploygap_core::metrics::auc(&s).ok()),
            fmt_opt(deploygap_core::metrics::fake_to_real_rate(&s, 0.5).ok()),
            path.display()
        );
    }
    write_run_record(out, "eval", cfg).stage(st)?;
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<(), Failure> {
    let st = Stage::Report;
    let out = required(&cfg.paths.out, "out", st)?;
    if cfg.paths.scores.is_empty() {
        return Err(anyhow!("no ScoreSet files given (--scores or paths.scores)")).stage(st);
    }
    let opts = cfg.report.options();
    let mut reports = Vec::new();
    let mut taken = BTreeMap::new();
    fs::create_dir_all(out).stage(st)?;
    for path in &cfg.paths.scores {
        let s = ScoreSet::load(path)
            .with_context(|| format!("reading ScoreSet {}", path.display()))
            .stage(st)?;
        let rep = build_report(&s, &opts).stage(st)?;
        let name = report::set_dir_name(&rep, &mut taken);
        report::write_set(&rep, &out.join(&name), cfg.report.figures).stage(st)?;
        reports.push((name, rep));
    }
    let cmp = report::compare(&reports);
    report::write_comparison(&cmp, out).stage(st)?;
    if cfg.report.figures {
        report::write_figures(out, &[("comparison.svg", report::comparison_svg(&cmp))]);
    }
    write_run_record(out, "report", cfg).stage(st)?;
    println!("{:<10} {:<11} {:>7} {:>9} {:>11} {:>7}", "condition", "eval_mode", "AUC", "accuracy", "fake->real", "ECE");
    for t in &cmp.table {
        println!(
            "{:<10} {:<11} {:>7} {:>9.4} {:>11} {:>7.4}",
            t.condition,
            t.eval_mode,
            fmt_opt(t.auc),
            t.accuracy,
            fmt_opt(t.fake_to_real_rate),
            t.ece
        );
    }
    Ok(())
}
