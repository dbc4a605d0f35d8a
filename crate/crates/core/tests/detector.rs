use std::path::PathBuf;

use deploygap_core::dataset::{generate_toy_dataset, Label, Manifest, SampleRecord, Split, ToySpec};
use deploygap_core::detector::probe::train_linear_probe;
use deploygap_core::detector::{
    load_checkpoint, load_cnn_checkpoint, save_cnn_checkpoint, save_probe_checkpoint, score, train_cnn_detector,
    Detector, EmbeddingRow, LoadedDetector, ProbeConfig, TrainConfig, TrainMetrics,
};
use deploygap_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn embedding_manifest(n_per_class: usize) -> Manifest {
    let mut records = Vec::new();
    for label in [Label::Real, Label::Synthetic] {
        for k in 0..n_per_class {
            records.push(SampleRecord {
                image_path: format!("{}_{k}.png", label.as_str()),
                label,
                prompt_id: label.is_synthetic().then(|| "p".into()),
                seed: None,
                split: if k % 10 < 7 { Split::Train } else { Split::Test },
            });
        }
    }
    Manifest {
        name: "blobs".into(),
        image_size: 224,
        created: "2024-01-01T00:00:00Z".into(),
        records,
        root: PathBuf::from("."),
    }
}

/// Two isotropic Gaussian blobs, centres 6σ apart along the first axis.
fn blob_rows(m: &Manifest, dim: usize, seed: u64) -> Vec<EmbeddingRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    m.records
        .iter()
        .map(|r| {
            let mut e: Vec<f64> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
            e[0] += if r.label.is_synthetic() { 3.0 } else { -3.0 };
            EmbeddingRow {
                image_path: r.image_path.clone(),
                embedding: e,
            }
        })
        .collect()
}

#[test]
fn probe_separates_gaussian_blobs() {
    let m = embedding_manifest(100);
    let rows = blob_rows(&m, 16, 1);
    let fit = train_linear_probe(&m, &rows, &ProbeConfig::default()).unwrap();
    let test: Vec<(&SampleRecord, &EmbeddingRow)> =
        m.records.iter().zip(&rows).filter(|(r, _)| r.split == Split::Test).collect();
    let correct = test
        .iter()
        .filter(|(r, e)| (fit.probe.score_embedding(&e.embedding).unwrap() >= 0.5) == r.label.is_synthetic())
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.99, "test accuracy {acc}");
}

#[test]
fn probe_without_signal_does_not_converge() {
    let m = embedding_manifest(20);
    let rows: Vec<EmbeddingRow> = m
        .records
        .iter()
        .map(|r| EmbeddingRow {
            image_path: r.image_path.clone(),
            embedding: vec![0.25; 4],
        })
        .collect();
    match train_linear_probe(&m, &rows, &ProbeConfig::default()) {
        Err(Error::NonConvergence { accuracy, loss_trace }) => {
            assert_eq!(accuracy, 0.5);
            assert!(!loss_trace.is_empty());
        }
        other => panic!("expected NonConvergence, got {:?}", other.map(|f| f.train_accuracy)),
    }
}

#[test]
fn permuted_rows_are_an_alignment_error() {
    let m = embedding_manifest(10);
    let mut rows = blob_rows(&m, 4, 2);
    rows.swap(3, 11);
    assert!(matches!(
        train_linear_probe(&m, &rows, &ProbeConfig::default()),
        Err(Error::Alignment { index: 3, .. })
    ));
}

#[test]
fn probe_checkpoint_round_trip() {
    let m = embedding_manifest(30);
    let rows = blob_rows(&m, 8, 3);
    let fit = train_linear_probe(&m, &rows, &ProbeConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let metrics = TrainMetrics {
        epoch_loss: fit.loss_trace.clone(),
        train_accuracy: fit.train_accuracy,
        validation: vec![],
    };
    save_probe_checkpoint(&fit.probe, "probe", "abc", &metrics, dir.path()).unwrap();
    let (meta, loaded) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(meta.train_metrics, metrics);
    let LoadedDetector::Probe { probe, .. } = loaded else {
        panic!("expected a probe");
    };
    assert_eq!(probe, fit.probe);
    // A probe has no pixel gradient and cannot drive an attack.
    assert!(matches!(load_cnn_checkpoint(dir.path()), Err(Error::NonDifferentiableDetector(_))));
}

fn small_toy(dir: &std::path::Path) -> Manifest {
    let spec = ToySpec {
        image_size: 32,
        signature_amplitude: 0.1,
        ..ToySpec::new(20, 2, 0)
    };
    generate_toy_dataset(dir, spec).unwrap()
}

fn small_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        batch_size: 8,
        learning_rate: 1e-2,
        augment_probability: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn cnn_checkpoint_reproduces_validation_scores() {
    let data = tempfile::tempdir().unwrap();
    let m = small_toy(data.path());
    let fit = train_cnn_detector(&m, &small_train_config()).unwrap();
    assert!(fit.metrics.train_accuracy >= 0.95, "train accuracy {}", fit.metrics.train_accuracy);

    let ckpt = tempfile::tempdir().unwrap();
    save_cnn_checkpoint(&fit, ckpt.path()).unwrap();
    let loaded = load_cnn_checkpoint(ckpt.path()).unwrap();
    assert_eq!(loaded.net.params(), fit.detector.net.params());
    assert_eq!(loaded.identifier(), fit.detector.identifier());
    for v in &fit.metrics.validation {
        let x = deploygap_core::dataset::load_image(&m.root.join(&v.image_path), m.image_size).unwrap();
        let s = score(&loaded, &[x]).unwrap()[0];
        assert!((s - v.score).abs() <= 1e-6);
        assert!((0.0..=1.0).contains(&s));
    }
}

#[test]
fn cnn_training_is_deterministic() {
    let data = tempfile::tempdir().unwrap();
    let m = small_toy(data.path());
    let cfg = TrainConfig {
        epochs: 2,
        augment_probability: 0.5,
        ..small_train_config()
    };
    let run = || match train_cnn_detector(&m, &cfg) {
        Ok(fit) => fit.metrics.epoch_loss,
        Err(Error::NonConvergence { loss_trace, .. }) => loss_trace,
        Err(e) => panic!("{e}"),
    };
    let a = run();
    assert_eq!(a.len(), 2);
    assert_eq!(a, run());
}

#[test]
fn untrained_cnn_is_reported_as_non_converged() {
    let data = tempfile::tempdir().unwrap();
    let m = small_toy(data.path());
    let cfg = TrainConfig {
        epochs: 0,
        ..small_train_config()
    };
    match train_cnn_detector(&m, &cfg) {
        Err(Error::NonConvergence { accuracy, loss_trace }) => {
            assert!(accuracy < 0.8);
            assert!(loss_trace.is_empty());
        }
        Ok(fit) => panic!("untrained network reached accuracy {}", fit.metrics.train_accuracy),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn training_needs_both_labels() {
    let data = tempfile::tempdir().unwrap();
    let mut m = small_toy(data.path());
    m.records.retain(|r| r.label == Label::Real || r.split == Split::Test);
    assert!(matches!(
        train_cnn_detector(&m, &small_train_config()),
        Err(Error::InsufficientData(_))
    ));
}
