use std::collections::HashMap;

use deploygap_core::attack::{
    evaluate_condition, pgd_eot_per_image, universal_train, AttackConfig, Artifacts, Condition, EvalConfig, EvalMode,
    UniversalConfig,
};
use deploygap_core::dataset::{generate_toy_dataset, toy_image, toy_signature, Label, Manifest, Split, ToySpec};
use deploygap_core::detector::{CnnDetector, Detector};
use deploygap_core::detector::{Cnn, CnnArch};
use deploygap_core::perturb::{load_artifact, save_artifact};
use deploygap_core::transforms::TransformDistribution;
use deploygap_core::Error;

fn small_cnn(size: usize, seed: u64) -> CnnDetector {
    CnnDetector {
        identifier: "small".into(),
        net: Cnn::new(
            CnnArch {
                input_size: size,
                channels: vec![4, 8],
            },
            seed,
        )
        .unwrap(),
    }
}

fn synthetic(seed: u64) -> deploygap_core::ImageArray {
    toy_image(seed, 32, Some(&toy_signature(32, 0.05, 0.0)))
}

fn small_cfg(iterations: usize) -> AttackConfig {
    AttackConfig {
        iterations,
        eot_samples: 2,
        seed: 9,
        ..AttackConfig::default()
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn single_image_universal_run_reproduces_per_image_trajectory() {
    let d = small_cnn(32, 3);
    let x = synthetic(11);
    for (epochs, iterations) in [(6, 6), (13, 13)] {
        let cfg = AttackConfig {
            universal: UniversalConfig { epochs, batch_size: 1 },
            ..small_cfg(iterations)
        };
        let (pa, pt) = pgd_eot_per_image(&x, "x", &d, &cfg).unwrap();
        let (ua, ut) = universal_train(std::slice::from_ref(&x), &d, &cfg).unwrap();
        assert_eq!(pt.len(), iterations);
        assert_eq!(ut.len(), epochs);
        assert_eq!(bits(&pt.loss), bits(&ut.loss));
        assert_eq!(bits(&pt.target_probability), bits(&ut.target_probability));
        assert!(pa.delta.iter().zip(&ua.delta).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(pa.delta.iter().any(|&v| v != 0.0));
    }
}

#[test]
fn zero_head_detector_never_moves_delta() {
    let mut d = small_cnn(32, 4);
    d.net.zero_head();
    let images: Vec<_> = (0..3).map(synthetic).collect();
    let cfg = AttackConfig {
        universal: UniversalConfig { epochs: 2, batch_size: 2 },
        ..small_cfg(5)
    };
    let (a, trace) = universal_train(&images, &d, &cfg).unwrap();
    assert!(a.delta.iter().all(|&v| v == 0.0));
    assert_eq!(trace.len(), 4);
    let (p, pt) = pgd_eot_per_image(&images[0], "x", &d, &cfg).unwrap();
    assert!(p.delta.iter().all(|&v| v == 0.0));
    assert!(pt.loss.iter().all(|&l| (l - std::f64::consts::LN_2).abs() < 1e-12));
}

#[test]
fn attack_is_deterministic_and_feasible() {
    let d = small_cnn(32, 5);
    let x = synthetic(12);
    let cfg = small_cfg(8);
    let (a, ta) = pgd_eot_per_image(&x, "x", &d, &cfg).unwrap();
    let (b, tb) = pgd_eot_per_image(&x, "x", &d, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert!(a.max_abs() <= 16.0 / 255.0);
    assert!(ta.best_loss.windows(2).all(|w| w[1] <= w[0]));
    let dir = tempfile::tempdir().unwrap();
    save_artifact(&a, dir.path()).unwrap();
    assert_eq!(load_artifact(dir.path()).unwrap(), a);

    let other = AttackConfig { seed: 10, ..cfg };
    assert_ne!(pgd_eot_per_image(&x, "x", &d, &other).unwrap().1, ta);
}

fn toy(dir: &std::path::Path) -> Manifest {
    let spec = ToySpec {
        image_size: 32,
        ..ToySpec::new(10, 2, 1)
    };
    generate_toy_dataset(dir, spec).unwrap()
}

fn per_image_map(m: &Manifest, d: &CnnDetector, cfg: &AttackConfig) -> HashMap<String, deploygap_core::perturb::PerturbationArtifact> {
    m.split(Split::Test)
        .filter(|r| r.label == Label::Synthetic)
        .map(|r| {
            let (a, _) = pgd_eot_per_image(&m.load_record(r).unwrap(), &r.image_path, d, cfg).unwrap();
            (r.image_path.clone(), a)
        })
        .collect()
}

#[test]
fn real_images_are_untouched_by_attacked_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let d = small_cnn(32, 6);
    let map = per_image_map(&m, &d, &small_cfg(3));
    let cfg = EvalConfig::default();
    let clean = evaluate_condition(&m, &d, Condition::Clean, Artifacts::None, EvalMode::Pristine, &cfg).unwrap();
    let attacked =
        evaluate_condition(&m, &d, Condition::PerImage, Artifacts::PerImage(&map), EvalMode::Pristine, &cfg).unwrap();
    assert_eq!(attacked.condition, "per_image");
    let mut moved = 0;
    for (c, a) in clean.entries.iter().zip(&attacked.entries) {
        assert_eq!(c.sample_id, a.sample_id);
        if c.label == Label::Real {
            assert_eq!(c.score.to_bits(), a.score.to_bits());
        } else if c.score != a.score {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn identity_transforms_make_both_modes_agree() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let d = small_cnn(32, 7);
    let cfg = EvalConfig {
        transform_dist: TransformDistribution::identity_only(),
        ..EvalConfig::default()
    };
    let p = evaluate_condition(&m, &d, Condition::Clean, Artifacts::None, EvalMode::Pristine, &cfg).unwrap();
    let q = evaluate_condition(&m, &d, Condition::Clean, Artifacts::None, EvalMode::Deployment, &cfg).unwrap();
    for (a, b) in p.entries.iter().zip(&q.entries) {
        assert!((a.score - b.score).abs() < 1e-15);
    }
}

#[test]
fn deployment_scores_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let d = small_cnn(32, 8);
    let cfg = EvalConfig {
        n_draws: 1,
        seed: 3,
        ..EvalConfig::default()
    };
    let run = || evaluate_condition(&m, &d, Condition::Clean, Artifacts::None, EvalMode::Deployment, &cfg).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn missing_per_image_artifact_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let d = small_cnn(32, 9);
    let mut map = per_image_map(&m, &d, &small_cfg(1));
    let victim = map.keys().min().unwrap().clone();
    map.remove(&victim);
    let r = evaluate_condition(
        &m,
        &d,
        Condition::PerImage,
        Artifacts::PerImage(&map),
        EvalMode::Pristine,
        &EvalConfig::default(),
    );
    assert!(matches!(r, Err(Error::MissingArtifact(id)) if id == victim));
}

#[test]
fn zero_epsilon_leaves_scores_unchanged() {
    let d = small_cnn(32, 10);
    let x = synthetic(13);
    let cfg = AttackConfig {
        epsilon: 0.0,
        ..small_cfg(3)
    };
    let (a, _) = pgd_eot_per_image(&x, "x", &d, &cfg).unwrap();
    assert!(a.delta.iter().all(|&v| v == 0.0));
    let y = deploygap_core::perturb::apply_perturbation(&x, &a).unwrap();
    assert_eq!(d.probability(&y).unwrap(), d.probability(&x).unwrap());
}
