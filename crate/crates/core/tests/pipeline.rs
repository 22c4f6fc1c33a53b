mod common;

use std::fs;
use std::path::Path;

use common::*;
use stegdetect::ensemble::{ensemble_train, Class, EnsembleConfig};
use stegdetect::error::Error;
use stegdetect::pipeline::{self, evaluate, run_experiment, CorpusSection, ExperimentConfig, FeatureKind};
use stegdetect::store::FeatureTable;

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 4,
        corpus: CorpusSection {
            n_images: 80,
            size: 64,
            n_classes: 2,
        },
        epsilons: vec![4.0, 8.0],
        features: vec![FeatureKind::Spam, FeatureKind::Espam],
        ..Default::default()
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn rerun_reuses_every_stage_and_matches_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let first = run_experiment(&cfg, dir.path()).unwrap();
    assert!(first.stages.iter().all(|s| !s.cached));
    let before = read_all(dir.path());
    let second = run_experiment(&cfg, dir.path()).unwrap();
    assert!(second.stages.iter().all(|s| s.cached));
    assert_eq!(first.report, second.report);
    assert_eq!(before, read_all(dir.path()));

    assert_eq!(first.report.rows.len(), 4);
    let n_test = stegdetect::corpus::corpus_manifest(&cfg.corpus_params()).count(stegdetect::corpus::Role::Test);
    for r in &first.report.rows {
        let c = r.confusion;
        assert_eq!(c.total(), 2 * n_test);
        assert_eq!(c.tn + c.fp, c.tp + c.fn_);
        assert_eq!(r.normal_accuracy, c.tn as f64 / (c.tn + c.fp) as f64);
        assert_eq!(r.adversarial_accuracy, c.tp as f64 / (c.tp + c.fn_) as f64);
        assert!((0.0..=1.0).contains(&r.average));
    }
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let txt = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(txt.contains("not reproducible"));
}

#[test]
fn changed_stage_inputs_only_rerun_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.features = vec![FeatureKind::Spam];
    cfg.epsilons = vec![8.0];
    run_experiment(&cfg, dir.path()).unwrap();
    cfg.epsilons = vec![6.0];
    let out = run_experiment(&cfg, dir.path()).unwrap();
    let cached: Vec<(&str, bool)> = out.stages.iter().map(|s| (s.stage.as_str(), s.cached)).collect();
    assert_eq!(
        cached,
        vec![
            ("corpus", true),
            ("victim", true),
            ("features-spam-clean", true),
            ("attack-fgsm-eps6", false),
            ("features-spam-fgsm-eps6", false),
            ("detector-spam-fgsm-eps6", false),
        ]
    );
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.features = vec![FeatureKind::Spam];
    cfg.epsilons = vec![8.0];
    // too few rows per class for the detector
    cfg.corpus.n_images = 24;
    let err = run_experiment(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "detector", .. }), "{err}");
}

#[test]
fn evaluate_contracts() {
    let (train, y) = two_gaussians(100, 10, 3.0, 1);
    let out = ensemble_train(&train, &y, 0, &EnsembleConfig::default()).unwrap();
    let c = evaluate(&out.model, &train, &y).unwrap();
    assert!(c.average() >= 0.99);

    let normals: Vec<Vec<f64>> = train.iter().zip(&y).filter(|(_, c)| **c == Class::Normal).map(|(r, _)| r.to_vec()).collect();
    let t = FeatureTable::from_rows("gauss", 10, &normals).unwrap();
    let err = evaluate(&out.model, &t, &vec![Class::Normal; normals.len()]).unwrap_err();
    assert!(matches!(err, Error::SingleClass(_)));
    let err = evaluate(&out.model, &t, &vec![Class::Adversarial; normals.len()]).unwrap_err();
    assert!(err.to_string().contains("single-class evaluation"));
    let empty = FeatureTable::new("gauss", 10);
    assert!(evaluate(&out.model, &empty, &[]).is_err());

    let other = FeatureTable::from_rows("spam:T3:o2", 10, &normals).unwrap();
    assert!(matches!(evaluate(&out.model, &other, &vec![Class::Normal; normals.len()]), Err(Error::DescriptorMismatch { .. })));
}

#[test]
fn detector_bank_fires_if_any_member_fires() {
    let (train, y) = two_gaussians(100, 10, 3.0, 2);
    let a = ensemble_train(&train, &y, 0, &EnsembleConfig::default()).unwrap().model;
    let flipped: Vec<Class> = y
        .iter()
        .map(|c| if *c == Class::Normal { Class::Adversarial } else { Class::Normal })
        .collect();
    let b = ensemble_train(&train, &flipped, 0, &EnsembleConfig::default()).unwrap().model;
    let flags = pipeline::bank_predict(&[a.clone(), b], &[train.clone(), train.clone()]).unwrap();
    assert!(flags.iter().filter(|c| **c == Class::Adversarial).count() as f64 >= 0.95 * flags.len() as f64);
    let single = pipeline::bank_predict(std::slice::from_ref(&a), std::slice::from_ref(&train)).unwrap();
    assert_eq!(single, a.predict_table(&train).unwrap().into_iter().map(|p| p.label).collect::<Vec<_>>());
}

#[test]
fn labels_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        pipeline::RowLabel {
            path: "images/a.pgm".into(),
            class: Class::Normal,
            role: stegdetect::corpus::Role::Train,
        },
        pipeline::RowLabel {
            path: "images/a.adv-fgsm-eps8.pgm".into(),
            class: Class::Adversarial,
            role: stegdetect::corpus::Role::Test,
        },
    ];
    let p = dir.path().join("labels.csv");
    pipeline::write_labels(&p, &rows).unwrap();
    assert_eq!(pipeline::read_labels(&p).unwrap(), rows);
}
