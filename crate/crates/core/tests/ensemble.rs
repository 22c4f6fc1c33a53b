mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use stegdetect::ensemble::{ensemble_train, fld_train, oob_error, Class, EnsembleConfig, EnsembleModel};
use stegdetect::seed;
use stegdetect::store::FeatureTable;

fn predict(model: &EnsembleModel<f64>, t: &FeatureTable<f64>) -> Vec<Class> {
    model.predict_table(t).unwrap().into_iter().map(|p| p.label).collect()
}

#[test]
fn separable_gaussians_are_learned() {
    let (train, y) = two_gaussians(400, 100, 4.0, 1);
    let (test, ty) = two_gaussians(400, 100, 4.0, 2);
    let out = ensemble_train(&train, &y, 7, &EnsembleConfig::default()).unwrap();
    let acc = accuracy(&predict(&out.model, &test), &ty);
    assert!(acc >= 0.99, "held-out accuracy {acc}");
    assert!(out.oob.error <= 0.02);
    assert!(((1.0 - acc) - out.oob.error).abs() <= 0.05);
    assert_eq!(out.in_bag.len(), out.model.n_learners());
    assert!(out.curve.iter().any(|p| p.d_sub == out.model.d_sub && p.l == out.model.n_learners()));
}

#[test]
fn permuted_labels_give_chance_oob() {
    let (train, mut y) = two_gaussians(400, 100, 4.0, 3);
    y.shuffle(&mut seed::rng(5, 0));
    let out = ensemble_train(&train, &y, 7, &EnsembleConfig::default()).unwrap();
    assert!((0.4..=0.6).contains(&out.oob.error), "oob {}", out.oob.error);
}

#[test]
fn oob_tracks_held_out_error_on_overlapping_classes() {
    for s in 0..3u64 {
        let (train, y) = two_gaussians(300, 40, 0.15, 10 + s);
        let (test, ty) = two_gaussians(300, 40, 0.15, 20 + s);
        let out = ensemble_train(&train, &y, s, &EnsembleConfig::default()).unwrap();
        let err = 1.0 - accuracy(&predict(&out.model, &test), &ty);
        assert!((err - out.oob.error).abs() <= 0.05, "held-out {err} vs oob {}", out.oob.error);
    }
}

#[test]
fn oob_recomputes_from_masks() {
    let (train, y) = two_gaussians(100, 20, 0.5, 4);
    let out = ensemble_train(&train, &y, 3, &EnsembleConfig::default()).unwrap();
    let again = oob_error(&out.model, &train, &y, &out.in_bag).unwrap();
    assert_eq!(again, out.oob);
    assert_eq!(again.covered + again.skipped, train.rows());
}

#[test]
fn training_is_independent_of_thread_count() {
    let (train, y) = two_gaussians(150, 30, 0.4, 5);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| ensemble_train(&train, &y, 9, &EnsembleConfig::default()).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert_eq!(a.curve, b.curve);
}

#[test]
fn model_file_roundtrip() {
    let (train, y) = two_gaussians(60, 10, 1.0, 6);
    let out = ensemble_train(&train, &y, 1, &EnsembleConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    out.model.save(&path).unwrap();
    let back = EnsembleModel::<f64>::load(&path).unwrap();
    assert_eq!(back, out.model);
    let mut bytes = out.model.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(EnsembleModel::<f64>::from_bytes(&bytes).is_err());
}

#[test]
fn degenerate_inputs_are_rejected() {
    let (train, y) = two_gaussians(60, 10, 1.0, 6);
    assert!(ensemble_train(&train, &vec![Class::Normal; y.len()], 0, &EnsembleConfig::default()).is_err());
    assert!(ensemble_train(&train, &y[1..], 0, &EnsembleConfig::default()).is_err());
    let (small, sy) = two_gaussians(10, 5, 1.0, 6);
    assert!(ensemble_train(&small, &sy, 0, &EnsembleConfig::default()).is_err());
}

#[test]
fn constant_features_do_not_break_training() {
    let (g, y) = two_gaussians(100, 8, 1.0, 8);
    let mut t = FeatureTable::new("padded", 12);
    for row in g.iter() {
        let mut r = row.to_vec();
        r.extend([0.0, 0.0, 1.0, 1.0]);
        t.push(&r).unwrap();
    }
    let out = ensemble_train(&t, &y, 2, &EnsembleConfig::default()).unwrap();
    assert!(out.model.learners.iter().all(|l| l.w.iter().all(|v| v.is_finite())));
    assert!(out.oob.error < 0.2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn vote_invariant_under_positive_rescaling(seed in 0u64..500, k in 0.01f64..100.0) {
        let (train, y) = two_gaussians(40, 6, 0.8, seed);
        let cols: Vec<usize> = (0..6).collect();
        let l = fld_train(&train, &y, &cols, 1e-10).unwrap();
        prop_assert!(l.w.iter().any(|&v| v != 0.0));
        let mut scaled = l.clone();
        scaled.w.iter_mut().for_each(|v| *v *= k);
        scaled.b *= k;
        for row in train.iter() {
            prop_assert_eq!(l.vote(row), scaled.vote(row));
        }
    }
}
