mod common;

use std::sync::OnceLock;

use common::*;
use proptest::prelude::*;
use stegdetect::attacks::{self, cw_objective, AttackConfig, AttackKind};
use stegdetect::corpus::{corpus_image, corpus_manifest, CorpusParams, GrayImage, Role};
use stegdetect::victim::{train_on, TrainConfig, VictimModel};

struct Fixture {
    model: VictimModel<f64>,
    test: Vec<GrayImage>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let p = CorpusParams {
            n_images: 200,
            size: 64,
            n_classes: 2,
            seed: 11,
        };
        let m = corpus_manifest(&p);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, e) in m.entries.iter().enumerate() {
            let x = corpus_image(&p, i);
            match e.role {
                Role::Train => train.push((x, e.label)),
                Role::Test => test.push(x),
                Role::Val => {}
            }
        }
        let (model, _) = train_on::<f64>(&train, 2, &TrainConfig::default()).unwrap();
        Fixture { model, test }
    })
}

fn linf(a: &GrayImage, b: &GrayImage) -> i32 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (i32::from(x) - i32::from(y)).abs())
        .max()
        .unwrap()
}

#[test]
fn victim_learns_the_corpus() {
    let f = fixture();
    let p = CorpusParams {
        n_images: 200,
        size: 64,
        n_classes: 2,
        seed: 11,
    };
    let m = corpus_manifest(&p);
    let correct = m
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.role == Role::Test)
        .filter(|(i, e)| f.model.predict(&corpus_image(&p, *i)).unwrap() == e.label)
        .count();
    assert!(correct as f64 / f.test.len() as f64 >= 0.9);
}

#[test]
fn input_gradient_matches_naive_backprop() {
    let f = fixture();
    for x in f.test.iter().take(5) {
        let pixels: Vec<f64> = x.to_reals();
        for label in 0..2 {
            let (_, g) = f.model.loss_and_grad_reals(&pixels, label).unwrap();
            let want = victim_grad_oracle(&f.model, &pixels, label);
            let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_abs_diff(&g, &want) <= 1e-10 * scale.max(1e-300));
        }
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let f = fixture();
    for x in f.test.iter().take(3) {
        assert!(finite_difference_error(&f.model, x, 100) <= 1e-4);
    }
}

#[test]
fn igsm_single_step_is_fgsm() {
    let f = fixture();
    for x in &f.test {
        let y = f.model.predict(x).unwrap();
        for eps in [1.0, 2.0, 4.0, 8.0] {
            let a = attacks::fgsm(&f.model, x, y, &AttackConfig::fgsm(eps)).unwrap();
            let b = attacks::igsm(&f.model, x, y, &AttackConfig::igsm(eps, eps, 1)).unwrap();
            assert_eq!(a.adversarial, b.adversarial);
        }
    }
}

#[test]
fn fgsm_moves_every_free_pixel_by_epsilon() {
    let f = fixture();
    let x = &f.test[0];
    let y = f.model.predict(x).unwrap();
    let r = attacks::fgsm(&f.model, x, y, &AttackConfig::fgsm(8.0)).unwrap();
    assert!(r.linf <= 8.0);
    let (_, g) = f.model.loss_and_input_grad(x, y).unwrap();
    for ((&a, &b), &gi) in x.pixels().iter().zip(r.adversarial.pixels()).zip(&g) {
        let want = (f64::from(a) + 8.0 * gi.signum() * f64::from(u8::from(gi != 0.0))).clamp(0.0, 255.0);
        assert_eq!(f64::from(b), want);
    }
}

#[test]
fn fgsm_success_grows_with_epsilon() {
    let f = fixture();
    let rate = |eps: f64| {
        f.test
            .iter()
            .filter(|x| {
                let y = f.model.predict(x).unwrap();
                attacks::fgsm(&f.model, x, y, &AttackConfig::fgsm(eps)).unwrap().success
            })
            .count()
    };
    let (r2, r8, r32) = (rate(2.0), rate(8.0), rate(32.0));
    assert!(r2 <= r8 && r8 <= r32);
    assert!(r32 as f64 >= 0.8 * f.test.len() as f64, "{r32}/{}", f.test.len());
}

#[test]
fn deepfool_succeeds_with_smaller_l2_than_fgsm() {
    let f = fixture();
    let mut df_l2 = Vec::new();
    let mut successes = 0;
    for x in &f.test {
        let y = f.model.predict(x).unwrap();
        let r = attacks::deepfool(&f.model, x, y, &AttackConfig::deepfool(50)).unwrap();
        if r.success {
            successes += 1;
            df_l2.push(r.l2);
        }
    }
    assert!(successes as f64 >= 0.9 * f.test.len() as f64);
    // reference: FGSM successes at the smallest budget that produces any
    let mut fgsm_l2 = Vec::new();
    for eps in 2..=32 {
        for x in &f.test {
            let y = f.model.predict(x).unwrap();
            let r = attacks::fgsm(&f.model, x, y, &AttackConfig::fgsm(f64::from(eps))).unwrap();
            if r.success {
                fgsm_l2.push(r.l2);
            }
        }
        if !fgsm_l2.is_empty() {
            break;
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    assert!(median(&mut df_l2) < median(&mut fgsm_l2));
}

#[test]
fn cw_success_means_nonpositive_objective_after_rounding() {
    let f = fixture();
    let cfg = AttackConfig::cw(vec![0.1, 1.0, 10.0], 0.0, 100);
    let mut successes = 0;
    for x in f.test.iter().take(10) {
        let y = f.model.predict(x).unwrap();
        let r = attacks::cw_l2(&f.model, x, y, &cfg).unwrap();
        let obj: f64 = cw_objective(&f.model, &r.adversarial, y, cfg.mode, cfg.kappa).unwrap();
        assert_eq!(r.success, obj <= 0.0);
        successes += usize::from(r.success);
    }
    assert!(successes >= 9);
}

#[test]
fn targeted_attacks_reach_target() {
    let f = fixture();
    let x = &f.test[1];
    let y = f.model.predict(x).unwrap();
    let t = 1 - y;
    let r = attacks::igsm(&f.model, x, y, &AttackConfig::igsm(32.0, 2.0, 50).targeted(t)).unwrap();
    assert!(r.success);
    assert_eq!(f.model.predict(&r.adversarial).unwrap(), t);
    let r = attacks::cw_l2(&f.model, x, y, &AttackConfig::cw(vec![1.0, 10.0], 0.0, 100).targeted(t)).unwrap();
    assert!(r.success);
    assert!(attacks::deepfool(&f.model, x, y, &AttackConfig::deepfool(10).targeted(t)).is_err());
}

#[test]
fn batch_results_keep_input_order() {
    let f = fixture();
    let items: Vec<(GrayImage, usize)> = f.test.iter().take(6).map(|x| (x.clone(), f.model.predict(x).unwrap())).collect();
    let cfg = AttackConfig::igsm(4.0, 1.0, 5);
    let batch = attacks::attack_batch(AttackKind::Igsm, &f.model, &items, &cfg).unwrap();
    for ((x, y), r) in items.iter().zip(&batch) {
        assert_eq!(attacks::igsm(&f.model, x, *y, &cfg).unwrap(), *r);
    }
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let f = fixture();
    let back = VictimModel::<f64>::from_bytes(&f.model.to_bytes()).unwrap();
    for x in &f.test {
        assert_eq!(back.logits(x).unwrap(), f.model.logits(x).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn linf_budget_always_holds(idx in 0usize..30, eps in 1u32..16, alpha in 0.5f64..4.0, iters in 1usize..8, igsm in any::<bool>()) {
        let f = fixture();
        let x = &f.test[idx % f.test.len()];
        let y = f.model.predict(x).unwrap();
        let eps = f64::from(eps);
        let r = if igsm {
            attacks::igsm(&f.model, x, y, &AttackConfig::igsm(eps, alpha, iters)).unwrap()
        } else {
            attacks::fgsm(&f.model, x, y, &AttackConfig::fgsm(eps)).unwrap()
        };
        prop_assert!(f64::from(linf(x, &r.adversarial)) <= eps);
        prop_assert_eq!(r.linf, f64::from(linf(x, &r.adversarial)));
    }
}
