mod common;

use common::*;
use proptest::prelude::*;
use stegdetect::corpus::GrayImage;
use stegdetect::grid::Grid;
use stegdetect::mpm::ProbMap;
use stegdetect::richmodel::{self, cooc4, quantize_truncate, srm_features, esrm_features, RichModelConfig, ScanDirection};
use stegdetect::spam::{espam_features, spam_features, MarkovOrder, SpamConfig};

fn prob_map(w: &[Vec<f64>]) -> ProbMap<f64> {
    let (h, wd) = (w.len(), w[0].len());
    ProbMap::new(Grid::from_vec(wd, h, w.concat()).unwrap()).unwrap()
}

#[test]
fn spam_matches_enumeration_oracle() {
    for trial in 0..200u64 {
        let x = if trial % 2 == 0 { random_image(8, 8, trial) } else { smooth_image(8, 8, trial) };
        for order in [MarkovOrder::First, MarkovOrder::Second] {
            let cfg = SpamConfig { t: 1, order };
            let got = spam_features::<f64>(&x, &cfg).unwrap().values;
            let want = spam_oracle(&x, 1, order.value(), None);
            assert!(max_abs_diff(&got, &want) <= 1e-12, "trial {trial} order {order:?}");
        }
    }
}

#[test]
fn spam_default_matches_oracle_on_larger_images() {
    for trial in 0..5u64 {
        let x = smooth_image(20, 17, trial);
        let got = spam_features::<f64>(&x, &SpamConfig::default()).unwrap().values;
        assert_eq!(got.len(), 686);
        assert!(max_abs_diff(&got, &spam_oracle(&x, 3, 2, None)) <= 1e-12);
    }
}

#[test]
fn espam_matches_weighted_oracle() {
    for trial in 0..50u64 {
        let x = smooth_image(9, 8, trial);
        let w = random_weights(9, 8, trial);
        for order in [MarkovOrder::First, MarkovOrder::Second] {
            let cfg = SpamConfig { t: 2, order };
            let got = espam_features(&x, &prob_map(&w), &cfg).unwrap().values;
            let want = spam_oracle(&x, 2, order.value(), Some(&w));
            assert!(max_abs_diff(&got, &want) <= 1e-12, "trial {trial}");
        }
    }
}

#[test]
fn srm_residuals_match_term_by_term_oracle() {
    let cfg = RichModelConfig::default();
    for trial in 0..200u64 {
        let x = if trial % 2 == 0 { random_image(8, 8, trial) } else { smooth_image(8, 8, trial) };
        let oracle = residual_oracle(&x);
        for (spec, (z_want, c)) in cfg.bank.iter().zip(&oracle) {
            assert_eq!(spec.c, *c);
            let z: Grid<f64> = richmodel::residual(&x, spec).unwrap();
            assert!(max_abs_diff(z.as_slice(), &z_want.concat()) <= 1e-12, "{} trial {trial}", spec.name);
            let q = quantize_truncate(&z, spec.c, cfg.t).unwrap();
            let q_want = quantize_oracle(z_want, *c, cfg.t as i32);
            assert_eq!(q.as_slice(), &q_want.concat()[..], "{}", spec.name);
            for (dir, horizontal) in [(ScanDirection::Horizontal, true), (ScanDirection::Vertical, false)] {
                let got = cooc4::<f64>(&q, dir, cfg.t, None).unwrap();
                assert!(max_abs_diff(&got, &cooc_oracle(&q_want, horizontal, cfg.t as i32, None)) <= 1e-12);
            }
        }
        let full = srm_features::<f64>(&x, &cfg).unwrap().values;
        assert!(max_abs_diff(&full, &srm_oracle(&x, 2, None)) <= 1e-12);
    }
}

#[test]
fn esrm_matches_weighted_oracle() {
    let cfg = RichModelConfig::default();
    for trial in 0..30u64 {
        let x = smooth_image(8, 10, trial);
        let w = random_weights(8, 10, trial);
        let got = esrm_features(&x, &prob_map(&w), &cfg).unwrap().values;
        assert!(max_abs_diff(&got, &srm_oracle(&x, 2, Some(&w))) <= 1e-12);
    }
}

#[test]
fn dimension_contracts() {
    let x = random_image(64, 64, 1);
    let p = ProbMap::constant(64, 64, 1.0);
    assert_eq!(spam_features::<f64>(&x, &SpamConfig::default()).unwrap().len(), 686);
    assert_eq!(espam_features(&x, &p, &SpamConfig::default()).unwrap().len(), 686);
    assert_eq!(srm_features::<f64>(&x, &RichModelConfig::default()).unwrap().len(), 8750);
    assert_eq!(esrm_features(&x, &p, &RichModelConfig::default()).unwrap().len(), 8750);
}

#[test]
fn enhanced_features_reduce_with_unit_map() {
    for s in 0..10u64 {
        let x = random_image(64, 64, 100 + s);
        let p = ProbMap::constant(64, 64, 1.0);
        let a = spam_features::<f64>(&x, &SpamConfig::default()).unwrap().values;
        let b = espam_features(&x, &p, &SpamConfig::default()).unwrap().values;
        assert!(max_abs_diff(&a, &b) <= 1e-12);
        let a = srm_features::<f64>(&x, &RichModelConfig::default()).unwrap().values;
        let b = esrm_features(&x, &p, &RichModelConfig::default()).unwrap().values;
        assert!(max_abs_diff(&a, &b) <= 1e-12);
    }
}

#[test]
fn f32_tracks_f64() {
    let x = smooth_image(32, 32, 9);
    let a = spam_features::<f64>(&x, &SpamConfig::default()).unwrap().values;
    let b = spam_features::<f32>(&x, &SpamConfig::default()).unwrap().values;
    let b: Vec<f64> = b.into_iter().map(f64::from).collect();
    assert!(max_abs_diff(&a, &b) < 1e-5);
}

fn image_strategy(max: usize) -> impl Strategy<Value = GrayImage> {
    (8..=max, 8..=max).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<u8>(), w * h).prop_map(move |px| GrayImage::new(w, h, px).unwrap())
    })
}

/// Swaps the horizontal/vertical variants of each residual and scan.
fn transpose_srm(v: &[f64], block: usize) -> Vec<f64> {
    let swap_residual = [1, 0, 3, 2, 4, 5, 6];
    let mut out = vec![0.0; v.len()];
    for (i, &j) in swap_residual.iter().enumerate() {
        for dir in 0..2 {
            let src = (2 * j + (1 - dir)) * block;
            let dst = (2 * i + dir) * block;
            out[dst..dst + block].copy_from_slice(&v[src..src + block]);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spam_transpose_invariant(x in image_strategy(16)) {
        let cfg = SpamConfig::default();
        let a = spam_features::<f64>(&x, &cfg).unwrap().values;
        let b = spam_features::<f64>(&x.transpose(), &cfg).unwrap().values;
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn srm_transpose_permutes_blocks(x in image_strategy(12)) {
        let cfg = RichModelConfig::default();
        let a = srm_features::<f64>(&x, &cfg).unwrap().values;
        let b = srm_features::<f64>(&x.transpose(), &cfg).unwrap().values;
        prop_assert!(max_abs_diff(&transpose_srm(&a, cfg.block_len()), &b) <= 1e-12);
    }

    #[test]
    fn spam_rows_are_distributions(x in image_strategy(16), first in any::<bool>()) {
        let order = if first { MarkovOrder::First } else { MarkovOrder::Second };
        let cfg = SpamConfig { t: 3, order };
        let f = spam_features::<f64>(&x, &cfg).unwrap().values;
        // each direction's rows sum to 0 or 1, so averaged rows lie in [0, 1]
        for row in f.chunks(7) {
            let s: f64 = row.iter().sum();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        }
    }

    #[test]
    fn srm_blocks_sum_to_one(x in image_strategy(12)) {
        let cfg = RichModelConfig::default();
        let f = srm_features::<f64>(&x, &cfg).unwrap().values;
        for block in f.chunks(cfg.block_len()) {
            prop_assert!((block.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn enhanced_features_scale_invariant(seed in 0u64..1000, k in 0.05f64..1.0) {
        let x = smooth_image(12, 12, seed);
        let p = prob_map(&random_weights(12, 12, seed));
        let q = p.scaled_unchecked(k);
        let a = espam_features(&x, &p, &SpamConfig::default()).unwrap().values;
        let b = espam_features(&x, &q, &SpamConfig::default()).unwrap().values;
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
        let a = esrm_features(&x, &p, &RichModelConfig::default()).unwrap().values;
        let b = esrm_features(&x, &q, &RichModelConfig::default()).unwrap().values;
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
    }
}
