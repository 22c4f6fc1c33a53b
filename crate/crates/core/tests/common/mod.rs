//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::Rng;
use stegdetect::corpus::GrayImage;
use stegdetect::seed;
use stegdetect::victim::{Activation, VictimModel};

pub fn random_image(w: usize, h: usize, seed_value: u64) -> GrayImage {
    let mut rng = seed::rng(seed_value, 1);
    GrayImage::from_fn(w, h, |_, _| rng.gen())
}

/// Random image with small local variation, so clamped differences hit
/// interior bins too.
pub fn smooth_image(w: usize, h: usize, seed_value: u64) -> GrayImage {
    let mut rng = seed::rng(seed_value, 2);
    let base: i32 = rng.gen_range(40..200);
    GrayImage::from_fn(w, h, |_, _| (base + rng.gen_range(-3..=3)) as u8)
}

pub fn random_weights(w: usize, h: usize, seed_value: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed_value, 3);
    (0..h)
        .map(|_| (0..w).map(|_| rng.gen_range(1.0 / 255.0..=1.0)).collect())
        .collect()
}

fn px(x: &GrayImage, r: isize, c: isize) -> f64 {
    f64::from(x.get(r as usize, c as usize))
}

/// SPAM by direct enumeration over pixel chains `p, p+s, ..., p+(order+1)s`.
pub fn spam_oracle(x: &GrayImage, t: i32, order: usize, weights: Option<&[Vec<f64>]>) -> Vec<f64> {
    let k = (2 * t + 1) as usize;
    let len = k.pow(order as u32 + 1);
    let straight = [(0, 1), (0, -1), (-1, 0), (1, 0)];
    let diagonal = [(-1, 1), (1, -1), (1, 1), (-1, -1)];
    let (h, w) = (x.height() as isize, x.width() as isize);
    let mut out = Vec::new();
    for group in [straight, diagonal] {
        let mut avg = vec![0.0; len];
        for (dr, dc) in group {
            let mut joint: HashMap<Vec<i32>, f64> = HashMap::new();
            for r in 0..h {
                for c in 0..w {
                    let chain: Vec<(isize, isize)> = (0..=order as isize + 1).map(|s| (r + s * dr, c + s * dc)).collect();
                    if chain.iter().any(|&(a, b)| a < 0 || b < 0 || a >= h || b >= w) {
                        continue;
                    }
                    let diffs: Vec<i32> = chain
                        .windows(2)
                        .map(|p| ((px(x, p[0].0, p[0].1) - px(x, p[1].0, p[1].1)) as i32).clamp(-t, t))
                        .collect();
                    let wt = match weights {
                        None => 1.0,
                        Some(m) => chain.iter().map(|&(a, b)| m[a as usize][b as usize]).product(),
                    };
                    *joint.entry(diffs).or_default() += wt;
                }
            }
            let mut ctx: HashMap<Vec<i32>, f64> = HashMap::new();
            for (d, v) in &joint {
                *ctx.entry(d[..order].to_vec()).or_default() += v;
            }
            for (d, v) in &joint {
                let idx = d.iter().fold(0usize, |acc, &q| acc * k + (q + t) as usize);
                avg[idx] += v / ctx[&d[..order]] / 4.0;
            }
        }
        out.extend(avg);
    }
    out
}

fn reflect(i: isize, n: isize) -> isize {
    if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    }
}

fn at(x: &GrayImage, r: isize, c: isize) -> f64 {
    let (h, w) = (x.height() as isize, x.width() as isize);
    px(x, reflect(r, h), reflect(c, w))
}

/// The seven SRM-lite residuals with their quantization steps, written out
/// term by term.
pub fn residual_oracle(x: &GrayImage) -> Vec<(Vec<Vec<f64>>, f64)> {
    let (h, w) = (x.height() as isize, x.width() as isize);
    let build = |f: &dyn Fn(isize, isize) -> f64| -> Vec<Vec<f64>> {
        (0..h).map(|r| (0..w).map(|c| f(r, c)).collect()).collect()
    };
    let s1h = |r, c| at(x, r, c + 1) - at(x, r, c);
    let s1v = |r, c| at(x, r + 1, c) - at(x, r, c);
    vec![
        (build(&s1h), 1.0),
        (build(&s1v), 1.0),
        (build(&|r, c| at(x, r, c - 1) - 2.0 * at(x, r, c) + at(x, r, c + 1)), 2.0),
        (build(&|r, c| at(x, r - 1, c) - 2.0 * at(x, r, c) + at(x, r + 1, c)), 2.0),
        (build(&|r, c| f64::min(s1h(r, c), s1v(r, c))), 1.0),
        (build(&|r, c| f64::max(s1h(r, c), s1v(r, c))), 1.0),
        (
            build(&|r, c| {
                -at(x, r - 1, c - 1) + 2.0 * at(x, r - 1, c) - at(x, r - 1, c + 1) + 2.0 * at(x, r, c - 1)
                    - 4.0 * at(x, r, c)
                    + 2.0 * at(x, r, c + 1)
                    - at(x, r + 1, c - 1)
                    + 2.0 * at(x, r + 1, c)
                    - at(x, r + 1, c + 1)
            }),
            4.0,
        ),
    ]
}

pub fn quantize_oracle(z: &[Vec<f64>], q: f64, t: i32) -> Vec<Vec<i32>> {
    z.iter()
        .map(|row| row.iter().map(|&v| ((v / q).round() as i32).clamp(-t, t)).collect())
        .collect()
}

pub fn cooc_oracle(q: &[Vec<i32>], horizontal: bool, t: i32, weights: Option<&[Vec<f64>]>) -> Vec<f64> {
    let k = (2 * t + 1) as usize;
    let (h, w) = (q.len(), q[0].len());
    let mut bins = vec![0.0; k.pow(4)];
    for r in 0..h {
        for c in 0..w {
            let cells: Vec<(usize, usize)> = (0..4).map(|s| if horizontal { (r, c + s) } else { (r + s, c) }).collect();
            if cells.iter().any(|&(a, b)| a >= h || b >= w) {
                continue;
            }
            let idx = cells.iter().fold(0usize, |acc, &(a, b)| acc * k + (q[a][b] + t) as usize);
            bins[idx] += match weights {
                None => 1.0,
                Some(m) => cells.iter().map(|&(a, b)| m[a][b]).fold(f64::MIN, f64::max),
            };
        }
    }
    let total: f64 = bins.iter().sum();
    bins.iter().map(|b| b / total).collect()
}

pub fn srm_oracle(x: &GrayImage, t: i32, weights: Option<&[Vec<f64>]>) -> Vec<f64> {
    let mut out = Vec::new();
    for (z, c) in residual_oracle(x) {
        let q = quantize_oracle(&z, c, t);
        out.extend(cooc_oracle(&q, true, t, weights));
        out.extend(cooc_oracle(&q, false, t, weights));
    }
    out
}

/// Cross-entropy loss gradient with respect to raw intensities, by a plain
/// layer-by-layer forward and backward pass.
pub fn victim_grad_oracle(model: &VictimModel<f64>, pixels: &[f64], label: usize) -> Vec<f64> {
    let mut acts = vec![pixels.iter().map(|p| p / 255.0 - 0.5).collect::<Vec<f64>>()];
    let mut pre = Vec::new();
    for layer in model.layers() {
        let a = acts.last().unwrap();
        let z: Vec<f64> = (0..layer.outputs())
            .map(|o| layer.bias()[o] + (0..layer.inputs()).map(|i| layer.weights()[o * layer.inputs() + i] * a[i]).sum::<f64>())
            .collect();
        let out = match layer.activation() {
            Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
            Activation::Identity => z.clone(),
        };
        pre.push(z);
        acts.push(out);
    }
    let logits = acts.last().unwrap();
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let mut delta: Vec<f64> = e.iter().enumerate().map(|(i, v)| v / s - if i == label { 1.0 } else { 0.0 }).collect();
    for (li, layer) in model.layers().iter().enumerate().rev() {
        if layer.activation() == Activation::Relu {
            for (d, z) in delta.iter_mut().zip(&pre[li]) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        delta = (0..layer.inputs())
            .map(|i| (0..layer.outputs()).map(|o| layer.weights()[o * layer.inputs() + i] * delta[o]).sum())
            .collect();
    }
    delta.iter().map(|d| d / 255.0).collect()
}

pub fn f_nor_oracle(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| ((x - lo) / (hi - lo)).clamp(1.0 / 255.0, 1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `n_per_class` samples of `N(0, I)` and `N(gap * 1, I)` in `d` dimensions,
/// interleaved normal/adversarial.
pub fn two_gaussians(
    n_per_class: usize,
    d: usize,
    gap: f64,
    seed_value: u64,
) -> (stegdetect::store::FeatureTable<f64>, Vec<stegdetect::ensemble::Class>) {
    use rand_distr::StandardNormal;
    use stegdetect::ensemble::Class;
    let mut rng = seed::rng(seed_value, 4);
    let mut t = stegdetect::store::FeatureTable::new("gauss", d);
    let mut labels = Vec::new();
    for _ in 0..n_per_class {
        for (class, shift) in [(Class::Normal, 0.0), (Class::Adversarial, gap)] {
            let row: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect();
            t.push(&row).unwrap();
            labels.push(class);
        }
    }
    (t, labels)
}

/// Central differences on the loss toward the non-predicted class.
pub fn finite_difference_error(model: &VictimModel<f64>, x: &GrayImage, n_pixels: usize) -> f64 {
    let pixels: Vec<f64> = x.to_reals();
    let target = 1 - model.predict(x).unwrap();
    let (_, g) = model.loss_and_grad_reals(&pixels, target).unwrap();
    let h = 1e-3;
    let step = pixels.len() / n_pixels;
    let mut worst = 0.0f64;
    for i in (0..pixels.len()).step_by(step).take(n_pixels) {
        let mut p = pixels.clone();
        p[i] += h;
        let up = model.loss_and_grad_reals(&p, target).unwrap().0;
        p[i] -= 2.0 * h;
        let down = model.loss_and_grad_reals(&p, target).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-10);
        worst = worst.max(rel);
    }
    worst
}

pub fn accuracy(predicted: &[stegdetect::ensemble::Class], truth: &[stegdetect::ensemble::Class]) -> f64 {
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}
