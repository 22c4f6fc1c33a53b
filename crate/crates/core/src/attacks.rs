//! Adversarial example generation: FGSM, IGSM, Deepfool (l2) and C&W (l2).
//!
//! Every attack works on real-valued intensities internally and returns an
//! 8-bit image; success is always judged on the rounded image.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{quantize_intensity, GrayImage};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::victim::{cross_entropy, VictimModel};

pub const DEEPFOOL_OVERSHOOT: f64 = 0.02;
pub const CW_STEP_SIZE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Igsm,
    Deepfool,
    Cw,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::Fgsm,
        AttackKind::Igsm,
        AttackKind::Deepfool,
        AttackKind::Cw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Igsm => "igsm",
            AttackKind::Deepfool => "deepfool",
            AttackKind::Cw => "cw",
        }
    }

    /// Whether the attack is parameterized by an l-inf budget.
    pub fn uses_epsilon(self) -> bool {
        matches!(self, AttackKind::Fgsm | AttackKind::Igsm)
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "target")]
pub enum AttackMode {
    Untargeted,
    Targeted(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-inf budget in intensity levels.
    pub epsilon: f64,
    /// IGSM step in intensity levels.
    pub alpha: f64,
    /// IGSM / Deepfool iterations, or C&W descent steps per `c`.
    pub max_iters: usize,
    pub kappa: f64,
    pub c_grid: Vec<f64>,
    pub mode: AttackMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0,
            alpha: 1.0,
            max_iters: 10,
            kappa: 0.0,
            c_grid: vec![0.1, 1.0, 10.0],
            mode: AttackMode::Untargeted,
        }
    }
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            max_iters: 1,
            ..Default::default()
        }
    }

    pub fn igsm(epsilon: f64, alpha: f64, max_iters: usize) -> Self {
        AttackConfig {
            epsilon,
            alpha,
            max_iters,
            ..Default::default()
        }
    }

    pub fn deepfool(max_iters: usize) -> Self {
        AttackConfig {
            max_iters,
            ..Default::default()
        }
    }

    pub fn cw(c_grid: Vec<f64>, kappa: f64, steps: usize) -> Self {
        AttackConfig {
            c_grid,
            kappa,
            max_iters: steps,
            ..Default::default()
        }
    }

    pub fn targeted(mut self, target: usize) -> Self {
        self.mode = AttackMode::Targeted(target);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.c_grid.is_empty() {
            return Err(Error::Config("c_grid must be nonempty".into()));
        }
        if self.c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite()))
            || self.c_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "c_grid must be positive and strictly ascending, got {:?}",
                self.c_grid
            )));
        }
        if !self.kappa.is_finite() {
            return Err(Error::Config("kappa must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    #[serde(skip, default = "empty_image")]
    pub adversarial: GrayImage,
    pub success: bool,
    pub iterations: usize,
    pub linf: f64,
    pub l2: f64,
}

fn empty_image() -> GrayImage {
    GrayImage::filled(1, 1, 0)
}

impl AttackResult {
    fn new<F: Real>(
        model: &VictimModel<F>,
        original: &GrayImage,
        adversarial: GrayImage,
        label: usize,
        mode: AttackMode,
        iterations: usize,
    ) -> Result<Self> {
        let predicted = model.predict(&adversarial)?;
        let success = match mode {
            AttackMode::Untargeted => predicted != label,
            AttackMode::Targeted(t) => predicted == t,
        };
        let (linf, l2) = distortion(original, &adversarial);
        Ok(AttackResult {
            adversarial,
            success,
            iterations,
            linf,
            l2,
        })
    }
}

/// (l-inf, l2) distance between two images in intensity units.
pub fn distortion(a: &GrayImage, b: &GrayImage) -> (f64, f64) {
    let mut linf = 0.0f64;
    let mut sq = 0.0f64;
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let d = (f64::from(x) - f64::from(y)).abs();
        linf = linf.max(d);
        sq += d * d;
    }
    (linf, sq.sqrt())
}

fn check_inputs<F: Real>(model: &VictimModel<F>, x: &GrayImage, label: usize, cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if x.width() != model.side() || x.height() != model.side() {
        return Err(Error::dims(
            format!("{0}x{0}", model.side()),
            format!("{}x{}", x.width(), x.height()),
        ));
    }
    let n = model.n_classes();
    for l in [Some(label), target_of(cfg.mode)].into_iter().flatten() {
        if l >= n {
            return Err(Error::InvalidLabel { label: l, n_classes: n });
        }
    }
    Ok(())
}

fn target_of(mode: AttackMode) -> Option<usize> {
    match mode {
        AttackMode::Targeted(t) => Some(t),
        AttackMode::Untargeted => None,
    }
}

/// Signed gradient direction of one FGSM step: descend toward the target
/// when targeted, ascend the true-class loss when untargeted.
fn sign_step<F: Real>(model: &VictimModel<F>, pixels: &[F], label: usize, mode: AttackMode) -> Result<Vec<F>> {
    let (class, dir) = match mode {
        AttackMode::Targeted(t) => (t, -F::one()),
        AttackMode::Untargeted => (label, F::one()),
    };
    let (_, grad) = model.loss_and_grad_reals(pixels, class)?;
    Ok(grad
        .into_iter()
        .map(|g| {
            if g > F::zero() {
                dir
            } else if g < F::zero() {
                -dir
            } else {
                F::zero()
            }
        })
        .collect())
}

/// Rounds `v` to an intensity that stays within `eps` of `orig`.
fn round_within<F: Real>(v: F, orig: F, eps: F) -> u8 {
    let r = v.round();
    let r = if (r - orig).abs() > eps {
        orig + (v - orig).trunc()
    } else {
        r
    };
    quantize_intensity(r)
}

fn clip_round<F: Real>(x: &GrayImage, values: &[F], eps: F) -> GrayImage {
    let pixels = x
        .pixels()
        .iter()
        .zip(values)
        .map(|(&p, &v)| round_within(v, F::from_u8(p).unwrap(), eps))
        .collect();
    GrayImage::new(x.width(), x.height(), pixels).expect("shape preserved")
}

/// Fast gradient sign method.
pub fn fgsm<F: Real>(model: &VictimModel<F>, x: &GrayImage, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    check_inputs(model, x, label, cfg)?;
    let eps = F::lit(cfg.epsilon);
    let pixels: Vec<F> = x.to_reals();
    let step = sign_step(model, &pixels, label, cfg.mode)?;
    let adv: Vec<F> = pixels.iter().zip(&step).map(|(&p, &s)| p + eps * s).collect();
    AttackResult::new(model, x, clip_round(x, &adv, eps), label, cfg.mode, 1)
}

/// Iterative gradient sign method with per-step clipping into the
/// eps-neighbourhood of `x` and the valid intensity range.
pub fn igsm<F: Real>(model: &VictimModel<F>, x: &GrayImage, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    check_inputs(model, x, label, cfg)?;
    let eps = F::lit(cfg.epsilon);
    let alpha = F::lit(cfg.alpha);
    let (lo_px, hi_px) = (F::zero(), F::lit(255.0));
    let orig: Vec<F> = x.to_reals();
    let mut cur = orig.clone();
    let mut result = AttackResult::new(model, x, x.clone(), label, cfg.mode, 0)?;
    for it in 1..=cfg.max_iters {
        let step = sign_step(model, &cur, label, cfg.mode)?;
        for ((c, &o), &s) in cur.iter_mut().zip(&orig).zip(&step) {
            let lo = (o - eps).max(lo_px);
            let hi = (o + eps).min(hi_px);
            *c = (*c + alpha * s).max(lo).min(hi);
        }
        result = AttackResult::new(model, x, clip_round(x, &cur, eps), label, cfg.mode, it)?;
        if result.success {
            break;
        }
    }
    Ok(result)
}

/// Multiclass Deepfool with l2 linearization steps.
pub fn deepfool<F: Real>(model: &VictimModel<F>, x: &GrayImage, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    check_inputs(model, x, label, cfg)?;
    if cfg.mode != AttackMode::Untargeted {
        return Err(Error::Config("deepfool only supports untargeted mode".into()));
    }
    if model.predict(x)? != label {
        return AttackResult::new(model, x, x.clone(), label, cfg.mode, 0);
    }
    let orig: Vec<F> = x.to_reals();
    let scale = F::one() + F::lit(DEEPFOOL_OVERSHOOT);
    let mut r_total = vec![F::zero(); orig.len()];
    let mut cur = orig.clone();
    let mut last = x.clone();
    for it in 1..=cfg.max_iters {
        let (z, grads) = model.logit_jacobian(&cur)?;
        let mut best: Option<(F, F, Vec<F>)> = None;
        for k in (0..z.len()).filter(|&k| k != label) {
            let w: Vec<F> = grads[k].iter().zip(&grads[label]).map(|(&a, &b)| a - b).collect();
            let norm2: F = w.iter().map(|&v| v * v).sum();
            if norm2 == F::zero() {
                continue;
            }
            let f = (z[k] - z[label]).abs();
            let dist = f / norm2.sqrt();
            if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
                best = Some((dist, f / norm2, w));
            }
        }
        let Some((_, coef, w)) = best else {
            break;
        };
        for ((r, &wi), (c, &o)) in r_total.iter_mut().zip(&w).zip(cur.iter_mut().zip(&orig)) {
            *r += coef * wi;
            *c = (o + scale * *r).max(F::zero()).min(F::lit(255.0));
        }
        last = GrayImage::from_reals(x.width(), x.height(), &cur)?;
        let res = AttackResult::new(model, x, last.clone(), label, cfg.mode, it)?;
        if res.success {
            return Ok(res);
        }
    }
    AttackResult::new(model, x, last, label, cfg.mode, cfg.max_iters)
}

/// C&W margin: `max(Z_true - max_{i != true} Z_i, -kappa)` untargeted, or
/// `max(max_{i != t} Z_i - Z_t, -kappa)` toward target `t`. Returns the
/// value and the logit-space gradient of the unclamped margin.
pub fn cw_margin<F: Real>(logits: &[F], label: usize, mode: AttackMode, kappa: F) -> (F, Vec<F>) {
    let (pos, exclude, sign) = match mode {
        AttackMode::Untargeted => (label, label, F::one()),
        AttackMode::Targeted(t) => (t, t, -F::one()),
    };
    let other = (0..logits.len())
        .filter(|&i| i != exclude)
        .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap().then(b.cmp(&a)))
        .expect("at least two classes");
    let raw = sign * (logits[pos] - logits[other]);
    let mut grad = vec![F::zero(); logits.len()];
    if raw > -kappa {
        grad[pos] = sign;
        grad[other] = -sign;
    }
    (raw.max(-kappa), grad)
}

/// C&W margin evaluated on an 8-bit image.
pub fn cw_objective<F: Real>(model: &VictimModel<F>, x: &GrayImage, label: usize, mode: AttackMode, kappa: f64) -> Result<F> {
    let z = model.logits(x)?;
    Ok(cw_margin(&z, label, mode, F::lit(kappa)).0)
}

/// Carlini & Wagner l2 attack: for each `c` in ascending order, plain
/// gradient descent on `||delta||_2 + c * f(x + delta)` in the tanh box
/// parameterization; the first `c` whose rounded solution has `f <= 0`
/// is accepted.
pub fn cw_l2<F: Real>(model: &VictimModel<F>, x: &GrayImage, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    check_inputs(model, x, label, cfg)?;
    let kappa = F::lit(cfg.kappa);
    if cw_objective(model, x, label, cfg.mode, cfg.kappa)? <= F::zero() {
        let mut res = AttackResult::new(model, x, x.clone(), label, cfg.mode, 0)?;
        res.success = true;
        return Ok(res);
    }
    let half = F::lit(127.5);
    let inv255 = F::lit(255.0).recip();
    let lr = F::lit(CW_STEP_SIZE);
    let orig: Vec<F> = x.to_reals();
    let limit = F::one() - F::lit(1e-6);
    let w0: Vec<F> = orig
        .iter()
        .map(|&p| (p / half - F::one()).max(-limit).min(limit).atanh())
        .collect();

    let mut iterations = 0;
    let mut fallback = x.clone();
    for &c in &cfg.c_grid {
        let c = F::lit(c);
        let mut w = w0.clone();
        let mut best: Option<(f64, GrayImage)> = None;
        for _ in 0..cfg.max_iters {
            iterations += 1;
            let t: Vec<F> = w.iter().map(|v| v.tanh()).collect();
            let xs: Vec<F> = t.iter().map(|&ti| half * (ti + F::one())).collect();
            let delta: Vec<F> = xs.iter().zip(&orig).map(|(&a, &b)| (a - b) * inv255).collect();
            let norm = delta.iter().map(|&d| d * d).sum::<F>().sqrt();
            let trace = model.trace(&xs)?;
            let (f, dlogits) = cw_margin(trace.logits(), label, cfg.mode, kappa);

            if f <= F::zero() {
                let rounded = GrayImage::from_reals(x.width(), x.height(), &xs)?;
                if cw_objective(model, &rounded, label, cfg.mode, cfg.kappa)? <= F::zero() {
                    let (_, l2) = distortion(x, &rounded);
                    if best.as_ref().is_none_or(|(b, _)| l2 < *b) {
                        best = Some((l2, rounded));
                    }
                }
            }

            let scaled: Vec<F> = dlogits.iter().map(|&g| g * c).collect();
            let gf = model.backward_input(&trace, &scaled);
            for i in 0..w.len() {
                let gnorm = if norm > F::zero() {
                    delta[i] / norm * inv255
                } else {
                    F::zero()
                };
                let dxdw = half * (F::one() - t[i] * t[i]);
                w[i] -= lr * (gnorm + gf[i]) * dxdw;
            }
        }
        if let Some((_, img)) = best {
            let mut res = AttackResult::new(model, x, img, label, cfg.mode, iterations)?;
            res.success = true;
            return Ok(res);
        }
        let xs: Vec<F> = w.iter().map(|v| half * (v.tanh() + F::one())).collect();
        fallback = GrayImage::from_reals(x.width(), x.height(), &xs)?;
    }
    let mut res = AttackResult::new(model, x, fallback, label, cfg.mode, iterations)?;
    let f = cw_objective(model, &res.adversarial, label, cfg.mode, cfg.kappa)?;
    res.success = f <= F::zero();
    Ok(res)
}

pub fn run_attack<F: Real>(
    kind: AttackKind,
    model: &VictimModel<F>,
    x: &GrayImage,
    label: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    match kind {
        AttackKind::Fgsm => fgsm(model, x, label, cfg),
        AttackKind::Igsm => igsm(model, x, label, cfg),
        AttackKind::Deepfool => deepfool(model, x, label, cfg),
        AttackKind::Cw => cw_l2(model, x, label, cfg),
    }
}

/// Attacks every `(image, label)` pair; results are in input order
/// regardless of the thread count.
pub fn attack_batch<F: Real>(
    kind: AttackKind,
    model: &VictimModel<F>,
    items: &[(GrayImage, usize)],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    items
        .par_iter()
        .map(|(x, y)| run_attack(kind, model, x, *y, cfg))
        .collect()
}

/// Untargeted loss value at an image; convenience for diagnostics.
pub fn loss_at<F: Real>(model: &VictimModel<F>, x: &GrayImage, label: usize) -> Result<F> {
    Ok(cross_entropy(&model.logits(x)?, label).0)
}

/// File-name suffix for adversarial outputs, e.g. `fgsm-eps8`.
pub fn param_tag(kind: AttackKind, cfg: &AttackConfig) -> String {
    match kind {
        AttackKind::Fgsm => format!("fgsm-eps{}", cfg.epsilon),
        AttackKind::Igsm => format!("igsm-eps{}-a{}-n{}", cfg.epsilon, cfg.alpha, cfg.max_iters),
        AttackKind::Deepfool => format!("deepfool-n{}", cfg.max_iters),
        AttackKind::Cw => format!("cw-k{}-n{}", cfg.kappa, cfg.max_iters),
    }
}
