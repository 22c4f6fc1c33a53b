//! Small dense softmax classifier used as the attack target.
//!
//! Architecture: flatten -> dense(256, ReLU) -> dense(64, ReLU) -> dense(N).
//! Pixels enter as intensities in `[0, 255]` and are mapped to
//! `[-0.5, 0.5]` (divide by 255, subtract 0.5) internally; every gradient this module returns is with respect to the
//! raw intensity, so attack step sizes are in intensity levels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_image, DatasetManifest, GrayImage, Role};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::seed;

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 64];

const CHECKPOINT_MAGIC: &[u8; 8] = b"SDVICTIM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    inputs: usize,
    outputs: usize,
    /// `outputs x inputs`, row-major.
    weights: Vec<F>,
    bias: Vec<F>,
    activation: Activation,
}

impl<F: Real> Dense<F> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![F::zero(); inputs * outputs],
            bias: vec![F::zero(); outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [F] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[F] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [F] {
        &mut self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn forward(&self, x: &[F], pre: &mut Vec<F>, out: &mut Vec<F>) {
        pre.clear();
        out.clear();
        for (row, &b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
            let z = dot(row, x) + b;
            pre.push(z);
            out.push(match self.activation {
                Activation::Identity => z,
                Activation::Relu => z.max(F::zero()),
            });
        }
    }
}

/// Dot product with four independent accumulators, fixed summation order.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimModel<F> {
    side: usize,
    n_classes: usize,
    layers: Vec<Dense<F>>,
    seed: u64,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace<F> {
    /// Layer inputs; `inputs[0]` is the scaled image.
    inputs: Vec<Vec<F>>,
    pre: Vec<Vec<F>>,
    logits: Vec<F>,
}

impl<F> Trace<F> {
    pub fn logits(&self) -> &[F] {
        &self.logits
    }
}

impl<F: Real> VictimModel<F> {
    /// He-uniform initialized network for `side x side` inputs.
    pub fn new(side: usize, n_classes: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if side == 0 || n_classes < 2 {
            return Err(Error::Config(format!(
                "victim needs side > 0 and >= 2 classes, got side {side}, {n_classes} classes"
            )));
        }
        let mut rng = seed::rng(seed, 0);
        let mut dims = vec![side * side];
        dims.extend_from_slice(hidden);
        dims.push(n_classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k + 2 == dims.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                let mut layer = Dense::zeros(w[0], w[1], act);
                let limit = (6.0 / w[0] as f64).sqrt();
                for v in &mut layer.weights {
                    *v = F::lit(rng.gen_range(-limit..limit));
                }
                layer
            })
            .collect();
        Ok(VictimModel {
            side,
            n_classes,
            layers,
            seed,
        })
    }

    pub fn from_layers(side: usize, layers: Vec<Dense<F>>, seed: u64) -> Result<Self> {
        let mut expect = side * side;
        for (k, l) in layers.iter().enumerate() {
            if l.inputs != expect || l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::dims(
                    format!("layer {k} with {expect} inputs"),
                    format!("{} inputs, {} outputs", l.inputs, l.outputs),
                ));
            }
            expect = l.outputs;
        }
        if layers.is_empty() || expect < 2 {
            return Err(Error::Config("victim needs >= 1 layer and >= 2 outputs".into()));
        }
        let all_finite = layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::NonFinite("victim parameters".into()));
        }
        Ok(VictimModel {
            side,
            n_classes: expect,
            layers,
            seed,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_inputs(&self) -> usize {
        self.side * self.side
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Dense<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<F>] {
        &mut self.layers
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.n_inputs() {
            return Err(Error::dims(
                format!("{0}x{0} input", self.side),
                format!("{len} pixels"),
            ));
        }
        Ok(())
    }

    fn check_image(&self, x: &GrayImage) -> Result<()> {
        if x.width() != self.side || x.height() != self.side {
            return Err(Error::dims(
                format!("{0}x{0} image", self.side),
                format!("{}x{}", x.width(), x.height()),
            ));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.n_classes {
            return Err(Error::InvalidLabel {
                label,
                n_classes: self.n_classes,
            });
        }
        Ok(())
    }

    /// Forward pass on real-valued intensities.
    pub fn trace(&self, pixels: &[F]) -> Result<Trace<F>> {
        self.check_input(pixels.len())?;
        let scale = F::lit(255.0).recip();
        let half = F::lit(0.5);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut cur: Vec<F> = pixels.iter().map(|&p| p * scale - half).collect();
        for layer in &self.layers {
            let mut pre = Vec::with_capacity(layer.outputs);
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(&cur, &mut pre, &mut out);
            inputs.push(cur);
            pres.push(pre);
            cur = out;
        }
        Ok(Trace {
            inputs,
            pre: pres,
            logits: cur,
        })
    }

    /// Pre-softmax scores.
    pub fn logits(&self, x: &GrayImage) -> Result<Vec<F>> {
        self.check_image(x)?;
        Ok(self.trace(&x.to_reals())?.logits)
    }

    pub fn logits_reals(&self, pixels: &[F]) -> Result<Vec<F>> {
        Ok(self.trace(pixels)?.logits)
    }

    pub fn predict(&self, x: &GrayImage) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Gradient of `sum_k dlogits[k] * Z_k` with respect to the input
    /// intensities of the traced image.
    pub fn backward_input(&self, trace: &Trace<F>, dlogits: &[F]) -> Vec<F> {
        self.backward(trace, dlogits, None)
    }

    fn backward(&self, trace: &Trace<F>, dlogits: &[F], mut grads: Option<&mut [Dense<F>]>) -> Vec<F> {
        let mut g = dlogits.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (gi, &z) in g.iter_mut().zip(&trace.pre[k]) {
                    if z <= F::zero() {
                        *gi = F::zero();
                    }
                }
            }
            let x = &trace.inputs[k];
            if let Some(acc) = grads.as_deref_mut() {
                let acc = &mut acc[k];
                for (o, &go) in g.iter().enumerate() {
                    if go != F::zero() {
                        axpy(go, x, &mut acc.weights[o * layer.inputs..(o + 1) * layer.inputs]);
                    }
                    acc.bias[o] += go;
                }
                if k == 0 {
                    return Vec::new();
                }
            }
            let mut gin = vec![F::zero(); layer.inputs];
            for (o, &go) in g.iter().enumerate() {
                if go != F::zero() {
                    axpy(go, &layer.weights[o * layer.inputs..(o + 1) * layer.inputs], &mut gin);
                }
            }
            g = gin;
        }
        let scale = F::lit(255.0).recip();
        g.iter_mut().for_each(|v| *v *= scale);
        g
    }

    /// Cross-entropy loss at `(pixels, label)` and its gradient with respect
    /// to each pixel intensity.
    pub fn loss_and_grad_reals(&self, pixels: &[F], label: usize) -> Result<(F, Vec<F>)> {
        self.check_label(label)?;
        let trace = self.trace(pixels)?;
        let (loss, dlogits) = cross_entropy(&trace.logits, label);
        Ok((loss, self.backward_input(&trace, &dlogits)))
    }

    pub fn loss_and_input_grad(&self, x: &GrayImage, label: usize) -> Result<(F, Vec<F>)> {
        self.check_image(x)?;
        self.loss_and_grad_reals(&x.to_reals(), label)
    }

    /// Logits and the input gradient of every logit, `grads[k][pixel]`.
    pub fn logit_jacobian(&self, pixels: &[F]) -> Result<(Vec<F>, Vec<Vec<F>>)> {
        let trace = self.trace(pixels)?;
        let grads = (0..self.n_classes)
            .map(|k| {
                let mut e = vec![F::zero(); self.n_classes];
                e[k] = F::one();
                self.backward_input(&trace, &e)
            })
            .collect();
        Ok((trace.logits, grads))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::corpus::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checkpoint: magic, version, side, classes, seed, layer descriptors,
    /// then per layer weights and biases as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.side as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_classes as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
            out.push(match l.activation {
                Activation::Identity => 0,
                Activation::Relu => 1,
            });
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::store::ByteReader::new(bytes, "victim checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("victim checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "victim checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let side = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let seed = r.u64()?;
        let n_layers = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let i = r.u32()? as usize;
            let o = r.u32()? as usize;
            let act = match r.u8()? {
                0 => Activation::Identity,
                1 => Activation::Relu,
                t => {
                    return Err(Error::format(
                        "victim checkpoint",
                        format!("unknown activation tag {t}"),
                    ))
                }
            };
            shapes.push((i, o, act));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (i, o, act) in shapes {
            let mut l = Dense::zeros(i, o, act);
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = F::lit(r.f64()?);
            }
            layers.push(l);
        }
        r.finish()?;
        let model = Self::from_layers(side, layers, seed)?;
        if model.n_classes != n_classes {
            return Err(Error::format(
                "victim checkpoint",
                "class count disagrees with layer shapes",
            ));
        }
        Ok(model)
    }
}

pub fn argmax<F: Real>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy<F: Real>(logits: &[F], label: usize) -> (F, Vec<F>) {
    let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<F>().ln();
    let mut grad = softmax(logits);
    grad[label] -= F::one();
    (lse - logits[label], grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 10,
            learning_rate: 0.01,
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Mini-batch SGD on in-memory samples. Single-threaded and deterministic.
pub fn train_on<F: Real>(
    samples: &[(GrayImage, usize)],
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<(VictimModel<F>, TrainReport)> {
    cfg.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("training split".into()))?;
    let side = first.0.width();
    let mut present = vec![false; n_classes];
    for (img, label) in samples {
        if img.width() != side || img.height() != side {
            return Err(Error::dims(format!("{side}x{side}"), format!("{}x{}", img.width(), img.height())));
        }
        if *label >= n_classes {
            return Err(Error::InvalidLabel {
                label: *label,
                n_classes,
            });
        }
        present[*label] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::SingleClass("training split".into()));
    }

    let mut model = VictimModel::<F>::new(side, n_classes, &cfg.hidden, cfg.seed)?;
    let inputs: Vec<Vec<F>> = samples.iter().map(|(img, _)| img.to_reals()).collect();
    let mut grads: Vec<Dense<F>> = model
        .layers
        .iter()
        .map(|l| Dense::zeros(l.inputs, l.outputs, l.activation))
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed::derive(cfg.seed, 1), epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for g in &mut grads {
                g.weights.iter_mut().for_each(|v| *v = F::zero());
                g.bias.iter_mut().for_each(|v| *v = F::zero());
            }
            for &i in batch {
                let trace = model.trace(&inputs[i])?;
                let (loss, dlogits) = cross_entropy(&trace.logits, samples[i].1);
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                total += loss.to_f64_lossy();
                model.backward(&trace, &dlogits, Some(&mut grads));
            }
            let step = F::lit(cfg.learning_rate) / F::from_usize_lossy(batch.len());
            if step != F::zero() {
                for (layer, g) in model.layers.iter_mut().zip(&grads) {
                    axpy(-step, &g.weights, &mut layer.weights);
                    axpy(-step, &g.bias, &mut layer.bias);
                }
            }
        }
        let mean = total / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mean);
    }

    let correct = inputs
        .iter()
        .zip(samples)
        .map(|(x, (_, y))| model.logits_reals(x).map(|z| usize::from(argmax(&z) == *y)))
        .sum::<Result<usize>>()?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy: correct as f64 / samples.len() as f64,
        },
    ))
}

/// Trains on the manifest's train split.
pub fn train_victim<F: Real>(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<(VictimModel<F>, TrainReport)> {
    let samples = manifest
        .with_role(Role::Train)
        .map(|e| Ok((load_image(manifest.resolve(e))?, e.label)))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    train_on(&samples, manifest.n_classes().max(2), cfg)
}
