//! Ensemble of Fisher linear discriminants on random feature subspaces.
//!
//! Each base learner is trained on a bootstrap resample of the (standardized)
//! training set restricted to a random subspace; the ensemble decides by
//! majority vote with ties going to [`Class::Adversarial`]. The subspace
//! dimension and the number of learners are chosen by minimizing the
//! out-of-bag (OOB) error of the majority vote.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::write_file;
use crate::error::{Error, Result};
use crate::num::Real;
use crate::seed;
use crate::store::{put_string, ByteReader, FeatureTable};
use crate::victim::dot;

const MODEL_MAGIC: &[u8; 8] = b"SDENSEM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Normal,
    Adversarial,
}

impl Class {
    pub fn index(self) -> usize {
        match self {
            Class::Normal => 0,
            Class::Adversarial => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseLearner<F> {
    pub subspace: Vec<usize>,
    pub w: Vec<F>,
    pub b: F,
}

impl<F: Real> BaseLearner<F> {
    /// `true` votes adversarial. `x` is a full standardized feature row.
    #[inline]
    pub fn vote(&self, x: &[F]) -> bool {
        let mut s = F::zero();
        for (&i, &w) in self.subspace.iter().zip(&self.w) {
            s += w * x[i];
        }
        s > self.b
    }

    fn project_dense(&self, sub: &[F]) -> F {
        dot(&self.w, sub)
    }
}

/// Per-column affine map `(x - mean) * scale` learned on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<F> {
    pub mean: Vec<F>,
    pub scale: Vec<F>,
}

impl<F: Real> Standardizer<F> {
    pub fn fit(features: &FeatureTable<F>) -> Self {
        let (n, d) = (features.rows(), features.dim());
        let nf = F::from_usize_lossy(n.max(1));
        let mut mean = vec![F::zero(); d];
        for row in features.iter() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![F::zero(); d];
        for row in features.iter() {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / nf).sqrt();
                if sd > F::zero() {
                    sd.recip()
                } else {
                    F::one()
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[F]) -> Vec<F> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (&m, &s))| (v - m) * s)
            .collect()
    }

    pub fn apply_table(&self, t: &FeatureTable<F>) -> Vec<F> {
        let mut out = Vec::with_capacity(t.rows() * t.dim());
        for row in t.iter() {
            out.extend(self.apply(row));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<F> {
    pub descriptor: String,
    pub standardizer: Standardizer<F>,
    pub d_sub: usize,
    pub learners: Vec<BaseLearner<F>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Class,
    /// Fraction of learners agreeing with `label`.
    pub vote_fraction: f64,
}

fn majority(adv_votes: usize, total: usize) -> Class {
    if 2 * adv_votes >= total {
        Class::Adversarial
    } else {
        Class::Normal
    }
}

impl<F: Real> EnsembleModel<F> {
    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn n_learners(&self) -> usize {
        self.learners.len()
    }

    pub fn predict(&self, x: &[F]) -> Result<Prediction> {
        if x.len() != self.dim() {
            return Err(Error::dims(self.dim(), x.len()));
        }
        if self.learners.is_empty() {
            return Err(Error::Empty("ensemble".into()));
        }
        let z = self.standardizer.apply(x);
        let adv = self.learners.iter().filter(|l| l.vote(&z)).count();
        let n = self.learners.len();
        let label = majority(adv, n);
        let agree = if label == Class::Adversarial { adv } else { n - adv };
        Ok(Prediction {
            label,
            vote_fraction: agree as f64 / n as f64,
        })
    }

    pub fn predict_table(&self, t: &FeatureTable<F>) -> Result<Vec<Prediction>> {
        if t.dim() != self.dim() {
            return Err(Error::dims(self.dim(), t.dim()));
        }
        t.iter().collect::<Vec<_>>().par_iter().map(|r| self.predict(r)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        put_string(&mut out, &self.descriptor);
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for v in self.standardizer.mean.iter().chain(&self.standardizer.scale) {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out.extend_from_slice(&(self.d_sub as u64).to_le_bytes());
        out.extend_from_slice(&(self.learners.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for l in &self.learners {
            for &i in &l.subspace {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
            for v in &l.w {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
            out.extend_from_slice(&l.b.to_f64_lossy().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "ensemble model");
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::format("ensemble model", "bad magic"));
        }
        let descriptor = r.string()?;
        let d = r.u64()? as usize;
        let read_vec = |r: &mut ByteReader, n: usize| -> Result<Vec<F>> {
            (0..n).map(|_| r.f64().map(F::lit)).collect()
        };
        let mean = read_vec(&mut r, d)?;
        let scale = read_vec(&mut r, d)?;
        let d_sub = r.u64()? as usize;
        let n_learners = r.u64()? as usize;
        let seed_value = r.u64()?;
        let mut learners = Vec::with_capacity(n_learners.min(1 << 16));
        for _ in 0..n_learners {
            let subspace = (0..d_sub)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if subspace.iter().any(|&i| i >= d) || subspace.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::format("ensemble model", "invalid subspace indices"));
            }
            let w = read_vec(&mut r, d_sub)?;
            let b = F::lit(r.f64()?);
            learners.push(BaseLearner { subspace, w, b });
        }
        r.finish()?;
        Ok(EnsembleModel {
            descriptor,
            standardizer: Standardizer { mean, scale },
            d_sub,
            learners,
            seed: seed_value,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// In-place Cholesky factorization of a dense symmetric `k x k` matrix
/// (lower triangle is written). Returns `false` if not positive definite.
fn cholesky<F: Real>(a: &mut [F], k: usize) -> bool {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > F::zero()) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    true
}

fn cholesky_solve<F: Real>(l: &[F], k: usize, b: &mut [F]) {
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * k + p] * b[p];
        }
        b[i] = s / l[i * k + i];
    }
    for i in (0..k).rev() {
        let mut s = b[i];
        for p in i + 1..k {
            s -= l[p * k + i] * b[p];
        }
        b[i] = s / l[i * k + i];
    }
}

/// Rows of a dense row-major `n x d` matrix.
struct Dense<'a, F> {
    data: &'a [F],
    d: usize,
}

impl<F> Dense<'_, F> {
    #[inline]
    fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Fits one FLD on `rows` (with repetition) restricted to `subspace`.
fn fld_fit<F: Real>(x: &Dense<F>, labels: &[Class], rows: &[usize], subspace: &[usize], reg: f64) -> Result<BaseLearner<F>> {
    let k = subspace.len();
    if k == 0 {
        return Err(Error::Config("empty subspace".into()));
    }
    let mut counts = [0usize; 2];
    let mut sums = [vec![F::zero(); k], vec![F::zero(); k]];
    let mut sub = vec![F::zero(); rows.len() * k];
    for (r, &i) in rows.iter().enumerate() {
        let src = x.row(i);
        let dst = &mut sub[r * k..(r + 1) * k];
        for (o, &j) in dst.iter_mut().zip(subspace) {
            *o = src[j];
        }
        let c = labels[i].index();
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(dst.iter()) {
            *s += v;
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::SingleClass("FLD training set".into()));
    }
    let means: Vec<Vec<F>> = (0..2)
        .map(|c| {
            let n = F::from_usize_lossy(counts[c]);
            sums[c].iter().map(|&s| s / n).collect()
        })
        .collect();

    // within-class scatter, upper triangle
    let mut scatter = vec![F::zero(); k * k];
    let mut centered = vec![F::zero(); k];
    for (r, &i) in rows.iter().enumerate() {
        let m = &means[labels[i].index()];
        for ((c, &v), &mu) in centered.iter_mut().zip(&sub[r * k..(r + 1) * k]).zip(m) {
            *c = v - mu;
        }
        for a in 0..k {
            let ca = centered[a];
            if ca == F::zero() {
                continue;
            }
            let row = &mut scatter[a * k + a..a * k + k];
            for (s, &cb) in row.iter_mut().zip(&centered[a..]) {
                *s += ca * cb;
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            scatter[a * k + b] = scatter[b * k + a];
        }
    }
    let trace: F = (0..k).map(|a| scatter[a * k + a]).sum();
    let base = if trace > F::zero() {
        trace / F::from_usize_lossy(k)
    } else {
        F::one()
    };
    let diff: Vec<F> = means[1].iter().zip(&means[0]).map(|(&a, &b)| a - b).collect();

    // escalate the ridge when the factorization fails
    let mut lambda = F::lit(reg) * base;
    if lambda <= F::zero() {
        lambda = F::lit(1e-10) * base;
    }
    let mut w = None;
    for _ in 0..12 {
        let mut a = scatter.clone();
        for d in 0..k {
            a[d * k + d] += lambda;
        }
        if cholesky(&mut a, k) {
            let mut sol = diff.clone();
            cholesky_solve(&a, k, &mut sol);
            if sol.iter().all(|v| v.is_finite()) {
                w = Some(sol);
                break;
            }
        }
        lambda *= F::lit(10.0);
    }
    let w = w.ok_or(Error::Singular)?;

    let mut learner = BaseLearner {
        subspace: subspace.to_vec(),
        w,
        b: F::zero(),
    };
    let proj: Vec<(F, Class)> = rows
        .iter()
        .enumerate()
        .map(|(r, &i)| (learner.project_dense(&sub[r * k..(r + 1) * k]), labels[i]))
        .collect();
    let midpoint = (learner.project_dense(&means[0]) + learner.project_dense(&means[1])) * F::lit(0.5);
    learner.b = best_threshold(proj, counts, midpoint);
    Ok(learner)
}

/// Threshold minimizing `(FPR + FNR) / 2` for the rule `p > b => adversarial`;
/// among equally good thresholds the one closest to `midpoint` wins.
fn best_threshold<F: Real>(mut proj: Vec<(F, Class)>, counts: [usize; 2], midpoint: F) -> F {
    proj.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let (n0, n1) = (counts[0] as u128, counts[1] as u128);
    // threshold below everything: every sample called adversarial
    let mut fp = counts[0] as u128;
    let mut fneg = 0u128;
    let mut candidates: Vec<(u128, F)> = Vec::with_capacity(proj.len() + 1);
    let first = proj[0].0;
    candidates.push((fp * n1 + fneg * n0, first - F::one()));
    let mut i = 0;
    while i < proj.len() {
        let v = proj[i].0;
        while i < proj.len() && proj[i].0 == v {
            match proj[i].1 {
                Class::Normal => fp -= 1,
                Class::Adversarial => fneg += 1,
            }
            i += 1;
        }
        let b = if i < proj.len() {
            (v + proj[i].0) * F::lit(0.5)
        } else {
            v + F::one()
        };
        // a threshold equal to the tied value classifies it as normal too
        let b = if b == v { v } else { b };
        candidates.push((fp * n1 + fneg * n0, b));
    }
    let best_err = candidates.iter().map(|c| c.0).min().unwrap();
    let mut best: Option<F> = None;
    for &(err, b) in &candidates {
        if err == best_err && best.is_none_or(|cur| (b - midpoint).abs() < (cur - midpoint).abs()) {
            best = Some(b);
        }
    }
    // within the winning gap, move to the midpoint if it lies there
    let b = best.unwrap();
    let (lo, hi) = gap_around(&proj, b);
    if midpoint > lo && midpoint < hi {
        midpoint
    } else {
        b
    }
}

/// The open interval of thresholds equivalent to `b`.
fn gap_around<F: Real>(proj: &[(F, Class)], b: F) -> (F, F) {
    let mut lo = F::neg_infinity();
    let mut hi = F::infinity();
    for &(p, _) in proj {
        if p <= b && p > lo {
            lo = p;
        }
        if p > b && p < hi {
            hi = p;
        }
    }
    (lo, hi)
}

/// Trains a single Fisher linear discriminant on all rows of `features`
/// restricted to `subspace`. `reg` is the ridge relative to `tr(S_w)/k`.
pub fn fld_train<F: Real>(
    features: &FeatureTable<F>,
    labels: &[Class],
    subspace: &[usize],
    reg: f64,
) -> Result<BaseLearner<F>> {
    if labels.len() != features.rows() {
        return Err(Error::dims(features.rows(), labels.len()));
    }
    if subspace.len() > features.dim() || subspace.iter().any(|&i| i >= features.dim()) {
        return Err(Error::Config(format!(
            "subspace {subspace:?} out of range for dimension {}",
            features.dim()
        )));
    }
    let data: Vec<F> = features.iter().flatten().copied().collect();
    let x = Dense {
        data: &data,
        d: features.dim(),
    };
    let rows: Vec<usize> = (0..features.rows()).collect();
    fld_fit(&x, labels, &rows, subspace, reg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Explicit subspace dimensions; derived from the data when `None`.
    pub d_sub_grid: Option<Vec<usize>>,
    pub l_step: usize,
    pub l_max: usize,
    pub min_improvement: f64,
    pub reg: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            d_sub_grid: None,
            l_step: 50,
            l_max: 500,
            min_improvement: 0.005,
            reg: 1e-10,
        }
    }
}

/// `{d/32, d/16, ...}` up to `min(d, n/2)`; the cap itself if the grid is
/// empty.
pub fn default_d_sub_grid(d: usize, n: usize) -> Vec<usize> {
    let cap = d.min(n / 2).max(1);
    let mut grid = Vec::new();
    let mut div = 32;
    while div >= 1 {
        let v = d / div;
        if v >= 1 && v <= cap && grid.last() != Some(&v) {
            grid.push(v);
        }
        div /= 2;
    }
    if grid.is_empty() {
        grid.push(cap);
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OobPoint {
    pub d_sub: usize,
    pub l: usize,
    pub oob_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OobEstimate {
    pub error: f64,
    pub covered: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub model: EnsembleModel<F>,
    /// `in_bag[l][i]` is true when sample `i` was drawn for learner `l`.
    pub in_bag: Vec<Vec<bool>>,
    pub curve: Vec<OobPoint>,
    pub oob: OobEstimate,
}

struct Fitted<F> {
    learner: BaseLearner<F>,
    in_bag: Vec<bool>,
}

fn fit_member<F: Real>(
    x: &Dense<F>,
    labels: &[Class],
    d_sub: usize,
    seed_value: u64,
    reg: f64,
) -> Result<Fitted<F>> {
    let n = labels.len();
    let mut rng = seed::rng(seed_value, 0);
    let mut rows: Vec<usize>;
    loop {
        rows = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let adv = rows.iter().filter(|&&i| labels[i] == Class::Adversarial).count();
        if adv > 0 && adv < n {
            break;
        }
    }
    let mut subspace: Vec<usize> = index::sample(&mut rng, x.d, d_sub).into_vec();
    subspace.sort_unstable();
    let learner = fld_fit(x, labels, &rows, &subspace, reg)?;
    let mut in_bag = vec![false; n];
    rows.iter().for_each(|&i| in_bag[i] = true);
    Ok(Fitted { learner, in_bag })
}

/// Trains the ensemble with OOB-driven selection of subspace dimension and
/// ensemble size.
pub fn ensemble_train<F: Real>(
    features: &FeatureTable<F>,
    labels: &[Class],
    seed_value: u64,
    cfg: &EnsembleConfig,
) -> Result<TrainOutcome<F>> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::dims(n, labels.len()));
    }
    let n_adv = labels.iter().filter(|&&c| c == Class::Adversarial).count();
    if n_adv == 0 || n_adv == n {
        return Err(Error::SingleClass("ensemble training set".into()));
    }
    if n_adv < 20 || n - n_adv < 20 {
        return Err(Error::Config(format!(
            "need >= 20 samples per class, got {} normal / {n_adv} adversarial",
            n - n_adv
        )));
    }
    if cfg.l_step == 0 || cfg.l_max < cfg.l_step {
        return Err(Error::Config("invalid learner schedule".into()));
    }
    let d = features.dim();
    let standardizer = Standardizer::fit(features);
    let data = standardizer.apply_table(features);
    let x = Dense { data: &data, d };
    let grid = match &cfg.d_sub_grid {
        Some(g) if !g.is_empty() && g.iter().all(|&v| v >= 1 && v <= d) => g.clone(),
        Some(g) => return Err(Error::Config(format!("invalid d_sub grid {g:?}"))),
        None => default_d_sub_grid(d, n),
    };

    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Vec<Fitted<F>>)> = None;
    for (gi, &d_sub) in grid.iter().enumerate() {
        let mut members: Vec<Fitted<F>> = Vec::new();
        let mut adv_votes = vec![0usize; n];
        let mut total_votes = vec![0usize; n];
        let mut errors: Vec<f64> = Vec::new();
        while members.len() < cfg.l_max {
            let start = members.len();
            let batch: Vec<Fitted<F>> = (start..start + cfg.l_step)
                .into_par_iter()
                .map(|l| fit_member(&x, labels, d_sub, seed::derive_path(seed_value, &[gi as u64, l as u64]), cfg.reg))
                .collect::<Result<_>>()?;
            for m in &batch {
                for i in (0..n).filter(|&i| !m.in_bag[i]) {
                    total_votes[i] += 1;
                    if m.learner.vote(x.row(i)) {
                        adv_votes[i] += 1;
                    }
                }
            }
            members.extend(batch);
            let err = vote_error(&adv_votes, &total_votes, labels)?.error;
            curve.push(OobPoint {
                d_sub,
                l: members.len(),
                oob_error: err,
            });
            errors.push(err);
            if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
                best = Some((err, d_sub, Vec::new()));
            }
            if errors.len() >= 2 && errors[errors.len() - 2] - err < cfg.min_improvement {
                break;
            }
        }
        // keep the members of the winning configuration
        if let Some((e, bd, kept)) = &mut best {
            if *bd == d_sub && kept.is_empty() {
                let l = curve
                    .iter()
                    .find(|p| p.d_sub == d_sub && p.oob_error == *e)
                    .map(|p| p.l)
                    .unwrap();
                members.truncate(l);
                *kept = members;
            }
        }
    }
    let (_, d_sub, members) = best.expect("grid is nonempty");
    let (learners, in_bag): (Vec<_>, Vec<_>) = members.into_iter().map(|m| (m.learner, m.in_bag)).unzip();
    let model = EnsembleModel {
        descriptor: features.descriptor().to_string(),
        standardizer,
        d_sub,
        learners,
        seed: seed_value,
    };
    let oob = oob_error(&model, features, labels, &in_bag)?;
    Ok(TrainOutcome {
        model,
        in_bag,
        curve,
        oob,
    })
}

fn vote_error(adv_votes: &[usize], total_votes: &[usize], labels: &[Class]) -> Result<OobEstimate> {
    let mut wrong = 0usize;
    let mut covered = 0usize;
    for ((&a, &t), &y) in adv_votes.iter().zip(total_votes).zip(labels) {
        if t == 0 {
            continue;
        }
        covered += 1;
        if majority(a, t) != y {
            wrong += 1;
        }
    }
    if covered == 0 {
        return Err(Error::Empty("out-of-bag votes".into()));
    }
    Ok(OobEstimate {
        error: wrong as f64 / covered as f64,
        covered,
        skipped: labels.len() - covered,
    })
}

/// OOB majority-vote error of `model` given each learner's in-bag mask.
pub fn oob_error<F: Real>(
    model: &EnsembleModel<F>,
    features: &FeatureTable<F>,
    labels: &[Class],
    in_bag: &[Vec<bool>],
) -> Result<OobEstimate> {
    let n = features.rows();
    if labels.len() != n || in_bag.len() != model.learners.len() || in_bag.iter().any(|m| m.len() != n) {
        return Err(Error::dims(
            format!("{n} labels and {} masks of length {n}", model.learners.len()),
            format!("{} labels and {} masks", labels.len(), in_bag.len()),
        ));
    }
    let mut adv = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (i, row) in features.iter().enumerate() {
        let z = model.standardizer.apply(row);
        for (l, mask) in model.learners.iter().zip(in_bag) {
            if !mask[i] {
                total[i] += 1;
                if l.vote(&z) {
                    adv[i] += 1;
                }
            }
        }
    }
    vote_error(&adv, &total, labels)
}
