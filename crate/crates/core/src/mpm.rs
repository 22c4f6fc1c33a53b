//! Modification probability maps (MPM).
//!
//! An MPM assigns every pixel a relative probability of having been changed
//! by an attack. Gradient attacks use the mean of min-max normalized
//! absolute loss gradients toward `L` sampled target classes; optimization
//! attacks use the mean normalized absolute difference between the image
//! and `L` targeted adversarial examples; Deepfool uses a single untargeted
//! difference.
//!
//! Normalized maps are floored at `1/255` so that no pixel weight is ever
//! exactly zero, and a constant map normalizes to `0.5` everywhere.

use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackResult;
use crate::corpus::{write_file, GrayImage};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::num::Real;
use crate::seed;
use crate::store::ByteReader;
use crate::victim::VictimModel;

pub const FLOOR: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<F> {
    grid: Grid<F>,
}

impl<F: Real> ProbMap<F> {
    /// Wraps a grid, checking every value lies in `[1/255, 1]`.
    pub fn new(grid: Grid<F>) -> Result<Self> {
        let lo = F::lit(FLOOR);
        if let Some(v) = grid.as_slice().iter().find(|&&v| !(v >= lo && v <= F::one())) {
            return Err(Error::Config(format!("probability {v} outside [1/255, 1]")));
        }
        Ok(ProbMap { grid })
    }

    /// Constant map; `value` is clamped into `[1/255, 1]`.
    pub fn constant(width: usize, height: usize, value: F) -> Self {
        let v = value.max(F::lit(FLOOR)).min(F::one());
        ProbMap {
            grid: Grid::filled(width, height, v),
        }
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> F {
        self.grid.get(row, col)
    }

    pub fn grid(&self) -> &Grid<F> {
        &self.grid
    }

    pub fn values(&self) -> &[F] {
        self.grid.as_slice()
    }

    pub fn matches(&self, img: &GrayImage) -> bool {
        self.width() == img.width() && self.height() == img.height()
    }

    pub(crate) fn check_matches(&self, width: usize, height: usize) -> Result<()> {
        if self.width() != width || self.height() != height {
            return Err(Error::dims(
                format!("{width}x{height} probability map"),
                format!("{}x{}", self.width(), self.height()),
            ));
        }
        Ok(())
    }

    /// Multiplies every value by `k` without re-clamping. Used to test the
    /// scale invariance of the weighted features.
    pub fn scaled_unchecked(&self, k: F) -> Self {
        ProbMap {
            grid: self.grid.map(|v| v * k),
        }
    }

    /// 8-bit visualization (`round(255 * p)`).
    pub fn to_visual(&self) -> GrayImage {
        let px = self
            .values()
            .iter()
            .map(|&v| (v * F::lit(255.0)).round().to_f64_lossy().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage::new(self.width(), self.height(), px).expect("shape")
    }

    /// `PF1\n<width> <height>\n` followed by little-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("PF1\n{} {}\n", self.width(), self.height()).into_bytes();
        for v in self.values() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::format("probability map", r.to_string());
        let mut lines = 0;
        let mut header_end = 0;
        for (i, &b) in bytes.iter().enumerate() {
            if b == b'\n' {
                lines += 1;
                if lines == 2 {
                    header_end = i + 1;
                    break;
                }
            }
        }
        if lines < 2 {
            return Err(bad("truncated header"));
        }
        let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("non-UTF-8 header"))?;
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some("PF1") {
            return Err(bad("bad magic"));
        }
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .filter(|&v: &usize| v > 0)
                .ok_or_else(|| bad("bad dimensions"))
        };
        let (w, h) = (dim()?, dim()?);
        let mut r = ByteReader::new(&bytes[header_end..], "probability map");
        let mut vals = Vec::with_capacity(w * h);
        for _ in 0..w * h {
            vals.push(F::lit(r.f64()?));
        }
        r.finish()?;
        Self::new(Grid::from_vec(w, h, vals)?)
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpmConfig {
    /// Number of sampled target classes.
    pub l: usize,
    pub seed: u64,
}

impl Default for MpmConfig {
    fn default() -> Self {
        MpmConfig { l: 10, seed: 0 }
    }
}

/// Min-max normalization into `[1/255, 1]`; constant input maps to 0.5.
pub fn f_nor<F: Real>(map: &Grid<F>) -> Result<Grid<F>> {
    let vals = map.as_slice();
    if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("map value {v}")));
    }
    let (lo, hi) = vals
        .iter()
        .fold((F::infinity(), F::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if vals.is_empty() || hi == lo {
        return Ok(Grid::filled(map.width(), map.height(), F::lit(0.5)));
    }
    let floor = F::lit(FLOOR);
    let range = hi - lo;
    Ok(map.map(|v| ((v - lo) / range).max(floor).min(F::one())))
}

/// Sorted sample of `l` distinct classes from `0..n_classes` excluding
/// `exclude`.
pub fn sample_targets(n_classes: usize, exclude: usize, l: usize, seed_value: u64) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..n_classes).filter(|&c| c != exclude).collect();
    if l == 0 || l > pool.len() {
        return Err(Error::Config(format!(
            "need 1 <= L <= N-1 = {}, got L = {l}",
            pool.len()
        )));
    }
    let mut rng = seed::rng(seed_value, 0x4d50_4d);
    let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), l)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

fn mean_of_maps<F: Real>(width: usize, height: usize, maps: &[Grid<F>]) -> Result<ProbMap<F>> {
    let mut acc = Grid::filled(width, height, F::zero());
    for m in maps {
        for (a, &v) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *a += v;
        }
    }
    let n = F::from_usize_lossy(maps.len());
    let floor = F::lit(FLOOR);
    Ok(ProbMap {
        grid: acc.map(|v| (v / n).max(floor).min(F::one())),
    })
}

fn abs_diff_map<F: Real>(x: &GrayImage, adv: &GrayImage) -> Result<Grid<F>> {
    if !x.same_shape(adv) {
        return Err(Error::dims(
            format!("{}x{}", x.width(), x.height()),
            format!("{}x{}", adv.width(), adv.height()),
        ));
    }
    let vals = x
        .pixels()
        .iter()
        .zip(adv.pixels())
        .map(|(&a, &b)| F::from_u8(a.abs_diff(b)).unwrap())
        .collect();
    Grid::from_vec(x.width(), x.height(), vals)
}

/// MPM for gradient attacks: mean over `L` sampled targets of
/// `f_nor(|grad_X J(X, y_i)|)`. Targets exclude the predicted class.
pub fn mpm_gradient<F: Real>(model: &VictimModel<F>, x: &GrayImage, cfg: &MpmConfig) -> Result<ProbMap<F>> {
    let predicted = model.predict(x)?;
    let targets = sample_targets(model.n_classes(), predicted, cfg.l, cfg.seed)?;
    let pixels: Vec<F> = x.to_reals();
    let maps = targets
        .iter()
        .map(|&t| {
            let (_, g) = model.loss_and_grad_reals(&pixels, t)?;
            let abs = Grid::from_vec(x.width(), x.height(), g.into_iter().map(F::abs).collect())?;
            f_nor(&abs)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of_maps(x.width(), x.height(), &maps)
}

/// MPM for optimization attacks: mean over `L` targeted adversarial
/// examples of `f_nor(|X_i^adv - X|)`. Fails if more than half the targets
/// are not reached.
pub fn mpm_difference<F, A>(model: &VictimModel<F>, x: &GrayImage, cfg: &MpmConfig, attack: A) -> Result<ProbMap<F>>
where
    F: Real,
    A: Fn(&GrayImage, usize) -> Result<AttackResult> + Sync,
{
    let predicted = model.predict(x)?;
    let targets = sample_targets(model.n_classes(), predicted, cfg.l, cfg.seed)?;
    let results = targets
        .par_iter()
        .map(|&t| attack(x, t))
        .collect::<Result<Vec<_>>>()?;
    let failed: Vec<usize> = targets
        .iter()
        .zip(&results)
        .filter(|(_, r)| !r.success)
        .map(|(&t, _)| t)
        .collect();
    if 2 * failed.len() > targets.len() {
        return Err(Error::AttackFailures {
            failed: failed.len(),
            total: targets.len(),
            targets: failed,
        });
    }
    let maps = results
        .iter()
        .map(|r| f_nor(&abs_diff_map::<F>(x, &r.adversarial)?))
        .collect::<Result<Vec<_>>>()?;
    mean_of_maps(x.width(), x.height(), &maps)
}

/// MPM from one untargeted adversarial example: `f_nor(|X_adv - X|)`.
pub fn mpm_untargeted_diff<F: Real>(x: &GrayImage, adv: &GrayImage) -> Result<ProbMap<F>> {
    let g = f_nor(&abs_diff_map::<F>(x, adv)?)?;
    Ok(ProbMap { grid: g })
}
