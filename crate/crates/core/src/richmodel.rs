//! SRM-lite rich-model features and the MPM-weighted ESRM variant.
//!
//! Each residual of the bank is quantized with step `q = c` and truncated to
//! `[-T, T]`; horizontal and vertical fourth-order co-occurrences of the
//! quantized residual are accumulated and normalized to sum to one. ESRM adds
//! the maximum probability-map value over the four positions of each window
//! instead of one.
//!
//! Bank (version 1), in output order:
//!
//! | # | residual                                   | q |
//! |---|--------------------------------------------|---|
//! | 1 | first-order horizontal `X[i,j+1] - X[i,j]` | 1 |
//! | 2 | first-order vertical `X[i+1,j] - X[i,j]`   | 1 |
//! | 3 | second-order horizontal `(1, -2, 1)`       | 2 |
//! | 4 | second-order vertical `(1, -2, 1)^T`       | 2 |
//! | 5 | min of residuals 1 and 2                   | 1 |
//! | 6 | max of residuals 1 and 2                   | 1 |
//! | 7 | 3x3 "square" `[-1 2 -1; 2 -4 2; -1 2 -1]`  | 4 |
//!
//! No sign or direction symmetrization is applied, so the default
//! dimension is `7 * 2 * 5^4 = 8750`.

use crate::corpus::GrayImage;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::mpm::ProbMap;
use crate::num::Real;
use crate::store::FeatureVector;

pub const BANK_VERSION: u32 = 1;

/// Linear predictor residual `Z = K * X`, as `(row offset, col offset,
/// coefficient)` taps. Coefficients sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub taps: Vec<(isize, isize, f64)>,
}

impl Kernel {
    pub fn new(taps: Vec<(isize, isize, f64)>) -> Self {
        Kernel { taps }
    }

    pub fn first_order_h() -> Self {
        Kernel::new(vec![(0, 1, 1.0), (0, 0, -1.0)])
    }

    pub fn first_order_v() -> Self {
        Kernel::new(vec![(1, 0, 1.0), (0, 0, -1.0)])
    }

    pub fn second_order_h() -> Self {
        Kernel::new(vec![(0, -1, 1.0), (0, 0, -2.0), (0, 1, 1.0)])
    }

    pub fn second_order_v() -> Self {
        Kernel::new(vec![(-1, 0, 1.0), (0, 0, -2.0), (1, 0, 1.0)])
    }

    pub fn square3() -> Self {
        let k = [[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]];
        let mut taps = Vec::with_capacity(9);
        for (r, row) in k.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                taps.push((r as isize - 1, c as isize - 1, v));
            }
        }
        Kernel::new(taps)
    }

    pub fn coefficient_sum(&self) -> f64 {
        self.taps.iter().map(|t| t.2).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinMax {
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResidualKind {
    Linear(Kernel),
    MinMax(MinMax, Vec<Kernel>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSpec {
    pub name: &'static str,
    pub kind: ResidualKind,
    /// Central coefficient; used as the quantization step.
    pub c: f64,
}

/// The seven-residual SRM-lite bank.
pub fn srm_lite_bank() -> Vec<ResidualSpec> {
    let hv = || vec![Kernel::first_order_h(), Kernel::first_order_v()];
    vec![
        ResidualSpec {
            name: "s1-h",
            kind: ResidualKind::Linear(Kernel::first_order_h()),
            c: 1.0,
        },
        ResidualSpec {
            name: "s1-v",
            kind: ResidualKind::Linear(Kernel::first_order_v()),
            c: 1.0,
        },
        ResidualSpec {
            name: "s2-h",
            kind: ResidualKind::Linear(Kernel::second_order_h()),
            c: 2.0,
        },
        ResidualSpec {
            name: "s2-v",
            kind: ResidualKind::Linear(Kernel::second_order_v()),
            c: 2.0,
        },
        ResidualSpec {
            name: "s1-min",
            kind: ResidualKind::MinMax(MinMax::Min, hv()),
            c: 1.0,
        },
        ResidualSpec {
            name: "s1-max",
            kind: ResidualKind::MinMax(MinMax::Max, hv()),
            c: 1.0,
        },
        ResidualSpec {
            name: "s3x3",
            kind: ResidualKind::Linear(Kernel::square3()),
            c: 4.0,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RichModelConfig {
    pub t: u32,
    pub bank: Vec<ResidualSpec>,
}

impl Default for RichModelConfig {
    fn default() -> Self {
        RichModelConfig {
            t: 2,
            bank: srm_lite_bank(),
        }
    }
}

impl RichModelConfig {
    pub fn with_t(t: u32) -> Self {
        RichModelConfig {
            t,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("rich-model truncation T must be >= 1".into()));
        }
        if self.bank.is_empty() {
            return Err(Error::Config("empty residual bank".into()));
        }
        Ok(())
    }

    pub fn block_len(&self) -> usize {
        (2 * self.t as usize + 1).pow(4)
    }

    pub fn dim(&self) -> usize {
        self.bank.len() * 2 * self.block_len()
    }

    pub fn descriptor(&self, enhanced: bool) -> String {
        format!(
            "{}:v{}:T{}:n{}",
            if enhanced { "esrm" } else { "srmlite" },
            BANK_VERSION,
            self.t,
            self.bank.len()
        )
    }
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n - 1`.
#[inline]
pub(crate) fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Same-size residual `K * X` with mirror padding.
pub fn linear_residual<F: Real>(x: &GrayImage, kernel: &Kernel) -> Grid<F> {
    let (w, h) = (x.width(), x.height());
    let taps: Vec<(isize, isize, F)> = kernel.taps.iter().map(|&(r, c, v)| (r, c, F::lit(v))).collect();
    Grid::from_fn(w, h, |r, c| {
        let mut acc = F::zero();
        for &(dr, dc, k) in &taps {
            let rr = mirror(r as isize + dr, h);
            let cc = mirror(c as isize + dc, w);
            acc += k * F::from_u8(x.get(rr, cc)).unwrap();
        }
        acc
    })
}

/// Elementwise min or max over residuals.
pub fn minmax_residual<F: Real>(residuals: &[Grid<F>], mode: MinMax) -> Result<Grid<F>> {
    let first = residuals
        .first()
        .ok_or_else(|| Error::Empty("residual list".into()))?;
    if let Some(bad) = residuals.iter().find(|r| !r.same_shape(first)) {
        return Err(Error::dims(
            format!("{}x{}", first.width(), first.height()),
            format!("{}x{}", bad.width(), bad.height()),
        ));
    }
    let mut out = first.clone();
    for r in &residuals[1..] {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(r.as_slice()) {
            *o = match mode {
                MinMax::Min => o.min(v),
                MinMax::Max => o.max(v),
            };
        }
    }
    Ok(out)
}

pub fn residual<F: Real>(x: &GrayImage, spec: &ResidualSpec) -> Result<Grid<F>> {
    match &spec.kind {
        ResidualKind::Linear(k) => Ok(linear_residual(x, k)),
        ResidualKind::MinMax(mode, ks) => {
            let parts: Vec<Grid<F>> = ks.iter().map(|k| linear_residual(x, k)).collect();
            minmax_residual(&parts, *mode)
        }
    }
}

/// `clamp(round(z / q), -T, T)`, rounding half away from zero.
pub fn quantize_truncate<F: Real>(z: &Grid<F>, q: f64, t: u32) -> Result<Grid<i32>> {
    if !(q > 0.0) {
        return Err(Error::Config(format!("quantization step must be > 0, got {q}")));
    }
    if t == 0 {
        return Err(Error::Config("truncation T must be >= 1".into()));
    }
    if let Some(v) = z.as_slice().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("residual value {v}")));
    }
    let q = F::lit(q);
    let t = t as i32;
    Ok(z.map(|v| {
        let r = (v / q).round().to_f64_lossy();
        (r.clamp(-f64::from(t), f64::from(t))) as i32
    }))
}

/// Normalized fourth-order co-occurrence of `r` along `dir`, bins flattened
/// with `d0` most significant. With `weights`, each window contributes the
/// maximum weight over its four positions instead of one.
pub fn cooc4<F: Real>(
    r: &Grid<i32>,
    dir: ScanDirection,
    t: u32,
    weights: Option<&ProbMap<F>>,
) -> Result<Vec<F>> {
    if let Some(p) = weights {
        p.check_matches(r.width(), r.height())?;
    }
    let (w, h) = (r.width(), r.height());
    let (dr, dc) = match dir {
        ScanDirection::Horizontal => (0, 1),
        ScanDirection::Vertical => (1, 0),
    };
    if (dc == 1 && w < 4) || (dr == 1 && h < 4) {
        return Err(Error::TooSmall(format!(
            "co-occurrence needs 4 samples along the scan, got {w}x{h}"
        )));
    }
    let ti = t as i32;
    let k = (2 * t + 1) as usize;
    let mut bins = vec![F::zero(); k.pow(4)];
    for i in 0..h - 3 * dr {
        for j in 0..w - 3 * dc {
            let mut idx = 0usize;
            let mut wmax = F::zero();
            for s in 0..4 {
                let (ri, rj) = (i + s * dr, j + s * dc);
                let v = r.get(ri, rj);
                if v < -ti || v > ti {
                    return Err(Error::Config(format!("quantized value {v} outside [-{t}, {t}]")));
                }
                idx = idx * k + (v + ti) as usize;
                if let Some(p) = weights {
                    wmax = wmax.max(p.get(ri, rj));
                }
            }
            bins[idx] += if weights.is_some() { wmax } else { F::one() };
        }
    }
    let total: F = bins.iter().copied().sum();
    if total > F::zero() {
        bins.iter_mut().for_each(|b| *b /= total);
    }
    Ok(bins)
}

fn extract<F: Real>(x: &GrayImage, cfg: &RichModelConfig, weights: Option<&ProbMap<F>>) -> Result<Vec<F>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.dim());
    for spec in &cfg.bank {
        let z = residual::<F>(x, spec)?;
        let q = quantize_truncate(&z, spec.c, cfg.t)?;
        for dir in [ScanDirection::Horizontal, ScanDirection::Vertical] {
            out.extend(cooc4(&q, dir, cfg.t, weights)?);
        }
    }
    Ok(out)
}

pub fn srm_features<F: Real>(x: &GrayImage, cfg: &RichModelConfig) -> Result<FeatureVector<F>> {
    Ok(FeatureVector::new(cfg.descriptor(false), extract(x, cfg, None)?))
}

pub fn esrm_features<F: Real>(x: &GrayImage, p: &ProbMap<F>, cfg: &RichModelConfig) -> Result<FeatureVector<F>> {
    p.check_matches(x.width(), x.height())?;
    Ok(FeatureVector::new(cfg.descriptor(true), extract(x, cfg, Some(p))?))
}
