//! SPAM features and the MPM-weighted ESPAM variant.
//!
//! Differences between neighbouring pixels are taken along eight directions
//! and clamped to `[-T, T]`; their first- or second-order Markov transition
//! probabilities are estimated per direction, averaged over the four
//! straight and the four diagonal directions, and concatenated.
//!
//! ESPAM weights every occurrence of a difference pattern by the product of
//! the probability-map values of the pixels it spans (three pixels for first
//! order, four for second) and forms the conditional probabilities from the
//! weighted counts. With a constant map it reduces to SPAM.

use serde::{Deserialize, Serialize};

use crate::corpus::GrayImage;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::mpm::ProbMap;
use crate::num::Real;
use crate::store::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
    DownRight,
    UpLeft,
    DownLeft,
    UpRight,
}

impl Direction {
    pub const STRAIGHT: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Up, Direction::Down];
    pub const DIAGONAL: [Direction; 4] = [
        Direction::UpRight,
        Direction::DownLeft,
        Direction::DownRight,
        Direction::UpLeft,
    ];

    /// `(row, col)` step of the scan.
    pub fn step(self) -> (isize, isize) {
        match self {
            Direction::Right => (0, 1),
            Direction::Left => (0, -1),
            Direction::Down => (1, 0),
            Direction::Up => (-1, 0),
            Direction::DownRight => (1, 1),
            Direction::UpLeft => (-1, -1),
            Direction::DownLeft => (1, -1),
            Direction::UpRight => (-1, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkovOrder {
    First,
    Second,
}

impl MarkovOrder {
    pub fn value(self) -> usize {
        match self {
            MarkovOrder::First => 1,
            MarkovOrder::Second => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpamConfig {
    pub t: u32,
    pub order: MarkovOrder,
}

impl Default for SpamConfig {
    fn default() -> Self {
        SpamConfig {
            t: 3,
            order: MarkovOrder::Second,
        }
    }
}

impl SpamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("SPAM truncation T must be >= 1".into()));
        }
        Ok(())
    }

    /// Entries per averaged transition matrix, `(2T+1)^(order+1)`.
    pub fn block_len(&self) -> usize {
        (2 * self.t as usize + 1).pow(self.order.value() as u32 + 1)
    }

    pub fn dim(&self) -> usize {
        2 * self.block_len()
    }

    pub fn descriptor(&self, enhanced: bool) -> String {
        format!(
            "{}:T{}:o{}",
            if enhanced { "espam" } else { "spam" },
            self.t,
            self.order.value()
        )
    }
}

/// Difference array along `dir`: entry `(a, b)` is `X[p] - X[p + step]` for
/// the anchor pixel `p = (a, b) + origin`, where `origin` is `(1, _)` /
/// `(_, 1)` for steps going up / left and 0 otherwise.
pub fn diff_array(x: &GrayImage, dir: Direction) -> Result<Grid<i32>> {
    if x.width() < 2 || x.height() < 2 {
        return Err(Error::TooSmall(format!(
            "difference arrays need >= 2x2, got {}x{}",
            x.width(),
            x.height()
        )));
    }
    let (dr, dc) = dir.step();
    let rows = x.height() - dr.unsigned_abs();
    let cols = x.width() - dc.unsigned_abs();
    let r0 = usize::from(dr < 0);
    let c0 = usize::from(dc < 0);
    Ok(Grid::from_fn(cols, rows, |a, b| {
        let (pr, pc) = (a + r0, b + c0);
        let (qr, qc) = ((pr as isize + dr) as usize, (pc as isize + dc) as usize);
        i32::from(x.get(pr, pc)) - i32::from(x.get(qr, qc))
    }))
}

/// Conditional transition probabilities along one direction, flattened with
/// the oldest difference most significant: index `(z, y, x)` for second
/// order, `(y, x)` for first.
fn transition_matrix<F: Real>(
    x: &GrayImage,
    dir: Direction,
    cfg: &SpamConfig,
    weights: Option<&ProbMap<F>>,
) -> Result<Vec<F>> {
    let d = diff_array(x, dir)?;
    let t = cfg.t as i32;
    let k = (2 * t + 1) as usize;
    let order = cfg.order.value();
    let (dr, dc) = dir.step();
    let r0 = usize::from(dr < 0);
    let c0 = usize::from(dc < 0);
    let span_r = dr.unsigned_abs() * order;
    let span_c = dc.unsigned_abs() * order;
    let mut joint = vec![F::zero(); cfg.block_len()];
    let mut cond = vec![F::zero(); cfg.block_len() / k];
    if d.height() <= span_r || d.width() <= span_c {
        return Ok(joint);
    }
    // anchor positions q such that q, q+s, ..., q+order*s are all in the array
    let a_lo = if dr < 0 { span_r } else { 0 };
    let a_hi = if dr > 0 { d.height() - span_r } else { d.height() };
    let b_lo = if dc < 0 { span_c } else { 0 };
    let b_hi = if dc > 0 { d.width() - span_c } else { d.width() };
    let bin = |v: i32| (v.clamp(-t, t) + t) as usize;
    for a in a_lo..a_hi {
        for b in b_lo..b_hi {
            let mut ctx = 0usize;
            for s in 0..order {
                let (ra, rb) = (a as isize + dr * s as isize, b as isize + dc * s as isize);
                ctx = ctx * k + bin(d.get(ra as usize, rb as usize));
            }
            let (ra, rb) = (a as isize + dr * order as isize, b as isize + dc * order as isize);
            let idx = ctx * k + bin(d.get(ra as usize, rb as usize));
            let w = match weights {
                None => F::one(),
                Some(p) => {
                    // pixels p, p+s, ..., p+(order+1)s
                    let (pr, pc) = ((a + r0) as isize, (b + c0) as isize);
                    (0..=order as isize + 1)
                        .map(|s| p.get((pr + dr * s) as usize, (pc + dc * s) as usize))
                        .fold(F::one(), |acc, v| acc * v)
                }
            };
            joint[idx] += w;
            cond[ctx] += w;
        }
    }
    for (i, v) in joint.iter_mut().enumerate() {
        let c = cond[i / k];
        *v = if c > F::zero() { *v / c } else { F::zero() };
    }
    Ok(joint)
}

/// Per-direction transition matrices, in the order of `dirs`.
pub fn direction_matrices<F: Real>(
    x: &GrayImage,
    cfg: &SpamConfig,
    dirs: &[Direction],
    weights: Option<&ProbMap<F>>,
) -> Result<Vec<Vec<F>>> {
    dirs.iter().map(|&d| transition_matrix(x, d, cfg, weights)).collect()
}

fn extract<F: Real>(x: &GrayImage, cfg: &SpamConfig, weights: Option<&ProbMap<F>>) -> Result<Vec<F>> {
    cfg.validate()?;
    let need = cfg.order.value() + 2;
    if x.width() < need || x.height() < need {
        return Err(Error::TooSmall(format!(
            "order-{} SPAM needs >= {need}x{need}, got {}x{}",
            cfg.order.value(),
            x.width(),
            x.height()
        )));
    }
    let quarter = F::lit(0.25);
    let mut out = Vec::with_capacity(cfg.dim());
    for group in [Direction::STRAIGHT, Direction::DIAGONAL] {
        let mats = direction_matrices(x, cfg, &group, weights)?;
        for i in 0..cfg.block_len() {
            out.push((mats[0][i] + mats[1][i] + mats[2][i] + mats[3][i]) * quarter);
        }
    }
    Ok(out)
}

pub fn spam_features<F: Real>(x: &GrayImage, cfg: &SpamConfig) -> Result<FeatureVector<F>> {
    Ok(FeatureVector::new(cfg.descriptor(false), extract(x, cfg, None)?))
}

pub fn espam_features<F: Real>(x: &GrayImage, p: &ProbMap<F>, cfg: &SpamConfig) -> Result<FeatureVector<F>> {
    p.check_matches(x.width(), x.height())?;
    Ok(FeatureVector::new(cfg.descriptor(true), extract(x, cfg, Some(p))?))
}
