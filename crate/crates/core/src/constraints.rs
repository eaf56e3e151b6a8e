//! Box-supervision losses over a probability map: emptiness outside the box,
//! band-wise tightness inside it, and a two-sided size prior, combined into
//! one weighted objective.
//!
//! Every loss is a plain sum over pixels (no normalization) and returns its
//! gradient with respect to each pixel of the probability map.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ProbabilityMap, RegionPartition, SegmentSet};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    ScaledRelu,
    PseudoLogBarrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub t: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            kind: PenaltyKind::PseudoLogBarrier,
            t: 5.0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::InvalidConfig(format!("penalty t must be > 0, got {}", self.t)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizePrior {
    pub eps_lo: f64,
    pub eps_hi: f64,
}

impl Default for SizePrior {
    fn default() -> Self {
        Self {
            eps_lo: 0.5,
            eps_hi: 0.9,
        }
    }
}

impl SizePrior {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.eps_lo && self.eps_lo <= self.eps_hi && self.eps_hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "size prior needs 0 <= eps_lo <= eps_hi <= 1, got [{}, {}]",
                self.eps_lo, self.eps_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_tight: f64,
    pub lambda_size: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_tight: 1e-4,
            lambda_size: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tight >= 0.0 && self.lambda_size >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub empty: f64,
    pub tight: f64,
    pub size: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(empty: f64, tight: f64, size: f64, weights: &LossWeights) -> Self {
        Self {
            empty,
            tight,
            size,
            total: empty + weights.lambda_tight * tight + weights.lambda_size * size,
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &LossBreakdown, scale: f64) {
        self.empty += scale * other.empty;
        self.tight += scale * other.tight;
        self.size += scale * other.size;
        self.total += scale * other.total;
    }
}

/// A loss value together with its gradient w.r.t. the probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct WithGrad<T> {
    pub value: T,
    pub grad: Array2<f64>,
}

/// `t * max(0, z)` or the log-barrier extension
/// `-ln(-z)/t` for `z <= -1/t^2`, `t*z - ln(1/t^2)/t + 1/t` above.
pub fn penalty(z: f64, cfg: &PenaltyConfig) -> f64 {
    let t = cfg.t;
    match cfg.kind {
        PenaltyKind::ScaledRelu => t * z.max(0.0),
        PenaltyKind::PseudoLogBarrier => {
            if z <= -1.0 / (t * t) {
                -(-z).ln() / t
            } else {
                t * z - (1.0 / (t * t)).ln() / t + 1.0 / t
            }
        }
    }
}

pub fn penalty_derivative(z: f64, cfg: &PenaltyConfig) -> f64 {
    let t = cfg.t;
    match cfg.kind {
        PenaltyKind::ScaledRelu => {
            if z > 0.0 {
                t
            } else {
                0.0
            }
        }
        PenaltyKind::PseudoLogBarrier => {
            if z <= -1.0 / (t * t) {
                -1.0 / (t * z)
            } else {
                t
            }
        }
    }
}

fn check_shape(f: &ProbabilityMap, shape: (usize, usize)) -> Result<()> {
    if f.shape() != shape {
        return Err(Error::shape(&[shape.0, shape.1], &[f.shape().0, f.shape().1]));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub fn emptiness_loss_grad(f: &ProbabilityMap, part: &RegionPartition) -> Result<WithGrad<f64>> {
    check_shape(f, part.shape())?;
    let mut value = 0.0;
    let mut grad = Array2::zeros(f.shape());
    for ((idx, &p), &out) in f.grid.indexed_iter().zip(part.outside.iter()) {
        if out == 0 {
            continue;
        }
        let q = clamp_prob(p);
        value -= (1.0 - q).ln();
        if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
            grad[idx] = 1.0 / (1.0 - q);
        }
    }
    Ok(WithGrad { value, grad })
}

pub fn emptiness_loss(f: &ProbabilityMap, part: &RegionPartition) -> Result<f64> {
    emptiness_loss_grad(f, part).map(|l| l.value)
}

fn segment_mass(f: &ProbabilityMap, seg: &crate::geometry::Segment) -> f64 {
    f.grid.slice(ndarray::s![seg.rows.clone(), seg.cols.clone()]).sum()
}

pub fn tightness_loss_grad(f: &ProbabilityMap, segs: &SegmentSet, cfg: &PenaltyConfig) -> Result<WithGrad<f64>> {
    let (h, w) = f.shape();
    let mut value = 0.0;
    let mut grad = Array2::zeros((h, w));
    for seg in &segs.segments {
        if seg.rows.end > h || seg.cols.end > w {
            return Err(Error::shape(&[seg.rows.end, seg.cols.end], &[h, w]));
        }
        let z = seg.threshold - segment_mass(f, seg);
        value += penalty(z, cfg);
        let dz = -penalty_derivative(z, cfg);
        grad.slice_mut(ndarray::s![seg.rows.clone(), seg.cols.clone()])
            .mapv_inplace(|g| g + dz);
    }
    Ok(WithGrad { value, grad })
}

pub fn tightness_loss(f: &ProbabilityMap, segs: &SegmentSet, cfg: &PenaltyConfig) -> Result<f64> {
    tightness_loss_grad(f, segs, cfg).map(|l| l.value)
}

/// Mass is summed over the whole grid and compared against fractions of the
/// box area.
pub fn size_loss_grad(
    f: &ProbabilityMap,
    part: &RegionPartition,
    prior: &SizePrior,
    cfg: &PenaltyConfig,
) -> Result<WithGrad<f64>> {
    check_shape(f, part.shape())?;
    let mass = f.grid.sum();
    let area = part.inside_count as f64;
    let z_lo = prior.eps_lo * area - mass;
    let z_hi = mass - prior.eps_hi * area;
    let value = penalty(z_lo, cfg) + penalty(z_hi, cfg);
    let d = penalty_derivative(z_hi, cfg) - penalty_derivative(z_lo, cfg);
    Ok(WithGrad {
        value,
        grad: Array2::from_elem(f.shape(), d),
    })
}

pub fn size_loss(f: &ProbabilityMap, part: &RegionPartition, prior: &SizePrior, cfg: &PenaltyConfig) -> Result<f64> {
    size_loss_grad(f, part, prior, cfg).map(|l| l.value)
}

pub fn total_loss_grad(
    f: &ProbabilityMap,
    part: &RegionPartition,
    segs: &SegmentSet,
    weights: &LossWeights,
    prior: &SizePrior,
    cfg: &PenaltyConfig,
) -> Result<WithGrad<LossBreakdown>> {
    let empty = emptiness_loss_grad(f, part)?;
    let tight = tightness_loss_grad(f, segs, cfg)?;
    let size = size_loss_grad(f, part, prior, cfg)?;
    let mut grad = empty.grad;
    grad.scaled_add(weights.lambda_tight, &tight.grad);
    grad.scaled_add(weights.lambda_size, &size.grad);
    Ok(WithGrad {
        value: LossBreakdown::compose(empty.value, tight.value, size.value, weights),
        grad,
    })
}

pub fn total_loss(
    f: &ProbabilityMap,
    part: &RegionPartition,
    segs: &SegmentSet,
    weights: &LossWeights,
    prior: &SizePrior,
    cfg: &PenaltyConfig,
) -> Result<LossBreakdown> {
    total_loss_grad(f, part, segs, weights, prior, cfg).map(|l| l.value)
}
