//! Binarization, Dice scoring, and report aggregation.

use ndarray::Zip;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{decode_mask, Backbone, ImageEmbedding};
use crate::data::SpatialTransform;
use crate::error::{Error, Result};
use crate::geometry::{GroundTruthMask, ProbabilityMap, TightBox};
use crate::promptnet::{PromptEmbedding, PromptModule};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel is foreground iff `f >= threshold`.
pub fn binarize(f: &ProbabilityMap, threshold: f64) -> GroundTruthMask {
    GroundTruthMask::new(f.grid.mapv(|p| u8::from(p >= threshold)))
}

/// `2|a ∩ b| / (|a| + |b|)`, and 1 when both are empty.
pub fn dice(a: &GroundTruthMask, b: &GroundTruthMask) -> Result<f64> {
    if a.shape() != b.shape() {
        let (sa, sb) = (a.shape(), b.shape());
        return Err(Error::shape(&[sa.0, sa.1], &[sb.0, sb.1]));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    Zip::from(&a.grid).and(&b.grid).for_each(|&x, &y| {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        total += usize::from(x) + usize::from(y);
    });
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleScore>,
    pub mean: f64,
    /// Population std across samples.
    pub std: f64,
    pub n: usize,
    pub config_fingerprint: String,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_scores(per_sample: Vec<SampleScore>, config_fingerprint: impl Into<String>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::EmptyInput);
        }
        let dices: Vec<f64> = per_sample.iter().map(|s| s.dice).collect();
        let (mean, std) = mean_std(&dices);
        Ok(Self {
            n: per_sample.len(),
            per_sample,
            mean,
            std,
            config_fingerprint: config_fingerprint.into(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice\n");
        for s in &self.per_sample {
            out.push_str(&format!("{},{}\n", s.id, s.dice));
        }
        out
    }
}

/// A held-out image ready for scoring: its cached embedding, the ground
/// truth at original resolution, and the transform from original to the
/// standardized frame the backbone input was resized from.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub embedding: ImageEmbedding,
    pub mask: Option<GroundTruthMask>,
    pub transform: SpatialTransform,
    /// Tight box in backbone input coordinates, for box-prompted baselines.
    pub input_box: Option<TightBox>,
}

/// Decodes `pr` and maps the probabilities back to original resolution.
pub fn predict_original(backbone: &dyn Backbone, sample: &EvalSample, pr: &PromptEmbedding) -> Result<ProbabilityMap> {
    let f = decode_mask(backbone, &sample.embedding, pr, sample.transform.out_shape)?;
    let back = sample.transform.invert_grid(&f.grid)?;
    ProbabilityMap::new(back.mapv(|p| p.clamp(0.0, 1.0)))
}

fn score_all<F>(samples: &[EvalSample], threshold: f64, fingerprint: &str, predict: F) -> Result<MetricsReport>
where
    F: Fn(&EvalSample) -> Result<ProbabilityMap> + Sync,
{
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scores = samples
        .par_iter()
        .map(|s| {
            let mask = s.mask.as_ref().ok_or_else(|| Error::MissingMask(s.id.clone()))?;
            let f = predict(s)?;
            Ok(SampleScore {
                id: s.id.clone(),
                dice: dice(&binarize(&f, threshold), mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_scores(scores, fingerprint)
}

/// Dice of the prompt module's predictions at original resolution.
pub fn evaluate(
    backbone: &dyn Backbone,
    module: &PromptModule,
    samples: &[EvalSample],
    threshold: f64,
    config_fingerprint: &str,
) -> Result<MetricsReport> {
    score_all(samples, threshold, config_fingerprint, |s| {
        let pr = module.forward(&s.embedding)?;
        predict_original(backbone, s, &pr)
    })
}

/// Same scoring with the backbone's own tight-box prompt in place of the
/// learned prompt.
pub fn evaluate_prompted_baseline(
    backbone: &dyn Backbone,
    samples: &[EvalSample],
    threshold: f64,
    config_fingerprint: &str,
) -> Result<MetricsReport> {
    score_all(samples, threshold, config_fingerprint, |s| {
        let bx = s
            .input_box
            .ok_or_else(|| Error::InvalidManifest(format!("no box for {:?}", s.id)))?;
        let pr = backbone.encode_box_prompt(&bx)?;
        predict_original(backbone, s, &pr)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    /// Mean of run means.
    pub mean: f64,
    /// Population std of run means.
    pub std: f64,
    pub n_runs: usize,
    /// Mean and population std over every per-sample score of every run.
    pub pooled_mean: f64,
    pub pooled_std: f64,
    pub n_samples: usize,
}

/// Sums run in sorted order so the result does not depend on input order.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<RunAggregate> {
    if reports.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
    means.sort_by(f64::total_cmp);
    let (mean, std) = mean_std(&means);
    let mut pooled: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.per_sample.iter().map(|s| s.dice))
        .collect();
    pooled.sort_by(f64::total_cmp);
    let (pooled_mean, pooled_std) = if pooled.is_empty() {
        (mean, 0.0)
    } else {
        mean_std(&pooled)
    };
    Ok(RunAggregate {
        mean,
        std,
        n_runs: reports.len(),
        pooled_mean,
        pooled_std,
        n_samples: pooled.len(),
    })
}
