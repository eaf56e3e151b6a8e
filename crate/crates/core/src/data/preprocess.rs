//! Intensity clipping/rescaling, spatial standardization, and conversion to
//! the backbone's input tensor.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{map_box_to_grid, GroundTruthMask, TightBox};
use crate::resize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub clip_lo_pct: f64,
    pub clip_hi_pct: f64,
    pub rescale_max: f64,
    pub crop_pad_size: (usize, usize),
    pub model_input: (usize, usize),
    /// Target in-plane spacing in mm; `None` skips resampling.
    pub resample_spacing: Option<f64>,
    /// Multiplier taking `[0, rescale_max]` to the backbone's input range.
    pub input_scale: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_lo_pct: 0.5,
            clip_hi_pct: 99.5,
            rescale_max: 255.0,
            crop_pad_size: (512, 512),
            model_input: (1024, 1024),
            resample_spacing: None,
            input_scale: 1.0 / 255.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.clip_lo_pct && self.clip_lo_pct < self.clip_hi_pct && self.clip_hi_pct <= 100.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= clip_lo_pct < clip_hi_pct <= 100, got {} / {}",
                self.clip_lo_pct, self.clip_hi_pct
            )));
        }
        let dims = [
            self.crop_pad_size.0,
            self.crop_pad_size.1,
            self.model_input.0,
            self.model_input.1,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("crop and model sizes must be positive".into()));
        }
        if matches!(self.resample_spacing, Some(s) if s.is_nan() || s <= 0.0) {
            return Err(Error::InvalidConfig("resample spacing must be > 0".into()));
        }
        Ok(())
    }
}

/// Nearest-rank percentile of already sorted values: the value at 1-based
/// rank `ceil(p/100 * n)`, clamped to `[1, n]`.
pub fn percentile_nearest_rank(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Clips to the configured percentiles, then min-max rescales to
/// `[0, rescale_max]`. A constant input maps to zeros.
pub fn preprocess_intensity(values: &[f32], cfg: &PreprocessConfig) -> Result<Vec<f32>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant("non-finite intensity".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let lo = f64::from(percentile_nearest_rank(&sorted, cfg.clip_lo_pct));
    let hi = f64::from(percentile_nearest_rank(&sorted, cfg.clip_hi_pct));
    if hi <= lo {
        return Ok(vec![0.0; values.len()]);
    }
    let scale = cfg.rescale_max / (hi - lo);
    Ok(values
        .iter()
        .map(|&v| ((f64::from(v).clamp(lo, hi) - lo) * scale) as f32)
        .collect())
}

/// Geometry of a standardization: optional resample to `resampled`, then a
/// shift by `offset` (negative = crop, positive = pad) into `out_shape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub in_shape: (usize, usize),
    pub resampled: (usize, usize),
    pub offset: (isize, isize),
    pub out_shape: (usize, usize),
}

impl SpatialTransform {
    /// Maps a box through the transform, clipping to the output. `None` if
    /// the box falls entirely in the cropped-away margin.
    pub fn apply_box(&self, bx: &TightBox) -> Option<TightBox> {
        let b = map_box_to_grid(bx, self.in_shape, self.resampled);
        let shift = |lo: usize, hi: usize, off: isize, len: usize| {
            let lo = lo as isize + off;
            let hi = hi as isize + off;
            if hi < 0 || lo >= len as isize {
                None
            } else {
                Some((lo.max(0) as usize, hi.min(len as isize - 1) as usize))
            }
        };
        let (rmin, rmax) = shift(b.rmin, b.rmax, self.offset.0, self.out_shape.0)?;
        let (cmin, cmax) = shift(b.cmin, b.cmax, self.offset.1, self.out_shape.1)?;
        Some(TightBox::new(rmin, cmin, rmax, cmax))
    }

    /// Maps a map on `out_shape` back to `in_shape`: undo the crop/pad
    /// (cropped-away margins become 0) and bilinearly undo the resampling.
    pub fn invert_grid(&self, grid: &Array2<f64>) -> Result<Array2<f64>> {
        if grid.dim() != self.out_shape {
            return Err(Error::shape(
                &[self.out_shape.0, self.out_shape.1],
                &[grid.nrows(), grid.ncols()],
            ));
        }
        let unshifted = shift_into(grid, (-self.offset.0, -self.offset.1), self.resampled);
        Ok(resize::bilinear(&unshifted, self.in_shape))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub image: Array2<f32>,
    pub mask: Option<GroundTruthMask>,
    pub transform: SpatialTransform,
}

fn center_offset(input: usize, output: usize) -> isize {
    if input >= output {
        -(((input - output) / 2) as isize)
    } else {
        ((output - input) / 2) as isize
    }
}

fn shift_into<T: Copy + Default>(src: &Array2<T>, offset: (isize, isize), out: (usize, usize)) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn(out, |(r, c)| {
        let sr = r as isize - offset.0;
        let sc = c as isize - offset.1;
        if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
            src[[sr as usize, sc as usize]]
        } else {
            T::default()
        }
    })
}

pub fn resize_image(img: &Array2<f32>, shape: (usize, usize)) -> Array2<f32> {
    resize::bilinear(&img.mapv(f64::from), shape).mapv(|v| v as f32)
}

/// Resamples to `cfg.resample_spacing` when both it and `spacing` are known,
/// then center-crops/zero-pads to `cfg.crop_pad_size`. Masks use
/// nearest-neighbor resampling.
pub fn spatial_standardize(
    image: &Array2<f32>,
    mask: Option<&GroundTruthMask>,
    spacing: Option<[f64; 2]>,
    cfg: &PreprocessConfig,
) -> Result<Standardized> {
    let in_shape = image.dim();
    if let Some(m) = mask {
        if m.shape() != in_shape {
            return Err(Error::shape(&[in_shape.0, in_shape.1], &[m.shape().0, m.shape().1]));
        }
    }
    let resampled = match (cfg.resample_spacing, spacing) {
        (Some(target), Some([sr, sc])) => (
            ((in_shape.0 as f64 * sr / target).round() as usize).max(1),
            ((in_shape.1 as f64 * sc / target).round() as usize).max(1),
        ),
        _ => in_shape,
    };
    let img = resize_image(image, resampled);
    let msk = mask.map(|m| resize::nearest(&m.grid, resampled));
    let out = cfg.crop_pad_size;
    let offset = (center_offset(resampled.0, out.0), center_offset(resampled.1, out.1));
    Ok(Standardized {
        image: shift_into(&img, offset, out),
        mask: msk.map(|m| GroundTruthMask::new(shift_into(&m, offset, out))),
        transform: SpatialTransform {
            in_shape,
            resampled,
            offset,
            out_shape: out,
        },
    })
}

/// Bilinear resize to `cfg.model_input`, replicate to three channels, and
/// scale by `cfg.input_scale`.
pub fn to_model_input(image: &Array2<f32>, cfg: &PreprocessConfig) -> Array3<f32> {
    let resized = resize_image(image, cfg.model_input);
    let scale = cfg.input_scale as f32;
    let (h, w) = cfg.model_input;
    Array3::from_shape_fn((3, h, w), |(_, r, c)| resized[[r, c]] * scale)
}
