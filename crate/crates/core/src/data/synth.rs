//! Synthetic single-ellipse segmentation data.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{tight_box_from_mask, GroundTruthMask, TightBox};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    /// Integer-valued intensities in `[0, 255]`.
    pub image: Array2<f32>,
    pub mask: GroundTruthMask,
    pub tight_box: TightBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub canvas: (usize, usize),
    /// Semi-axis range as a fraction of the shorter canvas side.
    pub axis_frac: (f64, f64),
    pub foreground: (f64, f64),
    pub background: (f64, f64),
    pub noise_std: f64,
    pub axis_aligned: bool,
    pub id_prefix: String,
}

impl SynthOptions {
    pub fn new(canvas: (usize, usize)) -> Self {
        Self {
            canvas,
            axis_frac: (0.12, 0.3),
            foreground: (150.0, 230.0),
            background: (20.0, 80.0),
            noise_std: 12.0,
            axis_aligned: false,
            id_prefix: "synth".into(),
        }
    }
}

pub fn generate_synthetic(n: usize, seed: u64, canvas: (usize, usize)) -> Vec<SyntheticSample> {
    generate_synthetic_with(n, seed, &SynthOptions::new(canvas))
}

/// Each sample is one filled ellipse (random center, semi-axes, rotation and
/// intensity) on a noisy background, fully inside the canvas.
pub fn generate_synthetic_with(n: usize, seed: u64, opts: &SynthOptions) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, opts.noise_std.max(0.0)).expect("finite std");
    let (h, w) = opts.canvas;
    let short = h.min(w) as f64;
    let (amin, amax) = ((opts.axis_frac.0 * short).max(1.0), (opts.axis_frac.1 * short).max(1.0));
    (0..n)
        .map(|i| loop {
            let a = rng.gen_range(amin..=amax);
            let b = rng.gen_range(amin..=amax);
            let theta = if opts.axis_aligned {
                0.0
            } else {
                rng.gen_range(0.0..std::f64::consts::PI)
            };
            // extent of the rotated ellipse along rows / cols
            let (s, c) = theta.sin_cos();
            let ext_r = ((a * s).powi(2) + (b * c).powi(2)).sqrt();
            let ext_c = ((a * c).powi(2) + (b * s).powi(2)).sqrt();
            let margin_r = ext_r + 1.0;
            let margin_c = ext_c + 1.0;
            if 2.0 * margin_r >= h as f64 || 2.0 * margin_c >= w as f64 {
                continue;
            }
            let cy = rng.gen_range(margin_r..h as f64 - margin_r);
            let cx = rng.gen_range(margin_c..w as f64 - margin_c);
            let fg = rng.gen_range(opts.foreground.0..=opts.foreground.1);
            let bg = rng.gen_range(opts.background.0..=opts.background.1);
            let mask = Array2::from_shape_fn((h, w), |(r, col)| {
                let dy = r as f64 + 0.5 - cy;
                let dx = col as f64 + 0.5 - cx;
                // column axis is `a` before rotation
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u8::from((u / a).powi(2) + (v / b).powi(2) <= 1.0)
            });
            let mask = GroundTruthMask::new(mask);
            let Ok(tight_box) = tight_box_from_mask(&mask) else {
                continue;
            };
            let image = Array2::from_shape_fn((h, w), |idx| {
                let base = if mask.grid[idx] != 0 { fg } else { bg };
                (base + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as f32
            });
            break SyntheticSample {
                id: format!("{}_{i:04}", opts.id_prefix),
                image,
                mask,
                tight_box,
            };
        })
        .collect()
}
