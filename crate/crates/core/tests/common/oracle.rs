//! Independent per-pixel loss oracle: no shared helpers with the library
//! beyond plain types.

#![allow(clippy::needless_range_loop)]

use boxprompt::constraints::*;
use boxprompt::geometry::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_box, random_map, rel_close};

pub fn psi(z: f64, barrier: bool, t: f64) -> f64 {
    if !barrier {
        return if z > 0.0 { t * z } else { 0.0 };
    }
    if z <= -1.0 / (t * t) {
        -(-z).ln() / t
    } else {
        t * z - (1.0 / (t * t)).ln() / t + 1.0 / t
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-7)
}

fn inside(b: [usize; 4], r: usize, c: usize) -> bool {
    r >= b[0] && r <= b[2] && c >= b[1] && c <= b[3]
}

pub fn empty(f: &[Vec<f64>], b: [usize; 4]) -> f64 {
    let mut s = 0.0;
    for (r, row) in f.iter().enumerate() {
        for (c, &p) in row.iter().enumerate() {
            if !inside(b, r, c) {
                s -= (1.0 - clamp(p)).ln();
            }
        }
    }
    s
}

pub fn tight(f: &[Vec<f64>], b: [usize; 4], w: usize, barrier: bool, t: f64) -> f64 {
    let mut s = 0.0;
    // horizontal bands: consecutive rows, full box width
    let mut r0 = b[0];
    while r0 <= b[2] {
        let r1 = (r0 + w - 1).min(b[2]);
        let mut mass = 0.0;
        for r in r0..=r1 {
            for c in b[1]..=b[3] {
                mass += f[r][c];
            }
        }
        s += psi((r1 - r0 + 1) as f64 - mass, barrier, t);
        r0 += w;
    }
    let mut c0 = b[1];
    while c0 <= b[3] {
        let c1 = (c0 + w - 1).min(b[3]);
        let mut mass = 0.0;
        for r in b[0]..=b[2] {
            for c in c0..=c1 {
                mass += f[r][c];
            }
        }
        s += psi((c1 - c0 + 1) as f64 - mass, barrier, t);
        c0 += w;
    }
    s
}

pub fn size(f: &[Vec<f64>], b: [usize; 4], lo: f64, hi: f64, barrier: bool, t: f64) -> f64 {
    let area = ((b[2] - b[0] + 1) * (b[3] - b[1] + 1)) as f64;
    let mass: f64 = f.iter().flatten().sum();
    psi(lo * area - mass, barrier, t) + psi(mass - hi * area, barrier, t)
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// Compares the library losses with the oracle on `cases` random grids up to
/// 16x16 at `rel` relative tolerance.
pub fn compare_losses(cases: usize, seed: u64, rel: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let shape = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let bx = random_box(&mut rng, shape);
        let w = rng.gen_range(1..=6);
        // mix of generic values and values close to 0 / 1
        let f = random_map(&mut rng, shape, 0.0, 1.0).mapv(|v| if v < 0.05 { 0.0 } else { v });
        let barrier = rng.gen_bool(0.5);
        let t = [1.0, 5.0, 50.0][rng.gen_range(0..3)];
        let cfg = PenaltyConfig {
            kind: if barrier {
                PenaltyKind::PseudoLogBarrier
            } else {
                PenaltyKind::ScaledRelu
            },
            t,
        };
        let prior = SizePrior {
            eps_lo: 0.5,
            eps_hi: 0.9,
        };
        let pm = ProbabilityMap::new(f.clone()).unwrap();
        let part = partition_regions(&bx, shape).unwrap();
        let segs = build_segments(&bx, w).unwrap();
        let rows = to_rows(&f);
        let b = bx.as_array();

        let pairs = [
            (emptiness_loss(&pm, &part).unwrap(), empty(&rows, b)),
            (
                tightness_loss(&pm, &segs, &cfg).unwrap(),
                tight(&rows, b, w, barrier, t),
            ),
            (
                size_loss(&pm, &part, &prior, &cfg).unwrap(),
                size(&rows, b, 0.5, 0.9, barrier, t),
            ),
        ];
        for (i, (got, want)) in pairs.into_iter().enumerate() {
            if !rel_close(got, want, rel, 1e-12) {
                return Err(format!("case {case} loss {i}: {got} vs {want}"));
            }
        }
    }
    Ok(())
}
