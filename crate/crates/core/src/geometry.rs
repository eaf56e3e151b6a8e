//! Masks, boxes, and the region/segment decompositions the weak-supervision
//! losses are written against.
//!
//! Coordinates are `(row, col)`, origin top-left, row-major. Box bounds are
//! inclusive on both ends.

use std::ops::Range;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An input image, `channels x height x width` with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Array3<f32>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Array3<f32>) -> Result<Self> {
        let id = id.into();
        let (c, h, w) = pixels.dim();
        if h == 0 || w == 0 || !(c == 1 || c == 3) {
            return Err(Error::shape(&[3, h.max(1), w.max(1)], &[c, h, w]));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("image {id} has non-finite pixels")));
        }
        Ok(Self { id, pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Binary ground-truth mask. Any nonzero value is foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub grid: Array2<u8>,
}

impl GroundTruthMask {
    pub fn new(grid: Array2<u8>) -> Self {
        Self {
            grid: grid.mapv(|v| u8::from(v != 0)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn foreground_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TightBox {
    pub rmin: usize,
    pub cmin: usize,
    pub rmax: usize,
    pub cmax: usize,
}

impl TightBox {
    pub fn new(rmin: usize, cmin: usize, rmax: usize, cmax: usize) -> Self {
        debug_assert!(rmin <= rmax && cmin <= cmax);
        Self { rmin, cmin, rmax, cmax }
    }

    pub fn height(&self) -> usize {
        self.rmax - self.rmin + 1
    }

    pub fn width(&self) -> usize {
        self.cmax - self.cmin + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.rmin..=self.rmax).contains(&r) && (self.cmin..=self.cmax).contains(&c)
    }

    pub fn check_fits(&self, shape: (usize, usize)) -> Result<()> {
        let (h, w) = shape;
        if self.rmin > self.rmax || self.cmin > self.cmax || self.rmax >= h || self.cmax >= w {
            return Err(Error::BoxOutOfBounds {
                rmin: self.rmin,
                cmin: self.cmin,
                rmax: self.rmax,
                cmax: self.cmax,
                height: h,
                width: w,
            });
        }
        Ok(())
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.rmin, self.cmin, self.rmax, self.cmax]
    }
}

impl From<[usize; 4]> for TightBox {
    fn from(v: [usize; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// Inside/outside split of the pixel domain induced by a box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    pub inside: Array2<u8>,
    pub outside: Array2<u8>,
    pub inside_count: usize,
}

impl RegionPartition {
    pub fn shape(&self) -> (usize, usize) {
        self.inside.dim()
    }

    pub fn outside_count(&self) -> usize {
        self.inside.len() - self.inside_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// One band of the tightness prior: a rectangular pixel set and the
/// probability mass it must carry.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub orientation: Orientation,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub threshold: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .clone()
            .flat_map(move |r| self.cols.clone().map(move |c| (r, c)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
    pub band_width: usize,
}

impl SegmentSet {
    pub fn horizontal(&self) -> impl Iterator<Item = &Segment> {
        self.segments
            .iter()
            .filter(|s| s.orientation == Orientation::Horizontal)
    }

    pub fn vertical(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.orientation == Orientation::Vertical)
    }
}

/// Per-pixel foreground probability on a 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub grid: Array2<f64>,
}

impl ProbabilityMap {
    pub fn new(grid: Array2<f64>) -> Result<Self> {
        if let Some(v) = grid.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Invariant(format!("probability {v} outside [0,1]")));
        }
        Ok(Self { grid })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }
}

pub fn tight_box_from_mask(mask: &GroundTruthMask) -> Result<TightBox> {
    let mut bounds: Option<TightBox> = None;
    for ((r, c), &v) in mask.grid.indexed_iter() {
        if v == 0 {
            continue;
        }
        bounds = Some(match bounds {
            None => TightBox::new(r, c, r, c),
            Some(b) => TightBox {
                rmin: b.rmin.min(r),
                cmin: b.cmin.min(c),
                rmax: b.rmax.max(r),
                cmax: b.cmax.max(c),
            },
        });
    }
    bounds.ok_or(Error::EmptyMask)
}

pub fn partition_regions(bx: &TightBox, shape: (usize, usize)) -> Result<RegionPartition> {
    bx.check_fits(shape)?;
    let inside = Array2::from_shape_fn(shape, |(r, c)| u8::from(bx.contains(r, c)));
    let outside = inside.mapv(|v| 1 - v);
    Ok(RegionPartition {
        inside,
        outside,
        inside_count: bx.area(),
    })
}

/// Splits the box into non-overlapping bands of `w` rows (horizontal) and
/// `w` columns (vertical). A trailing band narrower than `w` keeps its own
/// width as threshold.
pub fn build_segments(bx: &TightBox, w: usize) -> Result<SegmentSet> {
    if w < 1 {
        return Err(Error::InvalidWidth(w));
    }
    let mut segments = Vec::new();
    let bands = |lo: usize, hi_incl: usize| {
        (lo..=hi_incl)
            .step_by(w)
            .map(move |start| start..(start + w).min(hi_incl + 1))
    };
    for rows in bands(bx.rmin, bx.rmax) {
        segments.push(Segment {
            orientation: Orientation::Horizontal,
            threshold: rows.len() as f64,
            rows,
            cols: bx.cmin..bx.cmax + 1,
        });
    }
    for cols in bands(bx.cmin, bx.cmax) {
        segments.push(Segment {
            orientation: Orientation::Vertical,
            threshold: cols.len() as f64,
            rows: bx.rmin..bx.rmax + 1,
            cols,
        });
    }
    Ok(SegmentSet {
        segments,
        band_width: w,
    })
}

/// Rescales a box between grids. The continuous extent `[min, max + 1)` is
/// scaled, then the start is floored and the end ceiled, so the mapped box
/// covers every target pixel the original box touches.
pub fn map_box_to_grid(bx: &TightBox, from_shape: (usize, usize), to_shape: (usize, usize)) -> TightBox {
    let lo = |v: usize, from: usize, to: usize| (v * to) / from;
    let hi = |v: usize, from: usize, to: usize| {
        let end = ((v + 1) * to).div_ceil(from);
        end.saturating_sub(1).min(to - 1)
    };
    let (fh, fw) = from_shape;
    let (th, tw) = to_shape;
    TightBox {
        rmin: lo(bx.rmin, fh, th).min(th - 1),
        cmin: lo(bx.cmin, fw, tw).min(tw - 1),
        rmax: hi(bx.rmax, fh, th),
        cmax: hi(bx.cmax, fw, tw),
    }
}
