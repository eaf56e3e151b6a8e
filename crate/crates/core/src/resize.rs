//! Separable bilinear resampling (half-pixel centers, edge clamped) and its
//! adjoint, plus nearest-neighbor resampling for label grids.

use ndarray::Array2;

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w_hi = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, w_hi }
        })
        .collect()
}

pub fn bilinear(input: &Array2<f64>, out_shape: (usize, usize)) -> Array2<f64> {
    let (ih, iw) = input.dim();
    if (ih, iw) == out_shape {
        return input.clone();
    }
    let ty = taps(ih, out_shape.0);
    let tx = taps(iw, out_shape.1);
    // columns first, then rows
    let mut tmp = Array2::<f64>::zeros((ih, out_shape.1));
    for r in 0..ih {
        for (c, t) in tx.iter().enumerate() {
            tmp[[r, c]] = input[[r, t.lo]] * (1.0 - t.w_hi) + input[[r, t.hi]] * t.w_hi;
        }
    }
    let mut out = Array2::<f64>::zeros(out_shape);
    for (r, t) in ty.iter().enumerate() {
        for c in 0..out_shape.1 {
            out[[r, c]] = tmp[[t.lo, c]] * (1.0 - t.w_hi) + tmp[[t.hi, c]] * t.w_hi;
        }
    }
    out
}

/// Transpose of [`bilinear`]: maps a gradient on the output grid back onto
/// the input grid.
pub fn bilinear_adjoint(grad_out: &Array2<f64>, in_shape: (usize, usize)) -> Array2<f64> {
    let (oh, ow) = grad_out.dim();
    if (oh, ow) == in_shape {
        return grad_out.clone();
    }
    let ty = taps(in_shape.0, oh);
    let tx = taps(in_shape.1, ow);
    let mut tmp = Array2::<f64>::zeros((in_shape.0, ow));
    for (r, t) in ty.iter().enumerate() {
        for c in 0..ow {
            let g = grad_out[[r, c]];
            tmp[[t.lo, c]] += g * (1.0 - t.w_hi);
            tmp[[t.hi, c]] += g * t.w_hi;
        }
    }
    let mut out = Array2::<f64>::zeros(in_shape);
    for r in 0..in_shape.0 {
        for (c, t) in tx.iter().enumerate() {
            let g = tmp[[r, c]];
            out[[r, t.lo]] += g * (1.0 - t.w_hi);
            out[[r, t.hi]] += g * t.w_hi;
        }
    }
    out
}

pub fn nearest<T: Copy + Default>(input: &Array2<T>, out_shape: (usize, usize)) -> Array2<T> {
    let (ih, iw) = input.dim();
    let pick = |o: usize, inp: usize, out: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    Array2::from_shape_fn(out_shape, |(r, c)| {
        input[[pick(r, ih, out_shape.0), pick(c, iw, out_shape.1)]]
    })
}
