//! Classical bilinear and bicubic resampling.
//!
//! Both methods use half-pixel center mapping `src = (dst + 0.5)*(in/out) - 0.5`
//! with edge clamping, and run separably (rows, then columns). Bicubic is the
//! Keys cubic-convolution kernel with a = -0.5, which reproduces polynomials
//! of total degree <= 2 away from the edges.

use std::str::FromStr;

use crate::data::{Grid, TilePair};
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMethod {
    Bilinear,
    Bicubic,
}

impl FromStr for InterpMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<InterpMethod> {
        match s.to_ascii_lowercase().as_str() {
            "bilinear" => Ok(InterpMethod::Bilinear),
            "bicubic" => Ok(InterpMethod::Bicubic),
            other => Err(Error::Config(format!(
                "unknown interpolation method '{other}' (expected bilinear or bicubic)"
            ))),
        }
    }
}

impl std::fmt::Display for InterpMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InterpMethod::Bilinear => write!(f, "bilinear"),
            InterpMethod::Bicubic => write!(f, "bicubic"),
        }
    }
}

/// Keys cubic-convolution weight at distance |t| <= 2, a = -0.5.
#[inline]
fn keys_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Resample one axis of length `in_len` to `out_len`. `src` rows of `count`
/// interleaved lines are processed together so the same code serves both
/// passes.
fn resize_axis<T: Element>(
    src: &[T],
    lines: usize,
    in_len: usize,
    out_len: usize,
    method: InterpMethod,
) -> Vec<T> {
    let scale = in_len as f64 / out_len as f64;
    let mut out = vec![T::zero(); lines * out_len];

    for o in 0..out_len {
        let pos = (o as f64 + 0.5) * scale - 0.5;
        let base = pos.floor();
        let frac = pos - base;
        let base = base as isize;

        if frac == 0.0 {
            // Exact hit: copy the sample, which keeps same-size resizes
            // bitwise identities.
            let i = base.clamp(0, in_len as isize - 1) as usize;
            for line in 0..lines {
                out[line * out_len + o] = src[line * in_len + i];
            }
            continue;
        }

        match method {
            InterpMethod::Bilinear => {
                let i0 = base.clamp(0, in_len as isize - 1) as usize;
                let i1 = (base + 1).clamp(0, in_len as isize - 1) as usize;
                let w1 = T::from_f64(frac);
                let w0 = T::from_f64(1.0 - frac);
                for line in 0..lines {
                    let row = &src[line * in_len..][..in_len];
                    out[line * out_len + o] = w0 * row[i0] + w1 * row[i1];
                }
            }
            InterpMethod::Bicubic => {
                let mut ws = [T::zero(); 4];
                let mut is = [0usize; 4];
                for (j, (w, idx)) in ws.iter_mut().zip(is.iter_mut()).enumerate() {
                    let offset = j as isize - 1;
                    *w = T::from_f64(keys_weight(frac - offset as f64));
                    *idx = (base + offset).clamp(0, in_len as isize - 1) as usize;
                }
                for line in 0..lines {
                    let row = &src[line * in_len..][..in_len];
                    let mut acc = T::zero();
                    for j in 0..4 {
                        acc += ws[j] * row[is[j]];
                    }
                    out[line * out_len + o] = acc;
                }
            }
        }
    }
    out
}

/// Resizes a row-major `in_h` x `in_w` field to `out_h` x `out_w`.
pub fn resize<T: Element>(
    src: &[T],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    method: InterpMethod,
) -> Result<Vec<T>> {
    if in_h < 2 || in_w < 2 {
        return Err(Error::Dimension(format!(
            "resize input must be at least 2x2, got {in_h}x{in_w}"
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("resize output dims must be positive".into()));
    }
    if src.len() != in_h * in_w {
        return Err(Error::Dimension(format!(
            "resize: buffer length {} does not match {in_h}x{in_w}",
            src.len()
        )));
    }
    // Horizontal pass over rows, then vertical pass over columns of the
    // transposed intermediate.
    let horizontal = resize_axis(src, in_h, in_w, out_w, method);
    let transposed = transpose(&horizontal, in_h, out_w);
    let vertical = resize_axis(&transposed, out_w, in_h, out_h, method);
    Ok(transpose(&vertical, out_w, out_h))
}

fn transpose<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Resizes a grid, scaling cell size to preserve the covered extent.
pub fn resize_grid(grid: &Grid, out_h: usize, out_w: usize, method: InterpMethod) -> Result<Grid> {
    let values = resize(&grid.values, grid.nrows, grid.ncols, out_h, out_w, method)?;
    Ok(Grid {
        nrows: out_h,
        ncols: out_w,
        cell_size: grid.cell_size * grid.ncols as f64 / out_w as f64,
        cell_unit: grid.cell_unit,
        origin: grid.origin,
        nodata: grid.nodata,
        values,
    })
}

/// Mean squared error, in squared meters, of classically upscaled LR tiles
/// against their HR counterparts.
pub fn baseline_mse(pairs: &[TilePair], method: InterpMethod) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("baseline_mse: no tile pairs".into()));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for pair in pairs {
        let up = resize(
            &pair.lr.values,
            pair.lr.nrows,
            pair.lr.ncols,
            pair.hr.nrows,
            pair.hr.ncols,
            method,
        )?;
        for (p, t) in up.iter().zip(&pair.hr.values) {
            let d = *p as f64 - *t as f64;
            acc += d * d;
        }
        count += up.len();
    }
    Ok(acc / count as f64)
}
