//! Spatial resampling of `[H, W, C]` maps.
//!
//! Bilinear resizing uses half-pixel centers: output pixel `o` samples the
//! source at `(o + 0.5) · in / out − 0.5`, clamped to `[0, in − 1]`. Equal
//! input and output sizes are an exact pass-through. Correspondence sampling
//! maps grid positions between views with the same convention.

use std::rc::Rc;

use crate::autograd::{SparseMap, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source taps `(i0, i1, frac)` for output coordinate `o`.
pub fn linear_taps(in_n: usize, out_n: usize, o: usize) -> (usize, usize, f64) {
    if in_n == out_n {
        return (o, o, 0.0);
    }
    let src = ((o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_n - 1);
    let i1 = (i0 + 1).min(in_n - 1);
    (i0, i1, src - i0 as f64)
}

/// Maps a source grid index onto the nearest destination grid index under
/// the half-pixel convention.
pub fn map_index(src_n: usize, dst_n: usize, i: usize) -> usize {
    let x = (i as f64 + 0.5) * dst_n as f64 / src_n as f64 - 0.5;
    (x.round().max(0.0) as usize).min(dst_n - 1)
}

/// Precomputed bilinear taps for one `[H, W, C] -> [oh, ow, C]` resize.
///
/// Evaluated in lerp form (`a + f·(b − a)`), which reproduces constant maps
/// exactly; the transpose uses the equivalent product weights.
#[derive(Clone, Debug)]
pub struct BilinearPlan {
    h: usize,
    w: usize,
    c: usize,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

impl BilinearPlan {
    pub fn new(h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Result<Self> {
        if h == 0 || w == 0 || oh == 0 || ow == 0 {
            return Err(Error::InvalidArgument(format!(
                "bilinear resize {h}x{w} -> {oh}x{ow} has a zero-size side"
            )));
        }
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| match linear_taps(n_in, n_out, o) {
                    (i0, i1, _) if i0 == i1 => (i0, i1, 0.0),
                    t => t,
                })
                .collect()
        };
        Ok(Self { h, w, c, ys: taps(h, oh), xs: taps(w, ow) })
    }

    pub fn in_shape(&self) -> [usize; 3] {
        [self.h, self.w, self.c]
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.ys.len(), self.xs.len(), self.c]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (w, c) = (self.w, self.c);
        let mut out = Vec::with_capacity(self.ys.len() * self.xs.len() * c);
        for &(y0, y1, fy) in &self.ys {
            for &(x0, x1, fx) in &self.xs {
                for ch in 0..c {
                    let v00 = x[(y0 * w + x0) * c + ch];
                    let v01 = x[(y0 * w + x1) * c + ch];
                    let v10 = x[(y1 * w + x0) * c + ch];
                    let v11 = x[(y1 * w + x1) * c + ch];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    out.push(top + fy * (bot - top));
                }
            }
        }
        out
    }

    pub fn apply_transpose(&self, g: &[f64], gx: &mut [f64]) {
        let (w, c) = (self.w, self.c);
        let mut o = 0;
        for &(y0, y1, fy) in &self.ys {
            for &(x0, x1, fx) in &self.xs {
                for ch in 0..c {
                    let gv = g[o];
                    o += 1;
                    gx[(y0 * w + x0) * c + ch] += (1.0 - fy) * (1.0 - fx) * gv;
                    gx[(y0 * w + x1) * c + ch] += (1.0 - fy) * fx * gv;
                    gx[(y1 * w + x0) * c + ch] += fy * (1.0 - fx) * gv;
                    gx[(y1 * w + x1) * c + ch] += fy * fx * gv;
                }
            }
        }
    }
}

pub fn hflip_map(h: usize, w: usize, c: usize) -> Result<SparseMap> {
    let idx: Vec<usize> = (0..h)
        .flat_map(|i| (0..w).flat_map(move |j| (0..c).map(move |ch| (i * w + (w - 1 - j)) * c + ch)))
        .collect();
    SparseMap::gather(vec![h, w, c], h * w * c, &idx)
}

/// Differentiable bilinear resize of an `[H, W, C]` node.
pub fn bilinear_resize(tape: &mut Tape, v: Var, oh: usize, ow: usize) -> Result<Var> {
    let (h, w, c) = tape.value(v).hwc()?;
    if (h, w) == (oh, ow) {
        return Ok(v);
    }
    tape.bilinear(v, Rc::new(BilinearPlan::new(h, w, c, oh, ow)?))
}

pub fn hflip(tape: &mut Tape, v: Var) -> Result<Var> {
    let (h, w, c) = tape.value(v).hwc()?;
    tape.sparse(v, Rc::new(hflip_map(h, w, c)?))
}

pub fn resize_tensor(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    if (h, w) == (oh, ow) {
        return Ok(t.clone());
    }
    let plan = BilinearPlan::new(h, w, c, oh, ow)?;
    Tensor::new(plan.out_shape(), plan.apply(t.data()))
}

pub fn hflip_tensor(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    Tensor::new(vec![h, w, c], hflip_map(h, w, c)?.apply(t.data()))
}

/// Nearest-neighbour resize of a label grid (half-pixel convention).
pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let pick = |in_n: usize, out_n: usize, o: usize| {
        (((o as f64 + 0.5) * in_n as f64 / out_n as f64) as usize).min(in_n - 1)
    };
    (0..oh)
        .flat_map(|i| (0..ow).map(move |j| src[pick(h, oh, i) * w + pick(w, ow, j)]))
        .collect()
}
