//! Variation-aware refinement of class score maps.
//!
//! Each pixel gets a normalized kernel over a dilated 8-neighbourhood plus
//! itself. The kernel is a softmax over colour affinities minus a
//! `β`-weighted softmax over the pixel-variation map at the neighbour
//! positions, clamped at zero and renormalized. Scores are then repeatedly
//! replaced by their kernel-weighted neighbourhood average. Out-of-range
//! neighbours are clamped to the border.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 4.0;
pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_DILATIONS: [usize; 6] = [1, 2, 4, 8, 12, 24];
pub const DEFAULT_ITERATIONS: usize = 10;

/// Floor for the per-pixel standard deviation of colour differences.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct VarmConfig {
    pub alpha: f64,
    pub beta: f64,
    pub dilations: Vec<usize>,
    pub iterations: usize,
}

impl Default for VarmConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            dilations: DEFAULT_DILATIONS.to_vec(),
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

impl VarmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("varm.alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("varm.beta must be >= 0, got {}", self.beta)));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::Config("varm.dilations must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn taps(&self) -> Vec<(isize, isize)> {
        neighborhood(&self.dilations)
    }
}

/// Centre first, then for each dilation the eight offsets in row-major order.
pub fn neighborhood(dilations: &[usize]) -> Vec<(isize, isize)> {
    let mut taps = vec![(0, 0)];
    for &d in dilations {
        let d = d as isize;
        for dy in [-d, 0, d] {
            for dx in [-d, 0, d] {
                if (dy, dx) != (0, 0) {
                    taps.push((dy, dx));
                }
            }
        }
    }
    taps
}

#[inline]
fn clamp_pos(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

/// `V(i,j) = Σ_ch (x(i,j−1) − x(i,j))² + (x(i+1,j) − x(i,j))²`, border-replicated.
/// Returned shape is `[H, W]`.
pub fn pixel_variation(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    let mut v = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let left = clamp_pos(j, -1, w);
            let down = clamp_pos(i, 1, h);
            let mut s = 0.0;
            for ch in 0..c {
                let x = img.at3(i, j, ch);
                let a = img.at3(i, left, ch) - x;
                let b = img.at3(down, j, ch) - x;
                s += a * a + b * b;
            }
            v[i * w + j] = s;
        }
    }
    Tensor::new(vec![h, w], v)
}

/// Raw colour affinities `k_rgb` for every pixel and tap, laid out
/// `[pixel][tap]`.
#[derive(Clone, Debug)]
pub struct LocalAffinity {
    pub height: usize,
    pub width: usize,
    pub taps: Vec<(isize, isize)>,
    pub values: Vec<f64>,
}

/// Normalized per-pixel weights over the neighbourhood, laid out `[pixel][tap]`.
#[derive(Clone, Debug)]
pub struct VarmKernel {
    pub height: usize,
    pub width: usize,
    pub taps: Vec<(isize, isize)>,
    pub weights: Vec<f64>,
    /// Flat pixel index of each tap after border clamping, `[pixel][tap]`.
    pub neighbours: Vec<u32>,
    pub row_normalized: bool,
}

impl VarmKernel {
    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let t = self.taps.len();
        &self.weights[(i * self.width + j) * t..][..t]
    }
}

fn neighbour_index(i: usize, j: usize, (dy, dx): (isize, isize), h: usize, w: usize) -> usize {
    clamp_pos(i, dy, h) * w + clamp_pos(j, dx, w)
}

/// `k_rgb = −(α·δ)² / σ²` with `δ` the channel-mean absolute colour
/// difference to the neighbour and `σ` the standard deviation of `δ` over
/// the neighbourhood, floored at [`SIGMA_FLOOR`].
pub fn local_kernel(img: &Tensor, cfg: &VarmConfig) -> Result<LocalAffinity> {
    cfg.validate()?;
    let (h, w, c) = img.hwc()?;
    let taps = cfg.taps();
    let nt = taps.len();
    let px = img.data();
    let mut values = vec![0.0; h * w * nt];
    values.par_chunks_mut(w * nt).enumerate().for_each(|(i, row)| {
        let mut diffs = vec![0.0; nt];
        for j in 0..w {
            let centre = &px[(i * w + j) * c..][..c];
            for (t, &off) in taps.iter().enumerate() {
                let n = neighbour_index(i, j, off, h, w);
                let nb = &px[n * c..][..c];
                diffs[t] = centre.iter().zip(nb).map(|(a, b)| (a - b).abs()).sum::<f64>() / c as f64;
            }
            let mean = diffs.iter().sum::<f64>() / nt as f64;
            let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / nt as f64;
            let sigma = var.sqrt().max(SIGMA_FLOOR);
            for (t, d) in diffs.iter().enumerate() {
                let a = cfg.alpha * d;
                row[j * nt + t] = -(a * a) / (sigma * sigma);
            }
        }
    });
    Ok(LocalAffinity { height: h, width: w, taps, values })
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Correction kernel: softmax(k_rgb) − β·softmax(V at neighbours), clamped at
/// zero and renormalized per pixel. A row that clamps to all zeros falls
/// back to the colour softmax.
pub fn correction_kernel(img: &Tensor, cfg: &VarmConfig) -> Result<VarmKernel> {
    let rgb = local_kernel(img, cfg)?;
    let var = pixel_variation(img)?;
    let (h, w) = (rgb.height, rgb.width);
    let taps = rgb.taps.clone();
    let nt = taps.len();
    let vv = var.data();
    let mut weights = vec![0.0; h * w * nt];
    weights.par_chunks_mut(w * nt).enumerate().for_each(|(i, row)| {
        let mut s_rgb = vec![0.0; nt];
        let mut s_var = vec![0.0; nt];
        let mut vnb = vec![0.0; nt];
        for j in 0..w {
            softmax_into(&rgb.values[(i * w + j) * nt..][..nt], &mut s_rgb);
            let out = &mut row[j * nt..][..nt];
            if cfg.beta == 0.0 {
                out.copy_from_slice(&s_rgb);
                continue;
            }
            for (t, &off) in taps.iter().enumerate() {
                vnb[t] = vv[neighbour_index(i, j, off, h, w)];
            }
            softmax_into(&vnb, &mut s_var);
            let mut z = 0.0;
            for t in 0..nt {
                out[t] = (s_rgb[t] - cfg.beta * s_var[t]).max(0.0);
                z += out[t];
            }
            if z > 0.0 {
                out.iter_mut().for_each(|o| *o /= z);
            } else {
                out.copy_from_slice(&s_rgb);
            }
        }
    });
    let mut neighbours = vec![0u32; h * w * nt];
    for i in 0..h {
        for j in 0..w {
            for (t, &off) in taps.iter().enumerate() {
                neighbours[(i * w + j) * nt + t] = neighbour_index(i, j, off, h, w) as u32;
            }
        }
    }
    Ok(VarmKernel { height: h, width: w, taps, weights, neighbours, row_normalized: true })
}

/// One pass `P'(i,j,c) = Σ_t k_t · P(neighbour_t, c)`.
pub fn apply_kernel(p: &Tensor, kernel: &VarmKernel) -> Result<Tensor> {
    let (h, w, c) = p.hwc()?;
    if (h, w) != (kernel.height, kernel.width) {
        return Err(Error::Shape(format!(
            "scores are {h}x{w}, kernel is {}x{}",
            kernel.height, kernel.width
        )));
    }
    let src = p.data();
    let nt = kernel.taps.len();
    let mut out = vec![0.0; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(i, row)| {
        for j in 0..w {
            let base = (i * w + j) * nt;
            let k = &kernel.weights[base..][..nt];
            let nb = &kernel.neighbours[base..][..nt];
            let dst = &mut row[j * c..][..c];
            for (&wt, &n) in k.iter().zip(nb) {
                if wt == 0.0 {
                    continue;
                }
                let n = n as usize;
                for (d, s) in dst.iter_mut().zip(&src[n * c..][..c]) {
                    *d += wt * s;
                }
            }
        }
    });
    Tensor::new(vec![h, w, c], out)
}

/// Iterated refinement of `[H, W, C′]` scores guided by an `[H, W, 3]` image.
/// The kernel is built once per image.
pub fn refine(p0: &Tensor, img: &Tensor, cfg: &VarmConfig) -> Result<Tensor> {
    let (h, w, _) = p0.hwc()?;
    let (ih, iw, _) = img.hwc()?;
    if (h, w) != (ih, iw) {
        return Err(Error::Shape(format!("scores are {h}x{w}, image is {ih}x{iw}")));
    }
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok(p0.clone());
    }
    let kernel = correction_kernel(img, cfg)?;
    refine_with_kernel(p0, &kernel, cfg.iterations)
}

pub fn refine_with_kernel(p0: &Tensor, kernel: &VarmKernel, iterations: usize) -> Result<Tensor> {
    let mut p = p0.clone();
    for _ in 0..iterations {
        p = apply_kernel(&p, kernel)?;
    }
    Ok(p)
}
