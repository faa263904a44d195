//! Class scores, class activation maps, and CAM thresholding into
//! pseudo-labels.
//!
//! Label convention: `0` is background, foreground class channel `c` of a
//! CAM becomes label `c + 1`, and [`IGNORE`] marks unreliable pixels.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IGNORE: u8 = 255;
pub const BACKGROUND: u8 = 0;

pub const DEFAULT_HIGH_THRESHOLD: f64 = 0.55;
pub const DEFAULT_LOW_THRESHOLD: f64 = 0.35;

/// Fully connected classifier without bias, `weights` is `[C, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    weights: Tensor,
}

impl ClassifierHead {
    pub fn new(weights: Tensor) -> Result<Self> {
        match weights.shape() {
            [c, k] if *c >= 1 && *k >= 1 => {}
            s => return Err(Error::Shape(format!("classifier weights must be [C>=1, K>=1], got {s:?}"))),
        }
        if !weights.all_finite() {
            return Err(Error::NonFinite { op: "ClassifierHead::new" });
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn feature_channels(&self) -> usize {
        self.weights.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cam {
    /// `[H', W', C]`, all entries ≥ 0.
    pub maps: Tensor,
    pub normalized: bool,
}

impl Cam {
    pub fn num_classes(&self) -> usize {
        self.maps.shape()[2]
    }
}

/// Per-pixel class indices with [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl PseudoLabel {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} grid",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, v: u8) -> Self {
        Self { height, width, labels: vec![v; height * width] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.width + j]
    }

    /// True when every entry is background, a class in `1..=num_fg`, or IGNORE.
    pub fn is_valid(&self, num_fg: usize) -> bool {
        self.labels.iter().all(|&l| l == IGNORE || (l as usize) <= num_fg)
    }
}

fn check_channels(tape: &Tape, f: Var, head_k: usize) -> Result<(usize, usize, usize)> {
    let (h, w, k) = tape.value(f).hwc()?;
    if k != head_k {
        return Err(Error::Shape(format!("features have {k} channels, classifier expects {head_k}")));
    }
    Ok((h, w, k))
}

/// `y_c = (1/H'W') Σ_k w_ck Σ_i f_ki` on the tape. `w` is a `[C, K]` node.
pub fn class_scores_var(tape: &mut Tape, f: Var, w: Var) -> Result<Var> {
    let (c, k) = match tape.shape(w)[..] {
        [c, k] => (c, k),
        ref s => return Err(Error::Shape(format!("classifier weights must be [C, K], got {s:?}"))),
    };
    let (h, wd, _) = check_channels(tape, f, k)?;
    let flat = tape.reshape(f, &[h * wd, k])?;
    let pooled = tape.mean(flat, &[0])?;
    let col = tape.reshape(pooled, &[k, 1])?;
    let y = tape.matmul(w, col)?;
    tape.reshape(y, &[c])
}

/// `m_c = ReLU(Σ_k w_ck f_k)` on the tape, shaped `[H', W', C]`.
pub fn cam_var(tape: &mut Tape, f: Var, w: Var) -> Result<Var> {
    let (c, k) = match tape.shape(w)[..] {
        [c, k] => (c, k),
        ref s => return Err(Error::Shape(format!("classifier weights must be [C, K], got {s:?}"))),
    };
    let (h, wd, _) = check_channels(tape, f, k)?;
    let flat = tape.reshape(f, &[h * wd, k])?;
    let wt = tape.transpose(w)?;
    let logits = tape.matmul(flat, wt)?;
    let act = tape.relu(logits)?;
    tape.reshape(act, &[h, wd, c])
}

pub fn class_scores(f: &Tensor, head: &ClassifierHead) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let wv = tape.constant(head.weights.clone());
    let y = class_scores_var(&mut tape, fv, wv)?;
    Ok(tape.value(y).clone())
}

pub fn compute_cam(f: &Tensor, head: &ClassifierHead) -> Result<Cam> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let wv = tape.constant(head.weights.clone());
    let m = cam_var(&mut tape, fv, wv)?;
    Ok(Cam { maps: tape.value(m).clone(), normalized: false })
}

/// Divides each present class map by its maximum and zeroes absent classes.
///
/// `present[c]` is the image-level label of CAM channel `c`.
pub fn normalize_cam(cam: &Cam, present: &[bool]) -> Result<Cam> {
    let (h, w, c) = cam.maps.hwc()?;
    if present.len() != c {
        return Err(Error::Shape(format!("{} presence flags for {c} CAM channels", present.len())));
    }
    let mut maxes = vec![0.0f64; c];
    for px in cam.maps.data().chunks(c) {
        for (m, &v) in maxes.iter_mut().zip(px) {
            *m = m.max(v);
        }
    }
    let mut out = cam.maps.clone();
    for px in out.data_mut().chunks_mut(c) {
        for ch in 0..c {
            px[ch] = if present[ch] && maxes[ch] > 0.0 { px[ch] / maxes[ch] } else { 0.0 };
        }
    }
    debug_assert_eq!(out.len(), h * w * c);
    Ok(Cam { maps: out, normalized: true })
}

/// Dual-threshold labeling: per pixel with top score `s` on channel `c*`,
/// `s ≥ hi` gives `c* + 1`, `s < lo` gives background, anything between is
/// IGNORE. Ties in the arg-max go to the lowest channel.
pub fn cam_to_pseudo_label(cam: &Cam, hi: f64, lo: f64) -> Result<PseudoLabel> {
    if !cam.normalized {
        return Err(Error::InvalidArgument("cam_to_pseudo_label needs a normalized CAM".into()));
    }
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("thresholds need lo < hi, got {lo} / {hi}")));
    }
    let (h, w, c) = cam.maps.hwc()?;
    let labels = cam
        .maps
        .data()
        .chunks(c)
        .map(|px| {
            let (best, s) = argmax(px);
            if s >= hi {
                best as u8 + 1
            } else if s < lo {
                BACKGROUND
            } else {
                IGNORE
            }
        })
        .collect();
    PseudoLabel::new(h, w, labels)
}

/// Lowest index wins ties.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    (best, v[best])
}
