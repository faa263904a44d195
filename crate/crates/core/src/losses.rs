//! Classification, affinity, segmentation, smoothness and total losses.
//!
//! Every loss is built on a [`Tape`] and returns a scalar node.

use crate::autograd::{Tape, Var};
use crate::cam::{PseudoLabel, IGNORE};
use crate::error::{Error, Result};
use crate::resample::resize_nearest;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA1: f64 = 0.1;
pub const DEFAULT_LAMBDA2: f64 = 0.01;
pub const DEFAULT_LAMBDA3: f64 = 1.0;

/// Bandwidth of the image-edge weight in the smoothness term, on [0, 1] intensities.
pub const REG_SIGMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: DEFAULT_LAMBDA1, lambda2: DEFAULT_LAMBDA2, lambda3: DEFAULT_LAMBDA3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss.{k} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A loss node plus a flag set when its support was empty and the value is
/// a constant zero.
#[derive(Clone, Copy, Debug)]
pub struct Flagged {
    pub loss: Var,
    pub empty: bool,
}

/// Multi-label soft-margin loss over `[C]` logits:
/// `(1/C) Σ_c l_c·softplus(−p_c) + (1 − l_c)·softplus(p_c)`.
pub fn classification_loss(tape: &mut Tape, p: Var, labels: &[bool]) -> Result<Var> {
    if tape.shape(p) != [labels.len()] {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            tape.shape(p),
            labels.len()
        )));
    }
    if !tape.value(p).all_finite() {
        return Err(Error::NonFinite { op: "classification_loss" });
    }
    let pos = Tensor::from_vec(labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect());
    let neg = pos.map(|l| 1.0 - l);
    let pos = tape.constant(pos);
    let neg = tape.constant(neg);
    let np = tape.neg(p)?;
    let sp_neg = tape.softplus(np)?;
    let sp_pos = tape.softplus(p)?;
    let a = tape.mul(sp_neg, pos)?;
    let b = tape.mul(sp_pos, neg)?;
    let s = tape.add(a, b)?;
    tape.mean_all(s)
}

/// Pixel pairs over a token grid of `height × width`, stored as flat
/// token indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AffinityLabels {
    pub tokens: usize,
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

/// Nearest-neighbour downsampling of a label map to the token grid.
pub fn label_to_grid(label: &PseudoLabel, h: usize, w: usize) -> PseudoLabel {
    PseudoLabel {
        height: h,
        width: w,
        labels: resize_nearest(&label.labels, label.height, label.width, h, w),
    }
}

/// Every unordered pair among `positions` on `label`'s grid. Pairs touching
/// [`IGNORE`] are dropped; same class is positive, different is negative.
pub fn build_affinity_labels(label: &PseudoLabel, positions: &[(usize, usize)]) -> Result<AffinityLabels> {
    let w = label.width;
    let mut flat = Vec::with_capacity(positions.len());
    for &(i, j) in positions {
        if i >= label.height || j >= w {
            return Err(Error::InvalidArgument(format!(
                "position ({i}, {j}) outside a {}x{w} label",
                label.height
            )));
        }
        flat.push(i * w + j);
    }
    let mut out = AffinityLabels { tokens: label.height * w, ..Default::default() };
    for (a, &u) in flat.iter().enumerate() {
        for &v in &flat[a + 1..] {
            let (lu, lv) = (label.labels[u], label.labels[v]);
            if lu == IGNORE || lv == IGNORE {
                continue;
            }
            if lu == lv {
                out.positive.push((u, v));
            } else {
                out.negative.push((u, v));
            }
        }
    }
    Ok(out)
}

/// Symmetrized mean of two `[N, N]` attention-logit maps at the given pairs.
fn fused_affinity(tape: &mut Tape, a1: Var, a2: Var, pairs: &[(usize, usize)], n: usize) -> Result<Var> {
    let uv: Vec<usize> = pairs.iter().map(|&(u, v)| u * n + v).collect();
    let vu: Vec<usize> = pairs.iter().map(|&(u, v)| v * n + u).collect();
    let mut acc = None;
    for m in [a1, a2] {
        for idx in [&uv, &vu] {
            let g = tape.gather(m, vec![pairs.len()], idx)?;
            acc = Some(match acc {
                None => g,
                Some(s) => tape.add(s, g)?,
            });
        }
    }
    tape.scale(acc.expect("four terms"), 0.25)
}

/// `(1/N+) Σ_{R+} (1 − σ(a)) + (1/N−) Σ_{R−} σ(a)` with `a` the fused
/// attention logit. An empty set contributes 0.
pub fn aux_affinity_loss(tape: &mut Tape, a1: Var, a2: Var, labels: &AffinityLabels) -> Result<Flagged> {
    let n = labels.tokens;
    for m in [a1, a2] {
        if tape.shape(m) != [n, n] {
            return Err(Error::Shape(format!(
                "attention map {:?} does not match {n} tokens",
                tape.shape(m)
            )));
        }
    }
    let mut total: Option<Var> = None;
    if !labels.positive.is_empty() {
        let a = fused_affinity(tape, a1, a2, &labels.positive, n)?;
        let s = tape.sigmoid(a)?;
        let m = tape.mean_all(s)?;
        let neg = tape.neg(m)?;
        total = Some(tape.add_scalar(neg, 1.0)?);
    }
    if !labels.negative.is_empty() {
        let a = fused_affinity(tape, a1, a2, &labels.negative, n)?;
        let s = tape.sigmoid(a)?;
        let m = tape.mean_all(s)?;
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(match total {
        Some(loss) => Flagged { loss, empty: false },
        None => Flagged { loss: tape.constant(Tensor::scalar(0.0)), empty: true },
    })
}

/// Mean softmax cross-entropy over non-[`IGNORE`] pixels of `[H, W, C′]` logits.
pub fn segmentation_loss(tape: &mut Tape, s: Var, target: &PseudoLabel) -> Result<Flagged> {
    let (h, w, c) = tape.value(s).hwc()?;
    if (h, w) != (target.height, target.width) {
        return Err(Error::Shape(format!(
            "logits are {h}x{w}, target is {}x{}",
            target.height, target.width
        )));
    }
    let mut idx = Vec::new();
    for (p, &l) in target.labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= c {
            return Err(Error::InvalidArgument(format!("label {l} with only {c} channels")));
        }
        idx.push(p * c + l as usize);
    }
    if idx.is_empty() {
        return Ok(Flagged { loss: tape.constant(Tensor::scalar(0.0)), empty: true });
    }
    let flat = tape.reshape(s, &[h * w, c])?;
    let ls = tape.log_softmax(flat)?;
    let picked = tape.gather(ls, vec![idx.len()], &idx)?;
    let m = tape.mean_all(picked)?;
    Ok(Flagged { loss: tape.neg(m)?, empty: false })
}

/// Edge weights and flat source/neighbour pixel indices for right and down
/// neighbour pairs.
pub fn reg_pairs(img: &Tensor) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>)> {
    let (h, w, c) = img.hwc()?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut wt = Vec::new();
    let mut push = |p: (usize, usize), q: (usize, usize)| {
        let d2: f64 = (0..c).map(|ch| (img.at3(q.0, q.1, ch) - img.at3(p.0, p.1, ch)).powi(2)).sum();
        a.push(p.0 * w + p.1);
        b.push(q.0 * w + q.1);
        wt.push((-d2 / (REG_SIGMA * REG_SIGMA)).exp());
    };
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                push((i, j), (i, j + 1));
            }
            if i + 1 < h {
                push((i, j), (i + 1, j));
            }
        }
    }
    Ok((a, b, wt))
}

/// Edge-aware total variation of `[H, W, C′]` probabilities:
/// `(1 / H·W·C′) Σ_{pairs} Σ_c w·|s_p,c − s_q,c|` over right and down
/// neighbours, with `w = exp(−‖ΔI‖² / σ²)`.
pub fn reg_loss(tape: &mut Tape, probs: Var, img: &Tensor) -> Result<Var> {
    let (h, w, c) = tape.value(probs).hwc()?;
    let (ih, iw, _) = img.hwc()?;
    if (h, w) != (ih, iw) {
        return Err(Error::Shape(format!("probabilities are {h}x{w}, image is {ih}x{iw}")));
    }
    let (pa, pb, wt) = reg_pairs(img)?;
    if pa.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let p = pa.len();
    let expand = |px: &[usize]| -> Vec<usize> { px.iter().flat_map(|&q| (q * c)..(q * c + c)).collect() };
    let sa = tape.gather(probs, vec![p, c], &expand(&pa))?;
    let sb = tape.gather(probs, vec![p, c], &expand(&pb))?;
    let d = tape.sub(sb, sa)?;
    let ad = tape.abs(d)?;
    let weights = Tensor::new(vec![p, c], wt.iter().flat_map(|&x| std::iter::repeat(x).take(c)).collect())?;
    let weights = tape.constant(weights);
    let weighted = tape.mul(ad, weights)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, 1.0 / (h * w * c) as f64)
}

/// Scalar loss nodes feeding the total. Absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub cls: Option<Var>,
    pub seg: Option<Var>,
    pub scd: Option<Var>,
    pub equ: Option<Var>,
    pub aux: Option<Var>,
    pub reg: Option<Var>,
}

/// `λ1 (scd + seg + equ + aux) + λ2 reg + λ3 cls`; during warmup only
/// `λ3 cls`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights, warmup: bool) -> Result<Var> {
    let mut parts: Vec<(Var, f64)> = Vec::new();
    if let Some(v) = terms.cls {
        parts.push((v, weights.lambda3));
    }
    if !warmup {
        for v in [terms.scd, terms.seg, terms.equ, terms.aux].into_iter().flatten() {
            parts.push((v, weights.lambda1));
        }
        if let Some(v) = terms.reg {
            parts.push((v, weights.lambda2));
        }
    }
    let mut acc: Option<Var> = None;
    for (v, lam) in parts {
        if tape.value(v).len() != 1 {
            return Err(Error::Shape(format!("loss term has shape {:?}", tape.shape(v))));
        }
        let s = tape.scale(v, lam)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn classification_zero_logits_is_log2() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(&[3]));
        let l = classification_loss(&mut tape, p, &[true, false, true]).unwrap();
        assert!((scalar(&tape, l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn classification_saturated_is_near_zero() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[4], 50.0));
        let l = classification_loss(&mut tape, p, &[true; 4]).unwrap();
        assert!(scalar(&tape, l) < 1e-20);
    }

    #[test]
    fn classification_matches_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let l: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.5)).collect();
        let mut tape = Tape::new();
        let pv = tape.param(Tensor::from_vec(p.clone()));
        let loss = classification_loss(&mut tape, pv, &l).unwrap();
        let oracle: f64 = p
            .iter()
            .zip(&l)
            .map(|(&x, &y)| {
                let s = 1.0 / (1.0 + (-x).exp());
                if y { -s.ln() } else { -(1.0 - s).ln() }
            })
            .sum::<f64>()
            / 4.0;
        assert!((scalar(&tape, loss) - oracle).abs() < 1e-12);
    }

    #[test]
    fn classification_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(&[3]));
        assert!(classification_loss(&mut tape, p, &[true]).is_err());
    }

    #[test]
    fn affinity_pairs() {
        let label = PseudoLabel::new(1, 4, vec![3, 3, 1, IGNORE]).unwrap();
        let aff = build_affinity_labels(&label, &[(0, 0), (0, 1), (0, 2), (0, 3)]).unwrap();
        assert_eq!(aff.positive, vec![(0, 1)]);
        assert_eq!(aff.negative, vec![(0, 2), (1, 2)]);
        assert_eq!(aff.tokens, 4);
    }

    #[test]
    fn aux_zero_logits_is_one() {
        let mut tape = Tape::new();
        let a1 = tape.param(Tensor::zeros(&[4, 4]));
        let a2 = tape.param(Tensor::zeros(&[4, 4]));
        let labels = AffinityLabels { tokens: 4, positive: vec![(0, 1)], negative: vec![(2, 3)] };
        let l = aux_affinity_loss(&mut tape, a1, a2, &labels).unwrap();
        assert!(!l.empty);
        assert_eq!(scalar(&tape, l.loss), 1.0);
    }

    #[test]
    fn aux_empty_is_flagged() {
        let mut tape = Tape::new();
        let a1 = tape.param(Tensor::zeros(&[2, 2]));
        let l = aux_affinity_loss(&mut tape, a1, a1, &AffinityLabels { tokens: 2, ..Default::default() }).unwrap();
        assert!(l.empty);
        assert_eq!(scalar(&tape, l.loss), 0.0);
    }

    #[test]
    fn aux_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 5;
        let a1: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let a2: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels = AffinityLabels {
            tokens: n,
            positive: vec![(0, 1), (2, 4)],
            negative: vec![(1, 3), (0, 4), (3, 2)],
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let fuse = |u: usize, v: usize| 0.25 * (a1[u * n + v] + a1[v * n + u] + a2[u * n + v] + a2[v * n + u]);
        let pos: f64 = labels.positive.iter().map(|&(u, v)| 1.0 - sig(fuse(u, v))).sum::<f64>() / 2.0;
        let neg: f64 = labels.negative.iter().map(|&(u, v)| sig(fuse(u, v))).sum::<f64>() / 3.0;
        let mut tape = Tape::new();
        let v1 = tape.param(Tensor::new(vec![n, n], a1.clone()).unwrap());
        let v2 = tape.param(Tensor::new(vec![n, n], a2.clone()).unwrap());
        let l = aux_affinity_loss(&mut tape, v1, v2, &labels).unwrap();
        assert!((scalar(&tape, l.loss) - (pos + neg)).abs() < 1e-12);
    }

    #[test]
    fn segmentation_uniform_is_log_c() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::full(&[3, 3, 4], 0.7));
        let t = PseudoLabel::new(3, 3, vec![0, 1, 2, 3, IGNORE, 0, 1, 2, 3]).unwrap();
        let l = segmentation_loss(&mut tape, s, &t).unwrap();
        assert!((scalar(&tape, l.loss) - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn segmentation_hand_example() {
        // 2x2, C' = 2, one IGNORE pixel.
        let logits = vec![1.0, 0.0, 0.0, 2.0, 3.0, 3.0, 0.5, -0.5];
        let mut tape = Tape::new();
        let s = tape.param(Tensor::new(vec![2, 2, 2], logits).unwrap());
        let t = PseudoLabel::new(2, 2, vec![0, 1, IGNORE, 1]).unwrap();
        let l = segmentation_loss(&mut tape, s, &t).unwrap();
        let ce = |z: [f64; 2], k: usize| (z[0].exp() + z[1].exp()).ln() - z[k];
        let expect = (ce([1.0, 0.0], 0) + ce([0.0, 2.0], 1) + ce([0.5, -0.5], 1)) / 3.0;
        assert!((scalar(&tape, l.loss) - expect).abs() < 1e-14);
    }

    #[test]
    fn segmentation_all_ignore_is_flagged() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::zeros(&[2, 2, 3]));
        let l = segmentation_loss(&mut tape, s, &PseudoLabel::filled(2, 2, IGNORE)).unwrap();
        assert!(l.empty);
    }

    #[test]
    fn reg_constant_is_zero() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::full(&[4, 4, 3], 1.0 / 3.0));
        let img = Tensor::full(&[4, 4, 3], 0.5);
        let l = reg_loss(&mut tape, s, &img).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    #[test]
    fn reg_edge_on_image_edge_is_suppressed() {
        // Prediction and image both step between column 1 and 2.
        let mut s = Tensor::zeros(&[4, 4, 2]);
        let mut img = Tensor::zeros(&[4, 4, 3]);
        for i in 0..4 {
            for j in 0..4 {
                let right = j >= 2;
                s.set3(i, j, if right { 1 } else { 0 }, 1.0);
                for c in 0..3 {
                    img.set3(i, j, c, if right { 1.0 } else { 0.0 });
                }
            }
        }
        let mut tape = Tape::new();
        let v = tape.param(s);
        let l = reg_loss(&mut tape, v, &img).unwrap();
        assert!(scalar(&tape, l) < 1e-100);
    }

    #[test]
    fn reg_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (h, w, c) = (4, 4, 3);
        let s = Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let img = Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.gen_range(0.4..0.6)).collect()).unwrap();
        let mut oracle = 0.0;
        for i in 0..h {
            for j in 0..w {
                for (di, dj) in [(0, 1), (1, 0)] {
                    let (k, l) = (i + di, j + dj);
                    if k >= h || l >= w {
                        continue;
                    }
                    let mut d2 = 0.0;
                    for ch in 0..3 {
                        d2 += (img.at3(k, l, ch) - img.at3(i, j, ch)).powi(2);
                    }
                    let wt = (-d2 / 0.01).exp();
                    for ch in 0..c {
                        oracle += wt * (s.at3(k, l, ch) - s.at3(i, j, ch)).abs();
                    }
                }
            }
        }
        oracle /= (h * w * c) as f64;
        let mut tape = Tape::new();
        let v = tape.param(s);
        let l = reg_loss(&mut tape, v, &img).unwrap();
        assert!((scalar(&tape, l) - oracle).abs() < 1e-12);
    }

    fn ones_terms(tape: &mut Tape) -> LossTerms {
        let mut one = || Some(tape.param(Tensor::scalar(1.0)));
        LossTerms { cls: one(), seg: one(), scd: one(), equ: one(), aux: one(), reg: one() }
    }

    #[test]
    fn total_with_unit_components() {
        let mut tape = Tape::new();
        let terms = ones_terms(&mut tape);
        let t = total_loss(&mut tape, &terms, &LossWeights::default(), false).unwrap();
        assert!((scalar(&tape, t) - 1.41).abs() < 1e-15);
    }

    #[test]
    fn total_warmup_is_cls_only() {
        let mut tape = Tape::new();
        let terms = ones_terms(&mut tape);
        let w = LossWeights { lambda3: 0.7, ..Default::default() };
        let t = total_loss(&mut tape, &terms, &w, true).unwrap();
        assert_eq!(scalar(&tape, t), 0.7);
        let g = tape.backward(t).unwrap();
        for v in [terms.seg, terms.scd, terms.equ, terms.aux, terms.reg] {
            assert!(!g.reached(v.unwrap()));
        }
    }

    #[test]
    fn total_of_nothing_is_zero() {
        let mut tape = Tape::new();
        let t = total_loss(&mut tape, &LossTerms::default(), &LossWeights::default(), false).unwrap();
        assert_eq!(scalar(&tape, t), 0.0);
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights { lambda2: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
