//! Feature correspondence between an image and an affine-transformed view
//! of it, the self-correspondence distillation loss, and the equivariance
//! penalty.
//!
//! A correspondence volume holds cosine similarities between feature
//! vectors at position pairs of two maps. Only sampled sub-volumes are ever
//! built: `n` positions on the first grid, their images under the transform
//! on the second grid, and the full `n × n` block between them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::resample::{self, map_index};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rescale {
    Half,
    ThreeQuarters,
}

impl Rescale {
    pub fn factor(self) -> f64 {
        match self {
            Rescale::Half => 0.5,
            Rescale::ThreeQuarters => 0.75,
        }
    }
}

/// Geometric transforms with exact label alignment. Composition rescales
/// first, then flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AffineTransform {
    Identity,
    HFlip,
    Rescale(Rescale),
    HFlipRescale(Rescale),
}

impl AffineTransform {
    pub const ALL: [AffineTransform; 6] = [
        AffineTransform::Identity,
        AffineTransform::HFlip,
        AffineTransform::Rescale(Rescale::Half),
        AffineTransform::Rescale(Rescale::ThreeQuarters),
        AffineTransform::HFlipRescale(Rescale::Half),
        AffineTransform::HFlipRescale(Rescale::ThreeQuarters),
    ];

    fn flips(self) -> bool {
        matches!(self, AffineTransform::HFlip | AffineTransform::HFlipRescale(_))
    }

    fn rescale(self) -> Option<Rescale> {
        match self {
            AffineTransform::Rescale(r) | AffineTransform::HFlipRescale(r) => Some(r),
            _ => None,
        }
    }

    /// Output spatial dims for an `h × w` input.
    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self.rescale() {
            Some(r) => {
                let f = r.factor();
                (((h as f64 * f).round() as usize).max(1), ((w as f64 * f).round() as usize).max(1))
            }
            None => (h, w),
        }
    }

    /// Position on the `dst` grid corresponding to grid position `p` of the
    /// untransformed `src` grid.
    pub fn map_position(
        self,
        p: (usize, usize),
        src: (usize, usize),
        dst: (usize, usize),
    ) -> (usize, usize) {
        let i = map_index(src.0, dst.0, p.0);
        let j = map_index(src.1, dst.1, p.1);
        if self.flips() {
            (i, dst.1 - 1 - j)
        } else {
            (i, j)
        }
    }
}

/// Applies `t` to an `[H, W, D]` node on the tape.
pub fn apply_transform(tape: &mut Tape, t: AffineTransform, v: Var) -> Result<Var> {
    let (h, w, _) = tape.value(v).hwc()?;
    let (oh, ow) = t.output_dims(h, w);
    let mut out = resample::bilinear_resize(tape, v, oh, ow)?;
    if t.flips() {
        out = resample::hflip(tape, out)?;
    }
    Ok(out)
}

pub fn apply_transform_tensor(t: AffineTransform, x: &Tensor) -> Result<Tensor> {
    let (h, w, _) = x.hwc()?;
    let (oh, ow) = t.output_dims(h, w);
    let out = resample::resize_tensor(x, oh, ow)?;
    if t.flips() {
        resample::hflip_tensor(&out)
    } else {
        Ok(out)
    }
}

/// Sampled correspondence block. `matrix` is an `[n1, n2]` node of cosines.
#[derive(Clone, Debug)]
pub struct CorrSample {
    pub positions_1: Vec<(usize, usize)>,
    pub positions_2: Vec<(usize, usize)>,
    pub matrix: Var,
}

fn gather_normalized(
    tape: &mut Tape,
    v: Var,
    positions: &[(usize, usize)],
) -> Result<Var> {
    let (h, w, c) = tape.value(v).hwc()?;
    let mut rows = Vec::with_capacity(positions.len());
    for &(i, j) in positions {
        if i >= h || j >= w {
            return Err(Error::InvalidArgument(format!(
                "position ({i}, {j}) outside a {h}x{w} grid"
            )));
        }
        rows.push(i * w + j);
    }
    let flat = tape.reshape(v, &[h * w, c])?;
    let picked = tape.select_rows(flat, &rows)?;
    tape.normalize(picked)
}

/// Cosine similarity over the channel axis between `a` at `positions_1` and
/// `b` at `positions_2`. Zero vectors give cosine 0.
pub fn corr_volume(
    tape: &mut Tape,
    a: Var,
    b: Var,
    positions_1: &[(usize, usize)],
    positions_2: &[(usize, usize)],
) -> Result<CorrSample> {
    let ca = tape.value(a).hwc()?.2;
    let cb = tape.value(b).hwc()?.2;
    if ca != cb {
        return Err(Error::Shape(format!("correspondence needs equal channels, got {ca} and {cb}")));
    }
    let an = gather_normalized(tape, a, positions_1)?;
    let bn = gather_normalized(tape, b, positions_2)?;
    let bt = tape.transpose(bn)?;
    let matrix = tape.matmul(an, bt)?;
    Ok(CorrSample {
        positions_1: positions_1.to_vec(),
        positions_2: positions_2.to_vec(),
        matrix,
    })
}

/// `n` distinct grid positions drawn uniformly without replacement.
pub fn sample_positions_with<R: Rng + ?Sized>(
    rng: &mut R,
    h: usize,
    w: usize,
    n: usize,
) -> Result<Vec<(usize, usize)>> {
    if n > h * w {
        return Err(Error::InvalidArgument(format!("cannot sample {n} positions from {h}x{w}")));
    }
    Ok(rand::seq::index::sample(rng, h * w, n)
        .into_iter()
        .map(|k| (k / w, k % w))
        .collect())
}

pub fn sample_positions(h: usize, w: usize, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    sample_positions_with(&mut ChaCha8Rng::seed_from_u64(seed), h, w, n)
}

/// `−(1 / n1·n2) Σ M_ij · max(S_ij, 0)` with `M` treated as a fixed target.
pub fn scd_loss(tape: &mut Tape, m: &CorrSample, s: &CorrSample) -> Result<Var> {
    if m.positions_1 != s.positions_1 || m.positions_2 != s.positions_2 {
        return Err(Error::InvalidArgument(
            "CAM and segmentation correspondences were sampled at different positions".into(),
        ));
    }
    if tape.shape(m.matrix) != tape.shape(s.matrix) {
        return Err(Error::Shape("correspondence blocks differ in shape".into()));
    }
    let pairs = tape.value(m.matrix).len();
    let target = tape.detach(m.matrix);
    let clamped = tape.relu(s.matrix)?;
    let prod = tape.mul(clamped, target)?;
    let total = tape.sum_all(prod)?;
    tape.scale(total, -1.0 / pairs as f64)
}

/// `mean |A(m1) − m2|`.
pub fn equivariant_loss(tape: &mut Tape, m1: Var, m2: Var, t: AffineTransform) -> Result<Var> {
    let moved = apply_transform(tape, t, m1)?;
    if tape.shape(moved) != tape.shape(m2) {
        return Err(Error::Shape(format!(
            "transformed map {:?} does not match {:?}",
            tape.shape(moved),
            tape.shape(m2)
        )));
    }
    let d = tape.sub(moved, m2)?;
    let a = tape.abs(d)?;
    tape.mean_all(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn transform_identity_and_flip_involution() {
        let x = random(&[4, 6, 2], 1);
        assert_eq!(apply_transform_tensor(AffineTransform::Identity, &x).unwrap(), x);
        let f = apply_transform_tensor(AffineTransform::HFlip, &x).unwrap();
        assert_eq!(apply_transform_tensor(AffineTransform::HFlip, &f).unwrap(), x);
    }

    #[test]
    fn half_rescale_of_constant() {
        let x = Tensor::full(&[8, 8, 3], 0.7);
        let r = apply_transform_tensor(AffineTransform::Rescale(Rescale::Half), &x).unwrap();
        assert_eq!(r.shape(), &[4, 4, 3]);
        assert!(r.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn composition_rescales_then_flips() {
        let x = random(&[8, 8, 1], 2);
        let t = AffineTransform::HFlipRescale(Rescale::ThreeQuarters);
        let direct = apply_transform_tensor(t, &x).unwrap();
        let r = apply_transform_tensor(AffineTransform::Rescale(Rescale::ThreeQuarters), &x).unwrap();
        let manual = apply_transform_tensor(AffineTransform::HFlip, &r).unwrap();
        assert_eq!(direct, manual);
    }

    #[test]
    fn flip_position_map_is_exact() {
        let t = AffineTransform::HFlip;
        for i in 0..5 {
            for j in 0..7 {
                let q = t.map_position((i, j), (5, 7), (5, 7));
                assert_eq!(q, (i, 6 - j));
                assert_eq!(t.map_position(q, (5, 7), (5, 7)), (i, j));
            }
        }
    }

    #[test]
    fn identical_views_have_unit_diagonal() {
        let mut tape = Tape::new();
        let a = tape.constant(random(&[4, 4, 3], 3));
        let pos = sample_positions(4, 4, 16, 0).unwrap();
        let s = corr_volume(&mut tape, a, a, &pos, &pos).unwrap();
        let m = tape.value(s.matrix);
        for i in 0..16 {
            assert!((m.data()[i * 16 + i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_one_hot_vectors() {
        let mut t = Tensor::zeros(&[1, 2, 3]);
        t.set3(0, 0, 0, 1.0);
        t.set3(0, 1, 2, 5.0);
        let mut tape = Tape::new();
        let a = tape.constant(t);
        let s = corr_volume(&mut tape, a, a, &[(0, 0)], &[(0, 1)]).unwrap();
        assert_eq!(tape.value(s.matrix).data(), &[0.0]);
    }

    #[test]
    fn zero_vector_gives_zero_cosine() {
        let mut t = Tensor::zeros(&[1, 2, 2]);
        t.set3(0, 1, 0, 1.0);
        let mut tape = Tape::new();
        let a = tape.constant(t);
        let s = corr_volume(&mut tape, a, a, &[(0, 0), (0, 1)], &[(0, 0), (0, 1)]).unwrap();
        assert_eq!(tape.value(s.matrix).data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn corr_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 2, 3]));
        let b = tape.constant(Tensor::ones(&[2, 2, 2]));
        assert!(corr_volume(&mut tape, a, b, &[(0, 0)], &[(0, 0)]).is_err());
        assert!(corr_volume(&mut tape, a, a, &[(2, 0)], &[(0, 0)]).is_err());
    }

    #[test]
    fn sampling_contract() {
        let full: HashSet<_> = sample_positions(3, 5, 15, 9).unwrap().into_iter().collect();
        assert_eq!(full.len(), 15);
        assert_eq!(sample_positions(16, 16, 40, 4).unwrap(), sample_positions(16, 16, 40, 4).unwrap());
        let s: HashSet<_> = sample_positions(16, 16, DEFAULT_SAMPLES, 4).unwrap().into_iter().collect();
        assert_eq!(s.len(), 40);
        assert!(s.iter().all(|&(i, j)| i < 16 && j < 16));
        assert!(sample_positions(2, 2, 5, 0).is_err());
    }

    fn sample_from(tape: &mut Tape, m: Tensor, n: usize) -> CorrSample {
        let pos: Vec<_> = (0..n).map(|i| (0, i)).collect();
        CorrSample { positions_1: pos.clone(), positions_2: pos, matrix: tape.param(m) }
    }

    #[test]
    fn scd_zero_when_s_nonpositive() {
        let mut tape = Tape::new();
        let m = sample_from(&mut tape, Tensor::ones(&[2, 2]), 2);
        let s = sample_from(&mut tape, Tensor::new(vec![2, 2], vec![-0.5, 0.0, -1.0, -0.1]).unwrap(), 2);
        let l = scd_loss(&mut tape, &m, &s).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn scd_all_ones_is_minus_one() {
        let mut tape = Tape::new();
        let m = sample_from(&mut tape, Tensor::ones(&[2, 2]), 2);
        let s = sample_from(&mut tape, Tensor::ones(&[2, 2]), 2);
        let l = scd_loss(&mut tape, &m, &s).unwrap();
        assert_eq!(tape.value(l).item(), -1.0);
        let g = tape.backward(l).unwrap();
        assert!(!g.reached(m.matrix));
        assert_eq!(g.wrt(s.matrix).data(), &[-0.25; 4]);
    }

    #[test]
    fn scd_rejects_position_mismatch() {
        let mut tape = Tape::new();
        let m = sample_from(&mut tape, Tensor::ones(&[2, 2]), 2);
        let mut s = sample_from(&mut tape, Tensor::ones(&[2, 2]), 2);
        s.positions_2[1] = (1, 1);
        assert!(scd_loss(&mut tape, &m, &s).is_err());
    }

    #[test]
    fn equivariance_cases() {
        let mut tape = Tape::new();
        let m = tape.constant(random(&[4, 4, 2], 5).map(f64::abs));
        let l = equivariant_loss(&mut tape, m, m, AffineTransform::Identity).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let moved = apply_transform_tensor(AffineTransform::HFlip, tape.value(m)).unwrap();
        let m2 = tape.constant(moved.map(|v| v + 0.5));
        let l = equivariant_loss(&mut tape, m, m2, AffineTransform::HFlip).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-15);

        let wrong = tape.constant(Tensor::zeros(&[4, 4, 2]));
        assert!(equivariant_loss(&mut tape, m, wrong, AffineTransform::Rescale(Rescale::Half)).is_err());
    }
}
