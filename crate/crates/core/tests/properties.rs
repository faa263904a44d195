//! Property tests for the invariants of every module.

use proptest::prelude::*;
use scd_core::cam::{self, ClassifierHead, IGNORE};
use scd_core::correspondence::{self, AffineTransform};
use scd_core::data::{self, SyntheticSpec};
use scd_core::losses::{self, AffinityLabels, LossTerms, LossWeights};
use scd_core::metrics::ConfusionMatrix;
use scd_core::resample;
use scd_core::varm::{self, VarmConfig};
use scd_core::{Tape, Tensor};

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape.to_vec(), v).unwrap())
}

fn small_varm(beta: f64) -> VarmConfig {
    VarmConfig { beta, dilations: vec![1, 2], iterations: 3, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    // ---- tensor-core -----------------------------------------------------

    #[test]
    fn detach_blocks_gradient(x in tensor(&[6], -2.0, 2.0)) {
        let mut tape = Tape::new();
        let v = tape.param(x);
        let d = tape.detach(v);
        let s = tape.square(d)?;
        let root = tape.sum_all(s)?;
        let g = tape.backward(root)?;
        prop_assert!(g.wrt(v).data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn constant_resize_round_trip(c in -5.0f64..5.0, h in 1usize..9, w in 1usize..9, oh in 1usize..13, ow in 1usize..13) {
        let t = Tensor::full(&[h, w, 2], c);
        let up = resample::resize_tensor(&t, oh, ow)?;
        let back = resample::resize_tensor(&up, h, w)?;
        prop_assert_eq!(back, t);
    }

    #[test]
    fn reductions_commute_with_permutation(x in tensor(&[4, 3], -3.0, 3.0), perm in Just(vec![2usize, 0, 3, 1]).prop_shuffle()) {
        let mut permuted = Vec::new();
        for &r in &perm {
            permuted.extend_from_slice(&x.data()[r * 3..r * 3 + 3]);
        }
        let y = Tensor::new(vec![4, 3], permuted)?;
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(y));
        for f in [Tape::sum, Tape::mean, Tape::max] {
            let ra = f(&mut tape, a, &[0])?;
            let rb = f(&mut tape, b, &[0])?;
            prop_assert!(tape.value(ra).max_abs_diff(tape.value(rb)) < 1e-12);
        }
    }

    // ---- cam ---------------------------------------------------------------

    #[test]
    fn cam_is_nonnegative_and_scale_invariant(f in tensor(&[4, 4, 3], -1.0, 1.0), w in tensor(&[2, 3], -1.0, 1.0), lam in 0.1f64..10.0) {
        let head = ClassifierHead::new(w)?;
        let c = cam::compute_cam(&f, &head)?;
        prop_assert!(c.maps.data().iter().all(|&v| v >= 0.0));
        let scaled = cam::compute_cam(&f.map(|v| v * lam), &head)?;
        prop_assert!(scaled.maps.max_abs_diff(&c.maps.map(|v| v * lam)) < 1e-9);
        let present = [true, true];
        let n1 = cam::normalize_cam(&c, &present)?;
        let n2 = cam::normalize_cam(&scaled, &present)?;
        prop_assert!(n1.maps.max_abs_diff(&n2.maps) < 1e-9);
        prop_assert_eq!(
            cam::cam_to_pseudo_label(&n1, 0.55, 0.35)?.labels,
            cam::cam_to_pseudo_label(&n2, 0.55, 0.35)?.labels
        );
        for k in 0..2 {
            let m = (0..16).map(|p| n1.maps.data()[p * 2 + k]).fold(0.0f64, f64::max);
            prop_assert!(m == 0.0 || m == 1.0);
        }
    }

    #[test]
    fn raising_high_threshold_never_adds_foreground(f in tensor(&[4, 4, 3], -1.0, 1.0), w in tensor(&[2, 3], -1.0, 1.0), hi in 0.4f64..0.9, dh in 0.0f64..0.1) {
        let c = cam::normalize_cam(&cam::compute_cam(&f, &ClassifierHead::new(w)?)?, &[true, true])?;
        let a = cam::cam_to_pseudo_label(&c, hi, 0.35)?;
        let b = cam::cam_to_pseudo_label(&c, hi + dh, 0.35)?;
        for (x, y) in a.labels.iter().zip(&b.labels) {
            prop_assert!(!(*x == 0 && *y != 0 && *y != IGNORE));
            prop_assert!(*y == *x || *y == IGNORE || *y == 0);
        }
        prop_assert!(a.is_valid(2) && b.is_valid(2));
    }

    #[test]
    fn gap_and_fc_commute(f in tensor(&[3, 5, 4], -1.0, 1.0), w in tensor(&[3, 4], -1.0, 1.0)) {
        let y = cam::class_scores(&f, &ClassifierHead::new(w.clone())?)?;
        for c in 0..3 {
            let mut acc = 0.0;
            for p in 0..15 {
                acc += (0..4).map(|k| w.data()[c * 4 + k] * f.data()[p * 4 + k]).sum::<f64>();
            }
            prop_assert!((y.data()[c] - acc / 15.0).abs() < 1e-12);
        }
    }

    // ---- correspondence ----------------------------------------------------

    #[test]
    fn corr_is_bounded_and_symmetric(a in tensor(&[4, 4, 3], -1.0, 1.0), b in tensor(&[4, 4, 3], -1.0, 1.0), seed in 0u64..1000) {
        let p1 = correspondence::sample_positions(4, 4, 6, seed)?;
        let p2 = correspondence::sample_positions(4, 4, 6, seed + 1)?;
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let ab = correspondence::corr_volume(&mut tape, va, vb, &p1, &p2)?;
        let ba = correspondence::corr_volume(&mut tape, vb, va, &p2, &p1)?;
        let (m, mt) = (tape.value(ab.matrix), tape.value(ba.matrix));
        for i in 0..6 {
            for j in 0..6 {
                let v = m.data()[i * 6 + j];
                prop_assert!((-1.0..=1.0).contains(&v));
                prop_assert!((v - mt.data()[j * 6 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cam_correspondence_is_nonnegative(a in tensor(&[3, 3, 2], 0.0, 1.0), b in tensor(&[3, 3, 2], 0.0, 1.0)) {
        let pos: Vec<_> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let c = correspondence::corr_volume(&mut tape, va, vb, &pos, &pos)?;
        prop_assert!(tape.value(c.matrix).data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn scd_gradient_sign(s1 in tensor(&[2, 2, 3], -1.0, 1.0), s2 in tensor(&[2, 2, 3], -1.0, 1.0), m in tensor(&[2, 2, 3], 0.1, 1.0)) {
        // On S > 0 with M > 0 the loss can only fall as S grows, so the
        // gradient with respect to each cosine entry is ≤ 0.
        let pos: Vec<_> = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).collect();
        let mut tape = Tape::new();
        let (a, b) = (tape.param(s1), tape.param(s2));
        let mv = tape.constant(m);
        let mc = correspondence::corr_volume(&mut tape, mv, mv, &pos, &pos)?;
        let sc = correspondence::corr_volume(&mut tape, a, b, &pos, &pos)?;
        let l = correspondence::scd_loss(&mut tape, &mc, &sc)?;
        let g = tape.backward(l)?;
        let gs = g.get(sc.matrix).unwrap();
        for (gv, sv) in gs.data().iter().zip(tape.value(sc.matrix).data()) {
            if *sv > 0.0 {
                prop_assert!(*gv <= 0.0);
            } else {
                prop_assert_eq!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn hflip_positions_invert(h in 1usize..12, w in 1usize..12, i in 0usize..12, j in 0usize..12) {
        let (i, j) = (i % h, j % w);
        let t = AffineTransform::HFlip;
        let once = t.map_position((i, j), (h, w), (h, w));
        prop_assert_eq!(t.map_position(once, (h, w), (h, w)), (i, j));
    }

    #[test]
    fn hflip_transform_is_exact(x in tensor(&[3, 5, 2], -1.0, 1.0)) {
        let y = correspondence::apply_transform_tensor(AffineTransform::HFlip, &x)?;
        for i in 0..3 {
            for j in 0..5 {
                for c in 0..2 {
                    prop_assert_eq!(y.at3(i, j, c), x.at3(i, 4 - j, c));
                }
            }
        }
    }

    // ---- varm --------------------------------------------------------------

    #[test]
    fn varm_rows_are_normalized(img in tensor(&[6, 7, 3], 0.0, 1.0), beta in 0.0f64..0.5) {
        let k = varm::correction_kernel(&img, &small_varm(beta))?;
        for i in 0..6 {
            for j in 0..7 {
                let row = k.row(i, j);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn varm_preserves_range_and_class_sums(img in tensor(&[6, 6, 3], 0.0, 1.0), raw in tensor(&[6, 6, 3], 0.0, 1.0)) {
        let cfg = small_varm(0.01);
        let out = varm::refine(&raw, &img, &cfg)?;
        for c in 0..3 {
            let vals = |t: &Tensor| (0..36).map(move |p| t.data()[p * 3 + c]).collect::<Vec<_>>();
            let (lo, hi) = vals(&raw).iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            prop_assert!(vals(&out).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
        // Rows summing to one keep summing to one.
        let mut p = raw.clone();
        for px in p.data_mut().chunks_mut(3) {
            let s: f64 = px.iter().sum::<f64>().max(1e-9);
            px.iter_mut().for_each(|v| *v /= s);
        }
        let q = varm::refine(&p, &img, &cfg)?;
        for px in q.data().chunks(3) {
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn varm_matches_plain_adaptive_smoothing(img in tensor(&[5, 6, 3], 0.0, 1.0), p0 in tensor(&[5, 6, 2], 0.0, 1.0)) {
        let cfg = VarmConfig { beta: 0.0, dilations: vec![1], iterations: 2, ..Default::default() };
        let got = varm::refine(&p0, &img, &cfg)?;
        prop_assert!(got.max_abs_diff(&pamr(&p0, &img, cfg.alpha, 2)) < 1e-10);
    }

    #[test]
    fn varm_flip_equivariance(img in tensor(&[5, 6, 3], 0.0, 1.0), p0 in tensor(&[5, 6, 2], 0.0, 1.0)) {
        let cfg = small_varm(0.0);
        let a = varm::refine(&resample::hflip_tensor(&p0)?, &resample::hflip_tensor(&img)?, &cfg)?;
        let b = resample::hflip_tensor(&varm::refine(&p0, &img, &cfg)?)?;
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        // The one-sided variation map breaks exact symmetry once β > 0; the
        // deviation stays small at the default weight.
        let cfg = small_varm(0.01);
        let a = varm::refine(&resample::hflip_tensor(&p0)?, &resample::hflip_tensor(&img)?, &cfg)?;
        let b = resample::hflip_tensor(&varm::refine(&p0, &img, &cfg)?)?;
        prop_assert!(a.max_abs_diff(&b) < 0.05);
    }

    // ---- losses ------------------------------------------------------------

    #[test]
    fn classification_is_permutation_invariant(p in tensor(&[4], -4.0, 4.0), l in prop::collection::vec(any::<bool>(), 4), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let pp = Tensor::from_vec(perm.iter().map(|&i| p.data()[i]).collect());
        let lp: Vec<bool> = perm.iter().map(|&i| l[i]).collect();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(p), tape.constant(pp));
        let la = losses::classification_loss(&mut tape, a, &l)?;
        let lb = losses::classification_loss(&mut tape, b, &lp)?;
        prop_assert!((tape.value(la).item() - tape.value(lb).item()).abs() < 1e-12);
    }

    #[test]
    fn aux_loss_is_bounded(a1 in tensor(&[4, 4], -20.0, 20.0), a2 in tensor(&[4, 4], -20.0, 20.0)) {
        let labels = AffinityLabels { tokens: 4, positive: vec![(0, 1), (2, 3)], negative: vec![(0, 2), (1, 3)] };
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(a1), tape.constant(a2));
        let l = losses::aux_affinity_loss(&mut tape, x, y, &labels)?;
        let v = tape.value(l.loss).item();
        prop_assert!((0.0..=2.0).contains(&v));
    }

    #[test]
    fn segmentation_is_shift_invariant(s in tensor(&[3, 3, 4], -3.0, 3.0), shift in tensor(&[3, 3, 1], -5.0, 5.0)) {
        let target = cam::PseudoLabel::new(3, 3, vec![0, 1, 2, 3, IGNORE, 0, 1, 2, 3])?;
        let mut shifted = s.clone();
        for (p, px) in shifted.data_mut().chunks_mut(4).enumerate() {
            px.iter_mut().for_each(|v| *v += shift.data()[p]);
        }
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(s), tape.constant(shifted));
        let la = losses::segmentation_loss(&mut tape, a, &target)?.loss;
        let lb = losses::segmentation_loss(&mut tape, b, &target)?.loss;
        prop_assert!((tape.value(la).item() - tape.value(lb).item()).abs() < 1e-12);
    }

    #[test]
    fn total_is_linear(vals in prop::collection::vec(0.0f64..5.0, 6), l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, l3 in 0.0f64..2.0) {
        let mut tape = Tape::new();
        let v: Vec<_> = vals.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
        let terms = LossTerms { cls: Some(v[0]), seg: Some(v[1]), scd: Some(v[2]), equ: Some(v[3]), aux: Some(v[4]), reg: Some(v[5]) };
        let w = LossWeights { lambda1: l1, lambda2: l2, lambda3: l3 };
        let t = losses::total_loss(&mut tape, &terms, &w, false)?;
        let expect = l1 * (vals[1] + vals[2] + vals[3] + vals[4]) + l2 * vals[5] + l3 * vals[0];
        prop_assert!((tape.value(t).item() - expect).abs() < 1e-12);
        let warm = losses::total_loss(&mut tape, &terms, &w, true)?;
        prop_assert!((tape.value(warm).item() - l3 * vals[0]).abs() < 1e-12);
    }

    // ---- data / metrics ----------------------------------------------------

    #[test]
    fn labels_follow_masks(seed in 0u64..10_000, index in 0usize..50) {
        let spec = SyntheticSpec { num_images: 50, height: 24, width: 24, seed, ..Default::default() };
        let s = data::generate_one(&spec, index)?;
        prop_assert_eq!(&s.label, &data::label_from_mask(&s.mask, 3));
        prop_assert!(s.label.iter().any(|&b| b));
        prop_assert_eq!(s, data::generate_one(&spec, index)?);
    }

    #[test]
    fn miou_two_paths(gt in prop::collection::vec(prop_oneof![0u8..4, Just(IGNORE)], 40), pred in prop::collection::vec(0u8..4, 40)) {
        let mut cm = ConfusionMatrix::new(4);
        cm.add(&gt, &pred)?;
        let m = cm.metrics();
        let mut ious = Vec::new();
        for c in 0..4u8 {
            let valid = |k: usize| gt[k] != IGNORE;
            let inter = (0..40).filter(|&k| valid(k) && gt[k] == c && pred[k] == c).count();
            let union = (0..40).filter(|&k| valid(k) && (gt[k] == c || pred[k] == c)).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let expect = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
        prop_assert!((m.miou - expect).abs() < 1e-12);
    }
}

/// Independent pixel-adaptive smoothing over the 3×3 neighbourhood with
/// replicate padding: weights ∝ exp(−(α·δ/σ)²), δ the channel-mean absolute
/// difference and σ its standard deviation over the nine taps.
fn pamr(p0: &Tensor, img: &Tensor, alpha: f64, iters: usize) -> Tensor {
    let (h, w, c) = p0.hwc().unwrap();
    let at = |t: &Tensor, i: isize, j: isize, ch: usize, cc: usize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        t.data()[(i * w + j) * cc + ch]
    };
    let mut kernels = vec![[0.0f64; 9]; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut d = [0.0f64; 9];
            let mut n = 0;
            for di in -1..=1 {
                for dj in -1..=1 {
                    d[n] = (0..3).map(|ch| (at(img, i, j, ch, 3) - at(img, i + di, j + dj, ch, 3)).abs()).sum::<f64>() / 3.0;
                    n += 1;
                }
            }
            let mean = d.iter().sum::<f64>() / 9.0;
            let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 9.0).sqrt().max(1e-6);
            let e: Vec<f64> = d.iter().map(|x| (-(alpha * x / sd).powi(2)).exp()).collect();
            let z: f64 = e.iter().sum();
            let k = &mut kernels[i as usize * w + j as usize];
            for t in 0..9 {
                k[t] = e[t] / z;
            }
        }
    }
    let mut p = p0.clone();
    for _ in 0..iters {
        let mut out = vec![0.0; h * w * c];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let k = &kernels[i as usize * w + j as usize];
                for ch in 0..c {
                    let mut n = 0;
                    let mut acc = 0.0;
                    for di in -1..=1 {
                        for dj in -1..=1 {
                            acc += k[n] * at(&p, i + di, j + dj, ch, c);
                            n += 1;
                        }
                    }
                    out[(i as usize * w + j as usize) * c + ch] = acc;
                }
            }
        }
        p = Tensor::new(vec![h, w, c], out).unwrap();
    }
    p
}
