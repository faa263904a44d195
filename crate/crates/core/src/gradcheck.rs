//! Central finite-difference gradient checks.
//!
//! The error metric is norm-wise: `‖g_tape − g_fd‖∞ / max(‖g_tape‖∞, ‖g_fd‖∞)`
//! over all checked inputs together. Per-entry ratios are dominated by
//! finite-difference noise on entries that are near zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::cam::{PseudoLabel, IGNORE};
use crate::correspondence::{corr_volume, equivariant_loss, scd_loss, AffineTransform, Rescale};
use crate::error::Result;
use crate::losses::{self, AffinityLabels, LossTerms, LossWeights};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err <= tol
    }
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            work[k].data_mut()[e] = x0 + h;
            let fp = eval(&work)?;
            work[k].data_mut()[e] = x0 - h;
            let fm = eval(&work)?;
            work[k].data_mut()[e] = x0;
            g.data_mut()[e] = (fp - fm) / (2.0 * h);
        }
        numeric.push(g);
    }

    let mut max_abs_err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            max_abs_err = max_abs_err.max((x - y).abs());
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    let rel_err = if scale == 0.0 { 0.0 } else { max_abs_err / scale };
    Ok(GradCheckReport {
        num_params: inputs.iter().map(Tensor::len).sum(),
        max_abs_err,
        rel_err,
        analytic,
        numeric,
    })
}

/// Tolerance of the loss suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Finite-difference checks of every training loss on random inputs, each
/// with at most 64 parameters.
pub fn loss_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;
    let mut out = Vec::new();

    // SCD: CAM side is a constant target, segmentation side is checked.
    let cam1 = uniform(&mut rng, &[3, 3, 3], 0.0, 1.0);
    let cam2 = uniform(&mut rng, &[3, 3, 3], 0.0, 1.0);
    let positions: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
    let flipped: Vec<(usize, usize)> = positions.iter().map(|&(i, j)| (i, 2 - j)).collect();
    let scd_inputs = [uniform(&mut rng, &[3, 3, 3], -1.0, 1.0), uniform(&mut rng, &[3, 3, 3], -1.0, 1.0)];
    let scd = |tape: &mut Tape, v: &[Var]| {
        let m1 = tape.constant(cam1.clone());
        let m2 = tape.constant(cam2.clone());
        let m = corr_volume(tape, m1, m2, &positions, &flipped)?;
        let s = corr_volume(tape, v[0], v[1], &positions, &flipped)?;
        scd_loss(tape, &m, &s)
    };
    out.push(("scd", check_gradients(&scd_inputs, h, scd)?));

    let t = AffineTransform::HFlipRescale(Rescale::Half);
    let equ_inputs = [uniform(&mut rng, &[4, 4, 2], 0.0, 1.0), uniform(&mut rng, &[2, 2, 2], 0.0, 1.0)];
    out.push(("equ", check_gradients(&equ_inputs, h, |tape, v| equivariant_loss(tape, v[0], v[1], t))?));

    let labels = [true, false, true, false, true];
    let cls_inputs = [uniform(&mut rng, &[5], -3.0, 3.0)];
    out.push(("cls", check_gradients(&cls_inputs, h, |tape, v| losses::classification_loss(tape, v[0], &labels))?));

    let aff = AffinityLabels { tokens: 4, positive: vec![(0, 1), (2, 3)], negative: vec![(0, 2), (1, 3), (3, 0)] };
    let aux_inputs = [uniform(&mut rng, &[4, 4], -2.0, 2.0), uniform(&mut rng, &[4, 4], -2.0, 2.0)];
    out.push(("aux", check_gradients(&aux_inputs, h, |tape, v| Ok(losses::aux_affinity_loss(tape, v[0], v[1], &aff)?.loss))?));

    let target = PseudoLabel::new(3, 3, vec![0, 1, 2, 3, IGNORE, 0, 1, 2, 3]).expect("label");
    let seg_inputs = [uniform(&mut rng, &[3, 3, 4], -2.0, 2.0)];
    out.push(("seg", check_gradients(&seg_inputs, h, |tape, v| Ok(losses::segmentation_loss(tape, v[0], &target)?.loss))?));

    let img = uniform(&mut rng, &[4, 4, 3], 0.4, 0.6);
    let reg_inputs = [uniform(&mut rng, &[4, 4, 3], -2.0, 2.0)];
    let reg = |tape: &mut Tape, v: &[Var]| {
        let p = tape.softmax(v[0])?;
        losses::reg_loss(tape, p, &img)
    };
    out.push(("reg", check_gradients(&reg_inputs, h, reg)?));

    // Total: every term driven by one shared logit map plus class logits and
    // attention logits.
    let total_img = uniform(&mut rng, &[3, 3, 3], 0.4, 0.6);
    let total_target = PseudoLabel::new(3, 3, vec![0, 1, 2, 0, IGNORE, 1, 2, 2, 0]).expect("label");
    let total_cam = uniform(&mut rng, &[3, 3, 2], 0.0, 1.0);
    let total_aff = AffinityLabels { tokens: 4, positive: vec![(0, 1)], negative: vec![(1, 2), (0, 3)] };
    let total_inputs = [
        uniform(&mut rng, &[3, 3, 3], -2.0, 2.0),
        uniform(&mut rng, &[2], -2.0, 2.0),
        uniform(&mut rng, &[4, 4], -2.0, 2.0),
        uniform(&mut rng, &[4, 4], -2.0, 2.0),
    ];
    let total = |tape: &mut Tape, v: &[Var]| {
        let seg = losses::segmentation_loss(tape, v[0], &total_target)?.loss;
        let probs = tape.softmax(v[0])?;
        let reg = losses::reg_loss(tape, probs, &total_img)?;
        let m1 = tape.constant(total_cam.clone());
        let m = corr_volume(tape, m1, m1, &positions, &flipped)?;
        let flipped_seg = crate::resample::hflip(tape, v[0])?;
        let s = corr_volume(tape, v[0], flipped_seg, &positions, &flipped)?;
        let scd = scd_loss(tape, &m, &s)?;
        let equ = equivariant_loss(tape, v[0], v[0], AffineTransform::HFlip)?;
        let cls = losses::classification_loss(tape, v[1], &[true, false])?;
        let aux = losses::aux_affinity_loss(tape, v[2], v[3], &total_aff)?.loss;
        let terms = LossTerms {
            cls: Some(cls),
            seg: Some(seg),
            scd: Some(scd),
            equ: Some(equ),
            aux: Some(aux),
            reg: Some(reg),
        };
        losses::total_loss(tape, &terms, &LossWeights::default(), false)
    };
    out.push(("total", check_gradients(&total_inputs, h, total)?));
    Ok(out)
}
