//! Training loop, pseudo-label pipeline, evaluation and ablation.
//!
//! A step draws a batch, augments it, and builds a second view of every
//! image with a random non-identity transform. Both views go through the
//! same parameters. Pseudo-labels are recomputed from the current CAMs at
//! every step; nothing is cached. During warmup only the classification
//! loss is built.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::cam::{self, Cam, PseudoLabel, BACKGROUND, IGNORE};
use crate::correspondence::{self, AffineTransform, DEFAULT_SAMPLES};
use crate::data::{self, AugmentConfig, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, LossTerms, LossWeights};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::{ForwardOutput, Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::resample;
use crate::tensor::Tensor;
use crate::varm::{self, VarmConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub crop: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub varm: VarmConfig,
    pub scd_samples: usize,
    pub high_threshold: f64,
    pub low_threshold: f64,
    pub channels: usize,
    pub use_varm: bool,
    pub use_scd: bool,
    pub use_aux: bool,
    pub use_equ: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            warmup_iterations: 300,
            batch_size: 4,
            lr: 6e-5,
            weight_decay: 0.01,
            crop: 64,
            seed: 0,
            weights: LossWeights::default(),
            varm: VarmConfig::default(),
            scd_samples: DEFAULT_SAMPLES,
            high_threshold: cam::DEFAULT_HIGH_THRESHOLD,
            low_threshold: cam::DEFAULT_LOW_THRESHOLD,
            channels: crate::model::DEFAULT_CHANNELS,
            use_varm: true,
            use_scd: true,
            use_aux: true,
            use_equ: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iterations > self.iterations {
            return Err(Error::Config(format!(
                "warmup_iterations {} exceeds iterations {}",
                self.warmup_iterations, self.iterations
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.crop == 0 || self.crop % 8 != 0 {
            return Err(Error::Config(format!("crop must be a positive multiple of 8, got {}", self.crop)));
        }
        if self.scd_samples < 2 {
            return Err(Error::Config("scd samples must be >= 2".into()));
        }
        if !(self.low_threshold < self.high_threshold) {
            return Err(Error::Config("need low_threshold < high_threshold".into()));
        }
        self.weights.validate()?;
        self.varm.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig { crop: self.crop, ..AugmentConfig::default() }
    }
}

/// Batch-mean loss values of one step. Inactive terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub cls: f64,
    pub seg: f64,
    pub scd: f64,
    pub equ: f64,
    pub aux: f64,
    pub reg: f64,
}

impl LossComponents {
    pub const CSV_HEADER: &'static str = "step,total,cls,seg,scd,equ,aux,reg";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.total, self.cls, self.seg, self.scd, self.equ, self.aux, self.reg
        )
    }

    fn all_finite(&self) -> bool {
        [self.total, self.cls, self.seg, self.scd, self.equ, self.aux, self.reg].iter().all(|v| v.is_finite())
    }
}

impl fmt::Display for LossComponents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} cls={} seg={} scd={} equ={} aux={} reg={}",
            self.total, self.cls, self.seg, self.scd, self.equ, self.aux, self.reg
        )
    }
}

/// `[H, W, C+1]` scores: a constant background channel followed by the
/// normalized CAM upsampled to `h × w`.
pub fn score_map(cam: &Cam, h: usize, w: usize, background: f64) -> Result<Tensor> {
    let up = resample::resize_tensor(&cam.maps, h, w)?;
    let c = cam.num_classes();
    let mut out = Vec::with_capacity(h * w * (c + 1));
    for px in up.data().chunks(c) {
        out.push(background);
        out.extend_from_slice(px);
    }
    Tensor::new(vec![h, w, c + 1], out)
}

/// Dual-threshold pseudo-label at image resolution, optionally refined.
///
/// A pixel is foreground (`argmax + 1`) when its best refined foreground
/// score reaches the refined `hi` background, background when it stays
/// below the refined `lo` background, and [`IGNORE`] otherwise. Without
/// refinement this reduces to thresholding the CAM at `hi` / `lo`.
pub fn pseudo_label(
    cam: &Cam,
    img: &Tensor,
    hi: f64,
    lo: f64,
    refine: Option<&VarmConfig>,
) -> Result<PseudoLabel> {
    if !cam.normalized {
        return Err(Error::InvalidArgument("pseudo_label needs a normalized CAM".into()));
    }
    let (h, w, _) = img.hwc()?;
    let p_hi = score_map(cam, h, w, hi)?;
    let p_lo = score_map(cam, h, w, lo)?;
    match refine.filter(|c| c.iterations > 0) {
        Some(cfg) => {
            // Both maps share one kernel; refine them as one stacked map.
            let c1 = p_hi.shape()[2];
            let stacked: Vec<f64> = p_hi
                .data()
                .chunks(c1)
                .zip(p_lo.data().chunks(c1))
                .flat_map(|(a, b)| a.iter().chain(b).copied())
                .collect();
            let stacked = Tensor::new(vec![h, w, 2 * c1], stacked)?;
            let kernel = varm::correction_kernel(img, cfg)?;
            let r = varm::refine_with_kernel(&stacked, &kernel, cfg.iterations)?;
            let (mut r_hi, mut r_lo) = (Vec::with_capacity(h * w * c1), Vec::with_capacity(h * w * c1));
            for px in r.data().chunks(2 * c1) {
                r_hi.extend_from_slice(&px[..c1]);
                r_lo.extend_from_slice(&px[c1..]);
            }
            label_from_scores(&Tensor::new(vec![h, w, c1], r_hi)?, &Tensor::new(vec![h, w, c1], r_lo)?)
        }
        None => label_from_scores(&p_hi, &p_lo),
    }
}

/// Labels from background-first `[H, W, C+1]` high and low score maps.
pub fn label_from_scores(p_hi: &Tensor, p_lo: &Tensor) -> Result<PseudoLabel> {
    let (h, w, c1) = p_hi.hwc()?;
    if p_lo.shape() != p_hi.shape() {
        return Err(Error::Shape("score maps differ in shape".into()));
    }
    let labels = p_hi
        .data()
        .chunks(c1)
        .zip(p_lo.data().chunks(c1))
        .map(|(a, b)| {
            let (k, s) = cam::argmax(&a[1..]);
            let (_, s_lo) = cam::argmax(&b[1..]);
            if s >= a[0] {
                k as u8 + 1
            } else if s_lo < b[0] {
                BACKGROUND
            } else {
                IGNORE
            }
        })
        .collect();
    PseudoLabel::new(h, w, labels)
}

fn normalized_cam(tape: &Tape, v: Var, present: &[bool]) -> Result<Cam> {
    cam::normalize_cam(&Cam { maps: tape.value(v).clone(), normalized: false }, present)
}

struct ViewOut {
    img: Tensor,
    out: ForwardOutput,
}

/// Losses for one sample, added to `terms` as scalar nodes.
fn sample_losses(
    tape: &mut Tape,
    model: &Model,
    bound: &crate::model::Bound,
    sample: &Sample,
    cfg: &TrainConfig,
    warmup: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms> {
    let x1 = tape.constant(sample.image.clone());
    let v1 = ViewOut { img: sample.image.clone(), out: model.forward(tape, bound, x1)? };
    let cls = losses::classification_loss(tape, v1.out.logits, &sample.label)?;
    let mut terms = LossTerms { cls: Some(cls), ..Default::default() };
    if warmup {
        return Ok(terms);
    }

    let t = AffineTransform::ALL[rng.gen_range(1..AffineTransform::ALL.len())];
    let img2 = correspondence::apply_transform_tensor(t, &sample.image)?;
    let x2 = tape.constant(img2.clone());
    let v2 = ViewOut { img: img2, out: model.forward(tape, bound, x2)? };

    let refine = cfg.use_varm.then_some(&cfg.varm);
    let mut cams = Vec::with_capacity(2);
    let mut labels = Vec::with_capacity(2);
    for v in [&v1, &v2] {
        let ncam = normalized_cam(tape, v.out.cam, &sample.label)?;
        labels.push(pseudo_label(&ncam, &v.img, cfg.high_threshold, cfg.low_threshold, refine)?);
        cams.push(ncam);
    }

    let mut seg = Vec::new();
    for (v, l) in [&v1, &v2].into_iter().zip(&labels) {
        let s = losses::segmentation_loss(tape, v.out.seg, l)?;
        if !s.empty {
            seg.push(s.loss);
        }
    }
    if !seg.is_empty() {
        let n = seg.len() as f64;
        let mut acc = seg[0];
        for &s in &seg[1..] {
            acc = tape.add(acc, s)?;
        }
        terms.seg = Some(tape.scale(acc, 1.0 / n)?);
    }

    let probs = tape.softmax(v1.out.seg)?;
    terms.reg = Some(losses::reg_loss(tape, probs, &v1.img)?);

    let grid1 = {
        let s = tape.shape(v1.out.cam);
        (s[0], s[1])
    };
    let grid2 = {
        let s = tape.shape(v2.out.cam);
        (s[0], s[1])
    };
    let n = cfg.scd_samples.min(grid1.0 * grid1.1);
    let pos1 = correspondence::sample_positions_with(rng, grid1.0, grid1.1, n)?;

    if cfg.use_scd {
        let pos2: Vec<_> = pos1.iter().map(|&p| t.map_position(p, grid1, grid2)).collect();
        let m1 = tape.constant(cams[0].maps.clone());
        let m2 = tape.constant(cams[1].maps.clone());
        let m = correspondence::corr_volume(tape, m1, m2, &pos1, &pos2)?;
        let s = correspondence::corr_volume(tape, v1.out.seg_low, v2.out.seg_low, &pos1, &pos2)?;
        terms.scd = Some(correspondence::scd_loss(tape, &m, &s)?);
    }
    if cfg.use_equ {
        terms.equ = Some(correspondence::equivariant_loss(tape, v1.out.cam, v2.out.cam, t)?);
    }
    if cfg.use_aux {
        let grid_label = losses::label_to_grid(&labels[0], grid1.0, grid1.1);
        let aff = losses::build_affinity_labels(&grid_label, &pos1)?;
        let a = losses::aux_affinity_loss(tape, v1.out.attn_logits[0], v1.out.attn_logits[1], &aff)?;
        if !a.empty {
            terms.aux = Some(a.loss);
        }
    }
    Ok(terms)
}

fn value_of(tape: &Tape, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item())
}

/// Batch-mean loss components and the gradient of the total loss with
/// respect to every model parameter, in storage order.
pub fn loss_gradients(
    model: &Model,
    batch: &[Sample],
    step: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossComponents, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let warmup = step < cfg.warmup_iterations;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut comps = LossComponents::default();
    let mut total: Option<Var> = None;
    let inv_b = 1.0 / batch.len() as f64;
    let diverged = |comps: &LossComponents, why: String| Error::Diverged { step, dump: format!("{comps} ({why})") };

    for sample in batch {
        let terms = match sample_losses(&mut tape, model, &bound, sample, cfg, warmup, rng) {
            Ok(t) => t,
            Err(Error::NonFinite { op }) => return Err(diverged(&comps, format!("non-finite value in {op}"))),
            Err(e) => return Err(e),
        };
        let t = losses::total_loss(&mut tape, &terms, &cfg.weights, warmup)?;
        comps.cls += inv_b * value_of(&tape, terms.cls);
        comps.seg += inv_b * value_of(&tape, terms.seg);
        comps.scd += inv_b * value_of(&tape, terms.scd);
        comps.equ += inv_b * value_of(&tape, terms.equ);
        comps.aux += inv_b * value_of(&tape, terms.aux);
        comps.reg += inv_b * value_of(&tape, terms.reg);
        comps.total += inv_b * tape.value(t).item();
        total = Some(match total {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    if !comps.all_finite() {
        return Err(diverged(&comps, "non-finite loss".into()));
    }
    let root = tape.scale(total.expect("non-empty batch"), inv_b)?;
    let grads = match tape.backward(root) {
        Ok(g) => g,
        Err(Error::NonFinite { op }) => return Err(diverged(&comps, format!("non-finite gradient in {op}"))),
        Err(e) => return Err(e),
    };
    let g: Vec<Tensor> = bound.vars.iter().map(|&v| grads.wrt(v)).collect();
    if g.iter().any(|t| !t.all_finite()) {
        return Err(diverged(&comps, "non-finite gradient".into()));
    }
    Ok((comps, g))
}

/// One optimizer step on `batch`. Returns the batch-mean loss components.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[Sample],
    step: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossComponents> {
    let (comps, g) = loss_gradients(model, batch, step, cfg, rng)?;
    opt.step(&mut model.params, &g);
    Ok(comps)
}

/// Per-step generator: every configuration with the same seed sees the same
/// batches and augmentations for a given step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

pub fn draw_batch(ds: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let aug = cfg.augment();
    (0..cfg.batch_size)
        .map(|_| {
            let i = rng.gen_range(0..ds.len());
            data::augment(&ds.samples[i], &aug, rng)
        })
        .collect()
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let model_cfg = ModelConfig { channels: config.channels, ..ModelConfig::new(num_classes) };
        let model = Model::init(model_cfg, config.seed)?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer(), &model.params);
        Ok(Self { config, model, optimizer, step: 0 })
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.iterations
    }

    pub fn step(&mut self, ds: &Dataset) -> Result<LossComponents> {
        if ds.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if ds.num_classes() != self.model.config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes, model has {}",
                ds.num_classes(),
                self.model.config.num_classes
            )));
        }
        let mut rng = step_rng(self.config.seed, self.step);
        let batch = draw_batch(ds, &self.config, &mut rng)?;
        let c = train_step(&mut self.model, &mut self.optimizer, &batch, self.step, &self.config, &mut rng)?;
        self.step += 1;
        Ok(c)
    }
}

/// Runs the full schedule, reporting each step.
pub fn train(
    cfg: &TrainConfig,
    ds: &Dataset,
    mut on_step: impl FnMut(usize, &LossComponents),
) -> Result<Model> {
    let mut t = Trainer::new(cfg.clone(), ds.num_classes())?;
    while !t.done() {
        let s = t.step;
        let c = t.step(ds)?;
        on_step(s, &c);
    }
    Ok(t.model)
}

/// Per-pixel arg-max of the segmentation head.
pub fn predict_mask(model: &Model, img: &Tensor) -> Result<Vec<u8>> {
    let p = model.predict(img)?;
    let c = p.seg.shape()[2];
    Ok(p.seg.data().chunks(c).map(|px| cam::argmax(px).0 as u8).collect())
}

pub fn evaluate(ds: &Dataset, model: &Model) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let preds = ds
        .samples
        .par_iter()
        .map(|s| predict_mask(model, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(ds.num_classes() + 1);
    for (s, p) in ds.samples.iter().zip(&preds) {
        cm.add(&s.mask, p)?;
    }
    Ok(cm.metrics())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Varm,
    VarmScd,
    Aux,
    Equ,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Varm, Variant::VarmScd, Variant::Aux, Variant::Equ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Varm => "+VARM",
            Variant::VarmScd => "+VARM+SCD",
            Variant::Aux => "+aux",
            Variant::Equ => "+equ",
        }
    }

    /// Each row adds its component on top of the previous rows.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let rank = Variant::ALL.iter().position(|&v| v == self).unwrap();
        TrainConfig {
            use_varm: rank >= 1,
            use_scd: rank >= 2,
            use_aux: rank >= 3,
            use_equ: rank >= 4,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub miou: Vec<f64>,
}

impl AblationRow {
    pub fn median(&self) -> f64 {
        median(&self.miou)
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Trains every variant for every seed and evaluates on `val`.
pub fn ablation_run(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_set: &Dataset,
    val: &Dataset,
    mut report: impl FnMut(Variant, u64, f64),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut miou = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..v.apply(base) };
            let model = train(&cfg, train_set, |_, _| {})?;
            let m = evaluate(val, &model)?.miou;
            report(v, seed, m);
            miou.push(m);
        }
        rows.push(AblationRow { variant: v, miou });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,median_miou,runs\n");
    for r in rows {
        let runs: Vec<String> = r.miou.iter().map(|m| format!("{m:.4}")).collect();
        s.push_str(&format!("{},{:.4},{}\n", r.variant.name(), r.median(), runs.join(";")));
    }
    s
}
