//! Synthetic shapes dataset, on-disk layout, and training augmentation.
//!
//! Each image holds one to three filled shapes (circle, square, triangle)
//! on a textured background. Every class has a base colour that is jittered
//! per shape. Masks use `0` for background and `class + 1` for shapes; later
//! shapes occlude earlier ones. Images are quantized to 8 bits at generation
//! time so a dataset read back from disk is identical to the in-memory one.
//!
//! Directory layout:
//!
//! ```text
//! classes.txt        one class name per line
//! images/NNNN.ppm    RGB image (P6)
//! labels/NNNN.txt    comma-separated class names present
//! masks/NNNN.pgm     ground-truth class indices (P5)
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cam::IGNORE;
use crate::error::{Error, Result};
use crate::pnm::{self, quantize};
use crate::resample;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const MIN_SHAPE_PIXELS: usize = 25;
pub const MAX_PLACEMENT_RETRIES: usize = 200;

const BASE_COLORS: [[f64; 3]; 3] = [[0.85, 0.25, 0.2], [0.25, 0.75, 0.3], [0.25, 0.35, 0.9]];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub color_jitter: f64,
    pub texture: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_images: 200,
            height: 64,
            width: 64,
            num_classes: 3,
            min_shapes: 1,
            max_shapes: 3,
            color_jitter: 0.1,
            texture: 0.06,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "image size must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!("num_classes must be 1..=3, got {}", self.num_classes)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config("need 1 <= min_shapes <= max_shapes".into()));
        }
        for (k, v) in [("color_jitter", self.color_jitter), ("texture", self.texture)] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::Config(format!("{k} must be in [0, 0.5], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    /// Multi-hot presence over the dataset classes.
    pub label: Vec<bool>,
    /// Row-major class indices, `0` background.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Presence vector recomputed from a mask.
pub fn label_from_mask(mask: &[u8], num_classes: usize) -> Vec<bool> {
    let mut l = vec![false; num_classes];
    for &m in mask {
        if m != 0 && m != IGNORE && (m as usize) <= num_classes {
            l[m as usize - 1] = true;
        }
    }
    l
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle,
    Square,
    Triangle,
}

fn inside(shape: Shape, cy: f64, cx: f64, r: f64, y: f64, x: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match shape {
        Shape::Circle => dy * dy + dx * dx <= r * r,
        Shape::Square => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
        Shape::Triangle => {
            // Apex up; base below the centre.
            let top = -r;
            let base = 0.7 * r;
            if dy < top || dy > base {
                return false;
            }
            let half = 0.95 * r * (dy - top) / (base - top);
            dx.abs() <= half
        }
    }
}

fn one_image(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    let scale = h.min(w) as f64 / 64.0;

    let g: f64 = rng.gen_range(0.35..0.6);
    let tint: Vec<f64> = (0..3).map(|_| g + rng.gen_range(-0.05..0.05)).collect();
    let (fy, fx, ph): (f64, f64, f64) = (rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.0..6.28));
    let mut img = vec![0.0; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            let wave = (fy * i as f64 + fx * j as f64 + ph).sin();
            for c in 0..3 {
                let noise: f64 = rng.gen_range(-1.0..1.0);
                img[(i * w + j) * 3 + c] = tint[c] + spec.texture * (0.6 * wave + 0.4 * noise);
            }
        }
    }

    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_RETRIES {
        let mut mask = vec![0u8; h * w];
        let mut shapes = Vec::with_capacity(count);
        for k in 0..count {
            let class = rng.gen_range(0..spec.num_classes);
            let r = rng.gen_range(6.0..14.0) * scale;
            let cy = rng.gen_range(r * 0.5..h as f64 - r * 0.5);
            let cx = rng.gen_range(r * 0.5..w as f64 - r * 0.5);
            let shape = [Shape::Circle, Shape::Square, Shape::Triangle][class];
            for i in 0..h {
                for j in 0..w {
                    if inside(shape, cy, cx, r, i as f64 + 0.5, j as f64 + 0.5) {
                        mask[i * w + j] = (k + 1) as u8;
                    }
                }
            }
            shapes.push(class);
        }
        let visible_ok = (1..=count).all(|k| mask.iter().filter(|&&m| m as usize == k).count() >= MIN_SHAPE_PIXELS);
        if visible_ok {
            placed = Some((mask, shapes));
            break;
        }
    }
    let (instances, classes) =
        placed.ok_or_else(|| Error::InvalidArgument("could not place shapes after bounded retries".into()))?;

    let colors: Vec<[f64; 3]> = classes
        .iter()
        .map(|&c| {
            let mut col = BASE_COLORS[c];
            for v in &mut col {
                *v += rng.gen_range(-spec.color_jitter..=spec.color_jitter);
            }
            col
        })
        .collect();
    let mut mask = vec![0u8; h * w];
    for (p, &inst) in instances.iter().enumerate() {
        if inst == 0 {
            continue;
        }
        let k = inst as usize - 1;
        mask[p] = classes[k] as u8 + 1;
        for c in 0..3 {
            let noise: f64 = rng.gen_range(-1.0..1.0);
            img[p * 3 + c] = colors[k][c] + 0.5 * spec.texture * noise;
        }
    }
    let img = img.into_iter().map(|v| quantize(v) as f64 / 255.0).collect();
    let label = label_from_mask(&mask, spec.num_classes);
    Ok(Sample { image: Tensor::new(vec![h, w, 3], img)?, label, mask })
}

/// Sample `index` of the dataset described by `spec`.
pub fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    one_image(spec, &mut rng)
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.num_images)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        class_names: CLASS_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect(),
        samples,
    })
}

fn file_stem(i: usize) -> String {
    format!("{i:04}")
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for sub in ["images", "labels", "masks"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    fs::write(dir.join("classes.txt"), ds.class_names.join("\n") + "\n")?;
    for (i, s) in ds.samples.iter().enumerate() {
        let stem = file_stem(i);
        pnm::write_image(&dir.join("images").join(format!("{stem}.ppm")), &s.image)?;
        pnm::write_gray(&dir.join("masks").join(format!("{stem}.pgm")), s.height(), s.width(), &s.mask)?;
        let names: Vec<&str> = ds
            .class_names
            .iter()
            .zip(&s.label)
            .filter(|(_, &on)| on)
            .map(|(n, _)| n.as_str())
            .collect();
        fs::write(dir.join("labels").join(format!("{stem}.txt")), names.join(",") + "\n")?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("dataset directory {} does not exist", dir.display())));
    }
    let class_names: Vec<String> = match fs::read_to_string(dir.join("classes.txt")) {
        Ok(s) => s.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
        Err(_) => CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let mut stems: Vec<String> = fs::read_dir(dir.join("images"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".ppm").map(String::from)
        })
        .collect();
    stems.sort();
    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let image = pnm::read_image(&dir.join("images").join(format!("{stem}.ppm")))?;
        let (h, w, _) = image.hwc()?;
        let text = fs::read_to_string(dir.join("labels").join(format!("{stem}.txt")))?;
        let mut label = vec![false; class_names.len()];
        for name in text.trim().split(',').map(str::trim).filter(|n| !n.is_empty()) {
            let k = class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Format(format!("unknown class {name:?} in labels/{stem}.txt")))?;
            label[k] = true;
        }
        let mask_path = dir.join("masks").join(format!("{stem}.pgm"));
        let mask = if mask_path.exists() {
            let (mh, mw, m) = pnm::read_gray(&mask_path)?;
            if (mh, mw) != (h, w) {
                return Err(Error::Format(format!("mask {stem} is {mh}x{mw}, image is {h}x{w}")));
            }
            m
        } else {
            vec![IGNORE; h * w]
        };
        samples.push(Sample { image, label, mask });
    }
    Ok(Dataset { class_names, samples })
}

/// Bilinear rescale of the image with nearest-neighbour rescale of the mask.
pub fn rescale(s: &Sample, oh: usize, ow: usize) -> Result<Sample> {
    let image = resample::resize_tensor(&s.image, oh, ow)?;
    let mask = resample::resize_nearest(&s.mask, s.height(), s.width(), oh, ow);
    Ok(Sample { image, label: label_from_mask(&mask, s.label.len()), mask })
}

/// `size × size` window at `(top, left)`. Regions past the border are zero
/// in the image and [`IGNORE`] in the mask.
pub fn crop(s: &Sample, top: usize, left: usize, size: usize) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    let mut img = Tensor::zeros(&[size, size, 3]);
    let mut mask = vec![IGNORE; size * size];
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (top + i, left + j);
            if y < h && x < w {
                for c in 0..3 {
                    img.set3(i, j, c, s.image.at3(y, x, c));
                }
                mask[i * size + j] = s.mask[y * w + x];
            }
        }
    }
    Ok(Sample { image: img, label: label_from_mask(&mask, s.label.len()), mask })
}

pub fn hflip(s: &Sample) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    let image = resample::hflip_tensor(&s.image)?;
    let mask = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| s.mask[i * w + w - 1 - j]).collect();
    Ok(Sample { image, label: s.label.clone(), mask })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { crop: 64, scale_min: 1.0, scale_max: 1.5, flip_prob: 0.5 }
    }
}

/// Random rescale, random crop, random horizontal flip. The label is
/// recomputed from the transformed mask.
pub fn augment<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    let f = if cfg.scale_max > cfg.scale_min { rng.gen_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
    let oh = ((s.height() as f64 * f).round() as usize).max(1);
    let ow = ((s.width() as f64 * f).round() as usize).max(1);
    let r = rescale(s, oh, ow)?;
    let top = if oh > cfg.crop { rng.gen_range(0..=oh - cfg.crop) } else { 0 };
    let left = if ow > cfg.crop { rng.gen_range(0..=ow - cfg.crop) } else { 0 };
    let c = crop(&r, top, left, cfg.crop)?;
    if rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        hflip(&c)
    } else {
        Ok(c)
    }
}
