//! Flat `key = value` configuration.
//!
//! Blank lines and `#` comments are skipped. Unknown keys are errors.

use scd_core::data::SyntheticSpec;
use scd_core::train::TrainConfig;

type Setter<T> = fn(&mut T, &str) -> Result<(), String>;

fn num<N: std::str::FromStr>(v: &str) -> Result<N, String> {
    v.trim().parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

pub fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|s| num(s)).collect()
}

/// Key, documentation, getter, setter.
pub struct Key<T> {
    pub name: &'static str,
    pub doc: &'static str,
    pub get: fn(&T) -> String,
    pub set: Setter<T>,
}

macro_rules! key {
    ($name:literal, $doc:literal, |$c:ident| $get:expr, |$s:ident, $v:ident| $set:expr) => {
        Key { name: $name, doc: $doc, get: |$c| $get, set: |$s, $v| { $set; Ok(()) } }
    };
}

pub fn train_keys() -> Vec<Key<TrainConfig>> {
    vec![
        key!("train.iterations", "optimizer steps", |c| c.iterations.to_string(), |c, v| c.iterations = num(v)?),
        key!("train.warmup_iterations", "classification-only steps", |c| c.warmup_iterations.to_string(), |c, v| c.warmup_iterations = num(v)?),
        key!("train.batch_size", "images per step", |c| c.batch_size.to_string(), |c, v| c.batch_size = num(v)?),
        key!("train.lr", "learning rate", |c| c.lr.to_string(), |c, v| c.lr = num(v)?),
        key!("train.weight_decay", "decoupled weight decay", |c| c.weight_decay.to_string(), |c, v| c.weight_decay = num(v)?),
        key!("train.crop", "training crop size", |c| c.crop.to_string(), |c, v| c.crop = num(v)?),
        key!("train.seed", "seed for init, batches and augmentation", |c| c.seed.to_string(), |c, v| c.seed = num(v)?),
        key!("train.channels", "feature channels K", |c| c.channels.to_string(), |c, v| c.channels = num(v)?),
        key!("train.use_varm", "refine pseudo-labels", |c| c.use_varm.to_string(), |c, v| c.use_varm = flag(v)?),
        key!("train.use_scd", "correspondence distillation loss", |c| c.use_scd.to_string(), |c, v| c.use_scd = flag(v)?),
        key!("train.use_aux", "attention affinity loss", |c| c.use_aux.to_string(), |c, v| c.use_aux = flag(v)?),
        key!("train.use_equ", "equivariance loss", |c| c.use_equ.to_string(), |c, v| c.use_equ = flag(v)?),
        key!("loss.lambda1", "weight of scd, seg, equ, aux", |c| c.weights.lambda1.to_string(), |c, v| c.weights.lambda1 = num(v)?),
        key!("loss.lambda2", "weight of reg", |c| c.weights.lambda2.to_string(), |c, v| c.weights.lambda2 = num(v)?),
        key!("loss.lambda3", "weight of cls", |c| c.weights.lambda3.to_string(), |c, v| c.weights.lambda3 = num(v)?),
        key!("varm.alpha", "colour affinity sharpness", |c| c.varm.alpha.to_string(), |c, v| c.varm.alpha = num(v)?),
        key!("varm.beta", "variation correction weight", |c| c.varm.beta.to_string(), |c, v| c.varm.beta = num(v)?),
        key!("varm.dilations", "comma-separated dilation rates", |c| join(&c.varm.dilations), |c, v| c.varm.dilations = parse_list(v)?),
        key!("varm.iterations", "refinement passes", |c| c.varm.iterations.to_string(), |c, v| c.varm.iterations = num(v)?),
        key!("scd.n", "sampled positions per view", |c| c.scd_samples.to_string(), |c, v| c.scd_samples = num(v)?),
        key!("cam.high_threshold", "foreground threshold", |c| c.high_threshold.to_string(), |c, v| c.high_threshold = num(v)?),
        key!("cam.low_threshold", "background threshold", |c| c.low_threshold.to_string(), |c, v| c.low_threshold = num(v)?),
    ]
}

pub fn gen_keys() -> Vec<Key<SyntheticSpec>> {
    vec![
        key!("gen.n", "number of images", |s| s.num_images.to_string(), |s, v| s.num_images = num(v)?),
        key!("gen.height", "image height", |s| s.height.to_string(), |s, v| s.height = num(v)?),
        key!("gen.width", "image width", |s| s.width.to_string(), |s, v| s.width = num(v)?),
        key!("gen.classes", "number of shape classes (1-3)", |s| s.num_classes.to_string(), |s, v| s.num_classes = num(v)?),
        key!("gen.min_shapes", "fewest shapes per image", |s| s.min_shapes.to_string(), |s, v| s.min_shapes = num(v)?),
        key!("gen.max_shapes", "most shapes per image", |s| s.max_shapes.to_string(), |s, v| s.max_shapes = num(v)?),
        key!("gen.color_jitter", "per-shape colour jitter", |s| s.color_jitter.to_string(), |s, v| s.color_jitter = num(v)?),
        key!("gen.texture", "background texture amplitude", |s| s.texture.to_string(), |s, v| s.texture = num(v)?),
        key!("gen.seed", "dataset seed", |s| s.seed.to_string(), |s, v| s.seed = num(v)?),
    ]
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn set<T>(keys: &[Key<T>], target: &mut T, key: &str, value: &str) -> Result<(), String> {
    let k = keys.iter().find(|k| k.name == key).ok_or_else(|| format!("unknown config key {key:?}"))?;
    (k.set)(target, value).map_err(|e| format!("{key}: {e}"))
}

/// Splits `key = value` or `key=value`.
pub fn split_pair(s: &str) -> Result<(&str, &str), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim(), v.trim()))
}

pub fn apply_text<T>(keys: &[Key<T>], target: &mut T, text: &str) -> Result<(), String> {
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = split_pair(line).map_err(|e| format!("line {}: {e}", n + 1))?;
        set(keys, target, k, v).map_err(|e| format!("line {}: {e}", n + 1))?;
    }
    Ok(())
}

pub fn describe<T>(keys: &[Key<T>], target: &T) -> String {
    let mut s = String::new();
    for k in keys {
        s.push_str(&format!("{} = {}    # {}\n", k.name, (k.get)(target), k.doc));
    }
    s
}
