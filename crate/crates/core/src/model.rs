//! Small shared-weight encoder/decoder.
//!
//! Four 3×3 conv stages (two with stride 2) bring an `[H, W, 3]` image to
//! `[H/4, W/4, K]` features. Two single-head residual self-attention blocks
//! follow. Class logits are the global average of the pre-attention
//! features through `cls.w`, and CAMs apply the same weights per position.
//! The attention blocks feed the segmentation head and the affinity loss.
//! The segmentation head is a per-token linear map over both feature maps,
//! upsampled bilinearly to the input size.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Conv2dParams, Tape, Var};
use crate::cam;
use crate::error::{Error, Result};
use crate::resample;
use crate::tensor::Tensor;

pub const DEFAULT_CHANNELS: usize = 32;
pub const DEFAULT_STEM: [usize; 2] = [16, 32];
pub const DOWNSAMPLE: usize = 4;

const MAGIC: &[u8; 8] = b"SCDCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub stem: [usize; 2],
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, channels: DEFAULT_CHANNELS, stem: DEFAULT_STEM }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes >= cam::IGNORE as usize - 1 {
            return Err(Error::Config(format!("num_classes must be in 1..254, got {}", self.num_classes)));
        }
        if self.channels == 0 || self.stem.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (c, k, [s1, s2]) = (self.num_classes, self.channels, self.stem);
        let mut v = Vec::new();
        for (name, ci, co) in [("conv1", 3, s1), ("conv2", s1, s2), ("conv3", s2, k), ("conv4", k, k)] {
            v.push((format!("{name}.w"), vec![3, 3, ci, co]));
            v.push((format!("{name}.b"), vec![co]));
        }
        for blk in ["attn1", "attn2"] {
            for m in ["q", "k", "v", "o"] {
                v.push((format!("{blk}.{m}"), vec![k, k]));
            }
        }
        v.push(("cls.w".into(), vec![c, k]));
        v.push(("seg.w".into(), vec![2 * k, c + 1]));
        v.push(("seg.b".into(), vec![c + 1]));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

/// Parameter handles on one tape, shared by every view in a step.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn get(&self, model: &Model, name: &str) -> Var {
        let i = model.names.iter().position(|n| n == name).expect("known parameter");
        self.vars[i]
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[h, w, K]` pre-attention features.
    pub features: Var,
    /// `[h, w, K]` post-attention features.
    pub fused: Var,
    /// `[h·w, h·w]` attention logits of the two blocks.
    pub attn_logits: [Var; 2],
    /// Row-softmaxed attention of the two blocks.
    pub attn: [Var; 2],
    /// `[C]` class logits.
    pub logits: Var,
    /// `[h, w, C]` raw CAM, from the same features as `logits`.
    pub cam: Var,
    /// `[h, w, C+1]` segmentation logits at feature resolution.
    pub seg_low: Var,
    /// `[H, W, C+1]` segmentation logits at input resolution.
    pub seg: Var,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let fan_in: usize = match name.as_str() {
                    "cls.w" => shape[1],
                    _ => shape[..shape.len() - 1].iter().product(),
                };
                let gain = if name.starts_with("conv") { 6.0 } else { 3.0 };
                let bound = (gain / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Self { config, names, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// Zeroes the classification and segmentation heads.
    pub fn zero_heads(&mut self) {
        for name in ["cls.w", "seg.w", "seg.b"] {
            if let Some(t) = self.param_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.param(p.clone())).collect() }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, img: Var) -> Result<ForwardOutput> {
        let (h, w, c) = tape.value(img).hwc()?;
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image {h}x{w} is not divisible by {DOWNSAMPLE}")));
        }
        let k = self.config.channels;
        let p = |name: &str| bound.get(self, name);

        let mut x = img;
        for (name, stride) in [("conv1", 2), ("conv2", 2), ("conv3", 1), ("conv4", 1)] {
            x = tape.conv2d(
                x,
                p(&format!("{name}.w")),
                Some(p(&format!("{name}.b"))),
                Conv2dParams { stride, padding: 1 },
            )?;
            x = tape.relu(x)?;
        }
        let features = x;
        let (fh, fw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
        let n = fh * fw;

        let mut tokens = tape.reshape(features, &[n, k])?;
        let mut attn_logits = Vec::with_capacity(2);
        let mut attn = Vec::with_capacity(2);
        let inv_sqrt_k = 1.0 / (k as f64).sqrt();
        for blk in ["attn1", "attn2"] {
            let q = tape.matmul(tokens, p(&format!("{blk}.q")))?;
            let kk = tape.matmul(tokens, p(&format!("{blk}.k")))?;
            let v = tape.matmul(tokens, p(&format!("{blk}.v")))?;
            let kt = tape.transpose(kk)?;
            let qk = tape.matmul(q, kt)?;
            let logits = tape.scale(qk, inv_sqrt_k)?;
            let a = tape.softmax(logits)?;
            let mixed = tape.matmul(a, v)?;
            let out = tape.matmul(mixed, p(&format!("{blk}.o")))?;
            tokens = tape.add(tokens, out)?;
            attn_logits.push(logits);
            attn.push(a);
        }
        let fused = tape.reshape(tokens, &[fh, fw, k])?;

        let logits = cam::class_scores_var(tape, features, p("cls.w"))?;
        let cam = cam::cam_var(tape, features, p("cls.w"))?;

        let both = tape.concat_last(features, fused)?;
        let both = tape.reshape(both, &[n, 2 * k])?;
        let s = tape.matmul(both, p("seg.w"))?;
        let s = tape.add(s, p("seg.b"))?;
        let seg_low = tape.reshape(s, &[fh, fw, self.config.num_classes + 1])?;
        let seg = resample::bilinear_resize(tape, seg_low, h, w)?;

        Ok(ForwardOutput {
            features,
            fused,
            attn_logits: [attn_logits[0], attn_logits[1]],
            attn: [attn[0], attn[1]],
            logits,
            cam,
            seg_low,
            seg,
        })
    }

    /// Forward pass on a fresh tape, returning plain tensors.
    pub fn predict(&self, img: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(img.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(Prediction {
            logits: tape.value(out.logits).clone(),
            cam: tape.value(out.cam).clone(),
            seg: tape.value(out.seg).clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        for v in [VERSION, self.config.num_classes as u32, self.config.channels as u32] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.config.stem {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.params) {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in &self.params {
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let num_classes = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let stem = [r.u32()? as usize, r.u32()? as usize];
        let config = ModelConfig { num_classes, channels, stem };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u32()? as usize;
        let expected = config.layout();
        if count != expected.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", expected.len())));
        }
        let mut names = Vec::with_capacity(count);
        let mut shapes = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &name != want_name || &shape != want_shape {
                return Err(Error::Format(format!(
                    "tensor {name} {shape:?} does not match expected {want_name} {want_shape:?}"
                )));
            }
            names.push(name);
            shapes.push(shape);
        }
        let mut params = Vec::with_capacity(count);
        for shape in shapes {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self { config, names, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub cam: Tensor,
    pub seg: Tensor,
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        match end {
            Some(e) => {
                let s = &self.b[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format("truncated checkpoint".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
