//! U-Net and FPN segmentation models assembled from tape ops.
//!
//! A model is a flat map of named tensors plus the config that produced it.
//! The architecture is not stored as a graph. [`Model::forward`] replays it
//! from the config, looking each tensor up by name, so a built model, a
//! weight file and a forward pass can never drift apart.
//!
//! Naming scheme (`s` = stage, `b` = block within a stage):
//!
//! | tensor | name |
//! |--------|------|
//! | encoder convs | `encoder.s{s}.b{b}.conv1`, `.conv2`, residual projection `.proj` |
//! | U-Net decoder | `decoder.up{s}.conv1`, `.conv2` |
//! | FPN decoder | `decoder.lateral{s}`, `decoder.smooth{s}`, `decoder.fuse` |
//! | output | `head` |
//!
//! Each conv unit owns `{unit}.weight` and either `{unit}.bias` or, under
//! batch norm, `{unit}.bn.gamma`, `{unit}.bn.beta` and the running-statistic
//! buffers `{unit}.bn.running_mean`, `{unit}.bn.running_var`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{channel_moments, BatchNormMode, Op, Tape, Tensor, Var};

pub type ParamMap = BTreeMap<String, Tensor>;

/// Variance floor inside batch norm.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

macro_rules! named_enum {
    ($name:ident, $what:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two conv3x3 + relu.
    Plain,
    /// `relu(conv3x3(relu(conv3x3(x))) + shortcut(x))`.
    Residual,
}
named_enum!(BlockKind, "block kind", { Plain => "plain", Residual => "residual" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    UNet,
    Fpn,
}
named_enum!(DecoderKind, "decoder kind", { UNet => "unet", Fpn => "fpn" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Norm {
    #[default]
    None,
    BatchNorm,
}
named_enum!(Norm, "norm", { None => "none", BatchNorm => "batchnorm" });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub block_kind: BlockKind,
    /// Output channels per stage. Stage `s` runs at `1 / 2^s` resolution.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderKind,
    /// Pyramid channels, used by the FPN decoder only.
    pub fpn_width: usize,
    pub norm: Norm,
    /// `[channels, height, width]` of one input image.
    pub input_size: [usize; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                block_kind: BlockKind::Residual,
                stage_widths: vec![16, 32, 64],
                blocks_per_stage: 1,
            },
            decoder: DecoderKind::UNet,
            fpn_width: 32,
            norm: Norm::None,
            input_size: [3, 128, 128],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.encoder.stage_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let enc = &self.encoder;
        if enc.stage_widths.len() < 2 {
            return Err(Error::Config(format!("encoder needs at least 2 stages, got {}", enc.stage_widths.len())));
        }
        if enc.stage_widths.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if enc.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        let [c, h, w] = self.input_size;
        if c != 3 {
            return Err(Error::Config(format!("input must have 3 channels, got {c}")));
        }
        let unit = 1usize << (self.stages() - 1);
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} must be a positive multiple of {unit} for {} stages",
                self.stages()
            )));
        }
        if self.decoder == DecoderKind::Fpn && self.fpn_width == 0 {
            return Err(Error::Config("fpn_width must be positive for the FPN decoder".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    buffer: bool,
}

/// Every tensor of a config, in initialization order.
fn layout(cfg: &ModelConfig) -> Vec<Spec> {
    let mut out = Vec::new();
    let mut unit = |name: &str, cin: usize, cout: usize, k: usize, normed: bool| {
        let spec = |suffix: &str, shape: Vec<usize>, init, buffer| Spec { name: format!("{name}.{suffix}"), shape, init, buffer };
        out.push(spec("weight", vec![cout, cin, k, k], Init::He { fan_in: cin * k * k }, false));
        if normed && cfg.norm == Norm::BatchNorm {
            out.push(spec("bn.gamma", vec![cout], Init::Ones, false));
            out.push(spec("bn.beta", vec![cout], Init::Zeros, false));
            out.push(spec("bn.running_mean", vec![cout], Init::Zeros, true));
            out.push(spec("bn.running_var", vec![cout], Init::Ones, true));
        } else {
            out.push(spec("bias", vec![cout], Init::Zeros, false));
        }
    };

    let widths = &cfg.encoder.stage_widths;
    for (s, &width) in widths.iter().enumerate() {
        for b in 0..cfg.encoder.blocks_per_stage {
            let cin = match (s, b) {
                (0, 0) => cfg.input_size[0],
                (_, 0) => widths[s - 1],
                _ => width,
            };
            let p = format!("encoder.s{s}.b{b}");
            unit(&format!("{p}.conv1"), cin, width, 3, true);
            unit(&format!("{p}.conv2"), width, width, 3, true);
            if cfg.encoder.block_kind == BlockKind::Residual && cin != width {
                unit(&format!("{p}.proj"), cin, width, 1, true);
            }
        }
    }

    let head_in = match cfg.decoder {
        DecoderKind::UNet => {
            for s in (0..widths.len() - 1).rev() {
                unit(&format!("decoder.up{s}.conv1"), widths[s + 1] + widths[s], widths[s], 3, true);
                unit(&format!("decoder.up{s}.conv2"), widths[s], widths[s], 3, true);
            }
            widths[0]
        }
        DecoderKind::Fpn => {
            let f = cfg.fpn_width;
            for (s, &w) in widths.iter().enumerate() {
                unit(&format!("decoder.lateral{s}"), w, f, 1, false);
            }
            for s in 0..widths.len() {
                unit(&format!("decoder.smooth{s}"), f, f, 3, true);
            }
            unit("decoder.fuse", widths.len() * f, f, 3, true);
            f
        }
    };
    unit("head", head_in, 1, 1, false);
    out
}

/// Running-statistic update produced by a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    /// Conv unit the statistics belong to.
    pub unit: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics and reports running-stat updates.
    Train,
    /// Batch norm uses the stored running statistics.
    Eval,
}

/// Tape handles for every trainable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    /// Substitutes the handle used for `name`, returning the old one. Lets a
    /// caller differentiate with respect to a tensor it placed on the tape.
    pub fn replace(&mut self, name: &str, var: Var) -> Option<Var> {
        self.vars.get_mut(name).map(|slot| std::mem::replace(slot, var))
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

pub struct Forward {
    pub logits: Var,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamMap,
    buffers: ParamMap,
}

impl Model {
    /// Builds and initializes a model. Conv weights are drawn from a
    /// ChaCha8 stream seeded with `config.seed`, in layout order.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (mut params, mut buffers) = (ParamMap::new(), ParamMap::new());
        for spec in layout(&config) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::He { fan_in } => {
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            let t = Tensor::new(spec.shape, data)?;
            let map = if spec.buffer { &mut buffers } else { &mut params };
            map.insert(spec.name, t);
        }
        Ok(Model { config, params, buffers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable tensors.
    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> &ParamMap {
        &self.buffers
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Every named tensor, parameters and buffers, sorted by name.
    pub fn tensors(&self) -> Vec<(&str, &Tensor)> {
        let mut all: Vec<_> = self.params.iter().chain(&self.buffers).map(|(k, v)| (k.as_str(), v)).collect();
        all.sort_by(|a, b| a.0.cmp(b.0));
        all
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match self.params.get_mut(name) {
            Some(t) => Some(t),
            None => self.buffers.get_mut(name),
        }
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable))).collect();
        Bound { vars }
    }

    /// Runs the network on `x` (`B x 3 x H x W`), returning `B x 1 x H x W` logits.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode) -> Result<Forward> {
        let shape = tape.value(x).shape();
        let [c, h, w] = self.config.input_size;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape("forward", format!("input {shape:?} does not match model input {c}x{h}x{w}")));
        }
        let mut ctx = Ctx { model: self, tape, bound, mode, updates: Vec::new() };
        let logits = ctx.network(x)?;
        Ok(Forward { logits, bn_updates: ctx.updates })
    }

    /// Eval-mode logits without recording gradients.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &bound, x, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Blends batch statistics into the running buffers with [`BN_MOMENTUM`].
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                if let Some(t) = self.buffers.get_mut(&format!("{}.bn.{suffix}", u.unit)) {
                    for (r, b) in t.data_mut().iter_mut().zip(batch) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                    }
                }
            }
        }
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.tensors())
    }

    /// Replaces every tensor from a weight file whose names and shapes match
    /// this model exactly. Records under `optim.` (optimizer state in
    /// checkpoints) are skipped.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let records = load_tensors(path)?;
        let records: BTreeMap<String, Tensor> = records.into_iter().filter(|(k, _)| !k.starts_with("optim.")).collect();
        for name in records.keys() {
            if !self.params.contains_key(name) && !self.buffers.contains_key(name) {
                return Err(Error::Parameter { name: name.clone(), msg: "not present in model".into() });
            }
        }
        for (name, _) in self.tensors() {
            if !records.contains_key(name) {
                return Err(Error::Parameter { name: name.into(), msg: "missing from weight file".into() });
            }
        }
        self.replace_checked(records)
    }

    /// Loads only the tensors whose names start with `prefix`, e.g.
    /// `"encoder."` to initialize an encoder from another model's weights.
    /// Every model tensor under the prefix must be present. Returns the
    /// number of tensors replaced.
    pub fn load_weights_prefix(&mut self, path: &Path, prefix: &str) -> Result<usize> {
        let records: BTreeMap<String, Tensor> =
            load_tensors(path)?.into_iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        for (name, _) in self.tensors() {
            if name.starts_with(prefix) && !records.contains_key(name) {
                return Err(Error::Parameter { name: name.into(), msg: "missing from weight file".into() });
            }
        }
        let n = records.len();
        self.replace_checked(records)?;
        Ok(n)
    }

    /// All shapes are checked before anything is written.
    fn replace_checked(&mut self, records: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in &records {
            let current = self.params.get(name).or_else(|| self.buffers.get(name));
            match current {
                None => return Err(Error::Parameter { name: name.clone(), msg: "not present in model".into() }),
                Some(c) if c.shape() != t.shape() => {
                    return Err(Error::Parameter {
                        name: name.clone(),
                        msg: format!("shape {:?} in file, {:?} in model", t.shape(), c.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        for (name, t) in records {
            *self.tensor_mut(&name).expect("checked above") = t;
        }
        Ok(())
    }
}

/// Weights of one convolution for [`residual_block`].
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl ConvVars {
    fn inputs(&self, x: Var) -> Vec<Var> {
        let mut v = vec![x, self.weight];
        v.extend(self.bias);
        v
    }
}

/// `relu(conv2(relu(conv1(x))) + shortcut(x))` with 3x3 same-padding convs.
/// The shortcut is `proj` (a 1x1 conv) when given, otherwise identity.
pub fn residual_block(tape: &mut Tape, x: Var, conv1: ConvVars, conv2: ConvVars, proj: Option<ConvVars>) -> Result<Var> {
    let f = tape.apply(Op::CONV3X3, &conv1.inputs(x))?;
    let f = tape.apply(Op::Relu, &[f])?;
    let f = tape.apply(Op::CONV3X3, &conv2.inputs(f))?;
    let shortcut = match proj {
        Some(p) => tape.apply(Op::CONV1X1, &p.inputs(x))?,
        None => x,
    };
    let sum = tape.apply(Op::Add, &[f, shortcut])?;
    tape.apply(Op::Relu, &[sum])
}

struct Ctx<'a> {
    model: &'a Model,
    tape: &'a mut Tape,
    bound: &'a Bound,
    mode: Mode,
    updates: Vec<BnUpdate>,
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.bound.get(name).ok_or_else(|| Error::Parameter { name: name.into(), msg: "not bound on the tape".into() })
    }

    fn op(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        self.tape.apply(op, inputs)
    }

    /// Conv, then batch norm when the unit has one, then optional relu.
    fn unit(&mut self, name: &str, x: Var, act: bool) -> Result<Var> {
        let weight = self.var(&format!("{name}.weight"))?;
        let k = self.tape.value(weight).shape()[2];
        let op = Op::Conv2d { stride: 1, pad: k / 2 };
        let y = match self.bound.get(&format!("{name}.bias")) {
            Some(bias) => self.op(op, &[x, weight, bias])?,
            None => {
                let y = self.op(op, &[x, weight])?;
                self.batchnorm(name, y)?
            }
        };
        if act {
            self.op(Op::Relu, &[y])
        } else {
            Ok(y)
        }
    }

    fn batchnorm(&mut self, name: &str, y: Var) -> Result<Var> {
        let gamma = self.var(&format!("{name}.bn.gamma"))?;
        let beta = self.var(&format!("{name}.bn.beta"))?;
        let mode = match self.mode {
            Mode::Train => {
                let (mean, var) = channel_moments(self.tape.value(y));
                self.updates.push(BnUpdate { unit: name.into(), mean, var });
                BatchNormMode::Train
            }
            Mode::Eval => {
                let buf = |s: &str| {
                    let key = format!("{name}.bn.{s}");
                    self.model.buffers.get(&key).map(|t| t.data().to_vec()).ok_or(Error::Parameter {
                        name: key,
                        msg: "missing running statistic".into(),
                    })
                };
                BatchNormMode::Eval { mean: buf("running_mean")?, var: buf("running_var")? }
            }
        };
        self.op(Op::BatchNorm { eps: BN_EPS, mode }, &[y, gamma, beta])
    }

    fn block(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let cfg = &self.model.config.encoder;
        match cfg.block_kind {
            BlockKind::Plain => {
                let y = self.unit(&format!("{prefix}.conv1"), x, true)?;
                self.unit(&format!("{prefix}.conv2"), y, true)
            }
            BlockKind::Residual => {
                let f = self.unit(&format!("{prefix}.conv1"), x, true)?;
                let f = self.unit(&format!("{prefix}.conv2"), f, false)?;
                let proj = format!("{prefix}.proj");
                let shortcut = if self.bound.get(&format!("{proj}.weight")).is_some() { self.unit(&proj, x, false)? } else { x };
                let sum = self.op(Op::Add, &[f, shortcut])?;
                self.op(Op::Relu, &[sum])
            }
        }
    }

    fn network(&mut self, input: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let stages = cfg.stages();
        let mut feats = Vec::with_capacity(stages);
        let mut x = input;
        for s in 0..stages {
            if s > 0 {
                x = self.op(Op::MaxPool2x2, &[x])?;
            }
            for b in 0..cfg.encoder.blocks_per_stage {
                x = self.block(&format!("encoder.s{s}.b{b}"), x)?;
            }
            feats.push(x);
        }

        let top = match cfg.decoder {
            DecoderKind::UNet => {
                let mut y = feats[stages - 1];
                for s in (0..stages - 1).rev() {
                    let up = self.op(Op::UpsampleBilinear2x, &[y])?;
                    let cat = self.op(Op::ConcatChannels, &[up, feats[s]])?;
                    let z = self.unit(&format!("decoder.up{s}.conv1"), cat, true)?;
                    y = self.unit(&format!("decoder.up{s}.conv2"), z, true)?;
                }
                y
            }
            DecoderKind::Fpn => {
                let mut pyramid = vec![feats[0]; stages];
                for s in (0..stages).rev() {
                    let lateral = self.unit(&format!("decoder.lateral{s}"), feats[s], false)?;
                    pyramid[s] = if s + 1 < stages {
                        let up = self.op(Op::UpsampleBilinear2x, &[pyramid[s + 1]])?;
                        self.op(Op::Add, &[lateral, up])?
                    } else {
                        lateral
                    };
                }
                let mut heads = Vec::with_capacity(stages);
                for (s, &p) in pyramid.iter().enumerate() {
                    let mut y = self.unit(&format!("decoder.smooth{s}"), p, true)?;
                    for _ in 0..s {
                        y = self.op(Op::UpsampleBilinear2x, &[y])?;
                    }
                    heads.push(y);
                }
                let cat = self.op(Op::ConcatChannels, &heads)?;
                self.unit("decoder.fuse", cat, true)?
            }
        };
        self.unit("head", top, false)
    }
}

const MAGIC: &[u8; 8] = b"VSEGWTS\n";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const CHECKSUM_LEN: usize = 32;

/// Serializes named tensors:
///
/// ```text
/// magic "VSEGWTS\n" | u32 version | u32 count
/// count x ( u32 name_len | name | u8 dtype (1 = f64) | u32 rank | rank x u64 dim | f64 data )
/// 32-byte SHA-256 of everything above
/// ```
///
/// Integers and floats are little-endian.
pub fn encode_tensors(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated record")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Inverse of [`encode_tensors`]; verifies magic, version and checksum.
pub fn decode_tensors(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    if bytes.len() < MAGIC.len() + 8 + CHECKSUM_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err("not a weight file (bad magic)".into());
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != sum {
        return Err("checksum mismatch".into());
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "name is not UTF-8")?.to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(format!("{name}: unsupported dtype tag {dtype}"));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dimension overflow")?;
        let raw = r.take(numel.checked_mul(8).ok_or("dimension overflow")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err("trailing bytes after last record".into());
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    fs::write(path, encode_tensors(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes).map_err(|msg| Error::WeightFile { path: path.into(), msg })
}
