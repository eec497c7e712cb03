//! The siamese segmentation tracker and the mask-label generator.
//!
//! A shared convolutional backbone embeds template and search patches; a
//! per-channel correlation of the two feature blocks feeds three small
//! fully-convolutional heads (classification, box regression, mask). The
//! generator is a per-pixel two-layer perceptron that turns a box prior into
//! a soft mask label.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use metatrack_autodiff::{AxisRange, Tape, Tensor, Var};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::PatchGeometry;
use crate::rng::Seed;

pub const HEADS: [Head; 3] = [Head::Cls, Head::Box, Head::Mask];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Cls,
    Box,
    Mask,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Cls => "cls",
            Head::Box => "box",
            Head::Mask => "mask",
        }
    }
}

/// Parameter groups, identified by name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Head(Head),
    Generator,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        let prefix = name.split('.').next()?;
        Some(match prefix {
            "backbone" => ParamGroup::Backbone,
            "cls" => ParamGroup::Head(Head::Cls),
            "box" => ParamGroup::Head(Head::Box),
            "mask" => ParamGroup::Head(Head::Mask),
            "gen" => ParamGroup::Generator,
            _ => return None,
        })
    }
}

/// Whether a parameter takes part in inner-loop adaptation. The heads'
/// normalization affines stay fixed, like batch norm in evaluation mode.
pub fn is_adaptable(name: &str) -> bool {
    matches!(ParamGroup::of(name), Some(ParamGroup::Head(_))) && !name.contains(".norm.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub template_size: usize,
    pub search_size: usize,
    /// Output channels of each backbone layer; the last is the feature depth.
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub head_hidden: usize,
    /// Anchor extents in search-patch pixels.
    pub anchors: Vec<(f64, f64)>,
    /// Side `n` of the square mask predicted per location.
    pub mask_size: usize,
    pub generator_hidden: usize,
    /// Feed normalized offsets from the box center to the generator in
    /// addition to the Gaussian prior.
    pub generator_offsets: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            template_size: 32,
            search_size: 64,
            backbone_channels: vec![8, 16, 16, 16],
            backbone_strides: vec![2, 1, 2, 1],
            head_hidden: 16,
            anchors: vec![(16.0, 16.0)],
            mask_size: 16,
            generator_hidden: 16,
            generator_offsets: true,
        }
    }
}

impl NetConfig {
    /// A model small enough for exhaustive finite-difference checks: every
    /// layer has at most 8 units and the mask grid is 4×4.
    pub fn tiny() -> Self {
        NetConfig {
            template_size: 8,
            search_size: 16,
            backbone_channels: vec![4, 4, 4, 4],
            backbone_strides: vec![2, 1, 1, 1],
            head_hidden: 4,
            anchors: vec![(4.0, 4.0)],
            mask_size: 4,
            generator_hidden: 4,
            generator_offsets: true,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated config has layers")
    }

    pub fn template_features(&self) -> usize {
        self.template_size / self.total_stride()
    }

    pub fn search_features(&self) -> usize {
        self.search_size / self.total_stride()
    }

    /// Side of the correlation map and of every head output.
    pub fn score_size(&self) -> usize {
        self.search_features() - self.template_features() + 1
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn generator_inputs(&self) -> usize {
        if self.generator_offsets {
            3
        } else {
            1
        }
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            template_size: self.template_size,
            search_size: self.search_size,
            stride: self.total_stride(),
            score_size: self.score_size(),
            mask_size: self.mask_size,
            anchors: self.anchors.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return fail("backbone_channels and backbone_strides must be non-empty and equally long".into());
        }
        if self.backbone_channels.contains(&0) || self.backbone_strides.contains(&0) {
            return fail("backbone channels and strides must be positive".into());
        }
        let stride = self.total_stride();
        if !self.template_size.is_multiple_of(stride) || !self.search_size.is_multiple_of(stride) {
            return fail(format!("patch sizes must be divisible by the total stride {stride}"));
        }
        if self.template_size >= self.search_size {
            return fail("template must be smaller than the search patch".into());
        }
        if self.mask_size == 0 || !self.template_size.is_multiple_of(self.mask_size) {
            return fail("mask_size must divide template_size".into());
        }
        if self.anchors.is_empty() || self.anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return fail("at least one anchor with positive extent is required".into());
        }
        if self.head_hidden == 0 || self.generator_hidden == 0 {
            return fail("hidden widths must be positive".into());
        }
        Ok(())
    }

    /// Expected shape of every parameter, by name.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        let mut in_ch = 1;
        let last = self.backbone_channels.len() - 1;
        for (i, &out_ch) in self.backbone_channels.iter().enumerate() {
            shapes.insert(format!("backbone.{i}.weight"), vec![out_ch, in_ch, 3, 3]);
            shapes.insert(format!("backbone.{i}.bias"), vec![out_ch]);
            if i < last {
                shapes.insert(format!("backbone.{i}.norm.scale"), vec![out_ch]);
                shapes.insert(format!("backbone.{i}.norm.shift"), vec![out_ch]);
            }
            in_ch = out_ch;
        }
        let c = self.feature_channels();
        let hidden = self.head_hidden;
        for head in HEADS {
            let p = head.prefix();
            shapes.insert(format!("{p}.0.weight"), vec![hidden, c, 3, 3]);
            shapes.insert(format!("{p}.0.bias"), vec![hidden]);
            shapes.insert(format!("{p}.norm.scale"), vec![hidden]);
            shapes.insert(format!("{p}.norm.shift"), vec![hidden]);
            let out = self.head_outputs(head);
            shapes.insert(format!("{p}.1.weight"), vec![out, hidden, 1, 1]);
            shapes.insert(format!("{p}.1.bias"), vec![out]);
        }
        shapes.insert("gen.0.weight".into(), vec![self.generator_inputs(), self.generator_hidden]);
        shapes.insert("gen.0.bias".into(), vec![self.generator_hidden]);
        shapes.insert("gen.1.weight".into(), vec![self.generator_hidden, 1]);
        shapes.insert("gen.1.bias".into(), vec![1]);
        shapes
    }

    pub fn head_outputs(&self, head: Head) -> usize {
        match head {
            Head::Cls => self.num_anchors(),
            Head::Box => 4 * self.num_anchors(),
            Head::Mask => self.mask_size * self.mask_size,
        }
    }
}

fn normal(rng: &mut crate::rng::Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream simple to reason about.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// All parameters of the model, keyed by name in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: NetConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Random initialization: He-normal convolutions, zero biases, identity
    /// normalization affines, and small output layers.
    pub fn init(config: NetConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let mut rng = seed.child(&name).rng();
            let fan_in: usize = if name.starts_with("gen.") { shape[0] } else { shape[1..].iter().product() };
            let std = if name.starts_with("gen.1.") {
                0.5 / (fan_in as f64).sqrt()
            } else if name.starts_with("gen.") {
                1.0 / (fan_in as f64).sqrt()
            } else if name.ends_with(".1.weight") && ParamGroup::of(&name) != Some(ParamGroup::Backbone) {
                0.1 / (fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let t = if name.ends_with(".scale") {
                Tensor::ones(&shape)
            } else if name.ends_with(".weight") {
                Tensor::from_fn(&shape, |_| std * normal(&mut rng))
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn from_tensors(config: NetConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<String> {
        self.tensors.keys().filter(|n| ParamGroup::of(n) == Some(group)).cloned().collect()
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(t) if t.shape() == value.shape() => {
                *t = value;
                Ok(())
            }
            Some(t) => Err(Error::InvalidInput(format!(
                "cannot assign shape {:?} to {name} of shape {:?}",
                value.shape(),
                t.shape()
            ))),
            None => Err(Error::InvalidInput(format!("unknown parameter {name}"))),
        }
    }

    /// Places every parameter on the tape: as a differentiable leaf when
    /// `trainable(name)` holds, as a constant otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Order-sensitive digest of the bit patterns of a parameter subset.
    pub fn checksum(&self, include: impl Fn(&str) -> bool) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        for (name, t) in self.tensors.iter().filter(|(n, _)| include(n)) {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
            }
            for v in t.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }

    /// Copy with the given head weights substituted.
    pub fn with_heads(&self, heads: &HeadWeights) -> Result<ModelParams> {
        let mut out = self.clone();
        for (name, t) in &heads.tensors {
            out.set(name, t.clone())?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(&self.tensors)?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint; `config` supplies the geometry that is not stored
    /// in the weights and must agree with every stored shape.
    pub fn load(path: &Path, config: NetConfig) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = decode_checkpoint(&bytes)?;
        Self::from_tensors(config, tensors)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
const CHECKPOINT_VERSION: u8 = 1;

/// Checkpoint layout: magic `MTCK`, version byte, then per parameter in
/// name order: u16 name length, UTF-8 name, u8 rank, u32 dims, f64 payload.
/// All integers and floats are little-endian.
pub fn encode_checkpoint(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidInput(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidInput(format!("rank too large: {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidInput(format!("dimension too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                what: self.what,
                offset: self.pos,
                reason: format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0, what: "checkpoint" };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format { what: "checkpoint", offset: 0, reason: "bad magic".into() });
    }
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { what: "checkpoint", offset: 4, reason: format!("unsupported version {version}") });
    }
    let mut tensors = BTreeMap::new();
    while r.pos < bytes.len() {
        let at = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format { what: "checkpoint", offset: at + 2, reason: "name is not UTF-8".into() })?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Format { what: "checkpoint", offset: at, reason: e.to_string() })?;
        tensors.insert(name, t);
    }
    Ok(tensors)
}

/// Parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::InvalidInput(format!("unbound parameter {name}")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Variables of the named parameters, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Vec<Var>> {
        names.iter().map(|n| self.var(n)).collect()
    }

    /// Copy with some parameters replaced, e.g. head weights by fast weights.
    pub fn overridden(&self, fast: &FastWeights) -> Bound {
        self.replaced(fast.vars.iter().map(|(n, &v)| (n.clone(), v)))
    }

    pub fn replaced(&self, pairs: impl IntoIterator<Item = (String, Var)>) -> Bound {
        let mut vars = self.vars.clone();
        vars.extend(pairs);
        Bound { vars }
    }

    /// Copy in which every parameter selected by `frozen` is a constant
    /// holding its current value.
    pub fn frozen(&self, tape: &mut Tape, frozen: impl Fn(&str) -> bool) -> Bound {
        let pairs: Vec<(String, Var)> = self
            .vars
            .iter()
            .filter(|(n, _)| frozen(n))
            .map(|(n, &v)| (n.clone(), tape.detach(v)))
            .collect();
        self.replaced(pairs)
    }
}

/// Task-adapted head weights on a tape.
#[derive(Debug, Clone)]
pub struct FastWeights {
    pub vars: BTreeMap<String, Var>,
    /// Whether the weights remain differentiable functions of the slow
    /// weights they were adapted from.
    pub graph_attached: bool,
}

impl FastWeights {
    pub fn detach(&self, tape: &Tape) -> HeadWeights {
        HeadWeights {
            tensors: self.vars.iter().map(|(n, &v)| (n.clone(), tape.value(v).clone())).collect(),
        }
    }
}

/// Head weights detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub tensors: BTreeMap<String, Tensor>,
}

impl HeadWeights {
    /// The model's current adaptable head weights.
    pub fn slow(model: &ModelParams) -> Self {
        HeadWeights {
            tensors: model
                .tensors
                .iter()
                .filter(|(n, _)| is_adaptable(n))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }
}

/// Stacks single-channel images of identical size into `[B, 1, H, W]`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidInput("no images to stack".into()))?;
    let (h, w) = image_dims(first)?;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if image_dims(im)? != (h, w) {
            return Err(Error::InvalidInput(format!("cannot stack {:?} with {:?}", im.shape(), first.shape())));
        }
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
}

fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        s => Err(Error::InvalidInput(format!("expected a single-channel image, got shape {s:?}"))),
    }
}

fn add_channel_bias(tape: &mut Tape, x: Var, bias: Var) -> Result<Var> {
    let c = tape.shape(bias)[0];
    let shape = tape.shape(x).to_vec();
    let b = tape.reshape(bias, &[1, c, 1, 1])?;
    let b = tape.broadcast(b, &shape)?;
    Ok(tape.add(x, b)?)
}

fn channel_affine(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let c = tape.shape(scale)[0];
    let shape = tape.shape(x).to_vec();
    let s = tape.reshape(scale, &[1, c, 1, 1])?;
    let s = tape.broadcast(s, &shape)?;
    let scaled = tape.mul(x, s)?;
    add_channel_bias(tape, scaled, shift)
}

/// Shared feature extractor: 3×3 convolutions with per-channel affine and
/// ReLU between layers; stride-2 layers subsample the stride-1 output.
pub fn backbone_forward(config: &NetConfig, tape: &mut Tape, params: &Bound, images: Var) -> Result<Var> {
    let shape = tape.shape(images).to_vec();
    let valid = shape.len() == 4
        && shape[1] == 1
        && shape[2] == shape[3]
        && (shape[2] == config.template_size || shape[2] == config.search_size);
    if !valid {
        return Err(Error::InvalidInput(format!(
            "backbone expects [B, 1, {t}, {t}] or [B, 1, {s}, {s}] images, got {shape:?}",
            t = config.template_size,
            s = config.search_size
        )));
    }
    let last = config.backbone_channels.len() - 1;
    let mut x = images;
    for (i, &stride) in config.backbone_strides.iter().enumerate() {
        let w = params.var(&format!("backbone.{i}.weight"))?;
        let b = params.var(&format!("backbone.{i}.bias"))?;
        x = tape.conv2d(x, w, (1, 1))?;
        x = add_channel_bias(tape, x, b)?;
        if stride > 1 {
            for axis in [2, 3] {
                let extent = tape.shape(x)[axis];
                let count = extent.div_ceil(stride);
                x = tape.slice(x, AxisRange { axis, start: 0, count, step: stride })?;
            }
        }
        if i < last {
            let scale = params.var(&format!("backbone.{i}.norm.scale"))?;
            let shift = params.var(&format!("backbone.{i}.norm.shift"))?;
            x = channel_affine(tape, x, scale, shift)?;
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Per-channel valid cross-correlation of template features over search
/// features.
pub fn channel_correlation(tape: &mut Tape, z_feat: Var, x_feat: Var) -> Result<Var> {
    let (zs, xs) = (tape.shape(z_feat).to_vec(), tape.shape(x_feat).to_vec());
    if zs.len() != 4 || xs.len() != 4 || zs[1] != xs[1] {
        return Err(Error::InvalidInput(format!(
            "channel mismatch between template features {zs:?} and search features {xs:?}"
        )));
    }
    if zs[2] > xs[2] || zs[3] > xs[3] {
        return Err(Error::InvalidInput(format!(
            "template features {zs:?} must be spatially smaller than search features {xs:?}"
        )));
    }
    let z = if zs[0] == xs[0] {
        z_feat
    } else if zs[0] == 1 {
        tape.broadcast(z_feat, &[xs[0], zs[1], zs[2], zs[3]])?
    } else {
        return Err(Error::InvalidInput(format!("batch mismatch {zs:?} vs {xs:?}")));
    };
    Ok(tape.depthwise_xcorr(x_feat, z, (0, 0))?)
}

/// Outputs of the three heads for a batch of correlation maps.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// `[B, A, S, S]`
    pub score: Var,
    /// `[B, 4A, S, S]`
    pub boxreg: Var,
    /// `[B, n*n, S, S]`
    pub mask_logits: Var,
}

fn head_hidden(tape: &mut Tape, params: &Bound, head: Head, r: Var) -> Result<Var> {
    let p = head.prefix();
    let w0 = params.var(&format!("{p}.0.weight"))?;
    let b0 = params.var(&format!("{p}.0.bias"))?;
    let scale = params.var(&format!("{p}.norm.scale"))?;
    let shift = params.var(&format!("{p}.norm.shift"))?;
    let x = tape.conv2d(r, w0, (1, 1))?;
    let x = add_channel_bias(tape, x, b0)?;
    let x = channel_affine(tape, x, scale, shift)?;
    Ok(tape.relu(x)?)
}

fn head_forward(tape: &mut Tape, params: &Bound, head: Head, r: Var) -> Result<Var> {
    let p = head.prefix();
    let x = head_hidden(tape, params, head, r)?;
    let w1 = params.var(&format!("{p}.1.weight"))?;
    let b1 = params.var(&format!("{p}.1.bias"))?;
    let x = tape.conv2d(x, w1, (0, 0))?;
    add_channel_bias(tape, x, b1)
}

/// Mask logits `[B, n, n]` at one score location per example. Equal to
/// selecting from the full mask head output, since the output layer acts
/// on each location separately, but without computing the other locations.
pub fn mask_at_locations(config: &NetConfig, tape: &mut Tape, params: &Bound, r: Var, locations: &[(usize, usize)]) -> Result<Var> {
    let hidden = head_hidden(tape, params, Head::Mask, r)?;
    let shape = tape.shape(hidden).to_vec();
    let (b, c, s) = (shape[0], shape[1], shape[2]);
    if locations.len() != b {
        return Err(Error::InvalidInput(format!("{} locations for a batch of {b}", locations.len())));
    }
    let mut onehot = Tensor::zeros(&[b, 1, s, s]);
    for (i, &(row, col)) in locations.iter().enumerate() {
        onehot.set(&[i, 0, row, col], 1.0);
    }
    let onehot = tape.constant(onehot);
    let onehot = tape.broadcast(onehot, &shape)?;
    let picked = tape.mul(hidden, onehot)?;
    let picked = tape.sum_axes(picked, &[2, 3])?;
    let picked = tape.reshape(picked, &[b, c])?;
    let nn = config.mask_size * config.mask_size;
    let w1 = params.var("mask.1.weight")?;
    let w1 = tape.reshape(w1, &[nn, c])?;
    let w1 = tape.permute(w1, &[1, 0])?;
    let logits = tape.matmul(picked, w1)?;
    let b1 = params.var("mask.1.bias")?;
    let b1 = tape.reshape(b1, &[1, nn])?;
    let b1 = tape.broadcast(b1, &[b, nn])?;
    let logits = tape.add(logits, b1)?;
    Ok(tape.reshape(logits, &[b, config.mask_size, config.mask_size])?)
}

/// Classification and box outputs only.
pub fn score_and_box(config: &NetConfig, tape: &mut Tape, params: &Bound, r: Var) -> Result<(Var, Var)> {
    check_correlation_shape(config, tape, r)?;
    Ok((head_forward(tape, params, Head::Cls, r)?, head_forward(tape, params, Head::Box, r)?))
}

fn check_correlation_shape(config: &NetConfig, tape: &Tape, r: Var) -> Result<()> {
    let s = tape.shape(r);
    let expected = [config.feature_channels(), config.score_size(), config.score_size()];
    if s.len() != 4 || s[1..] != expected {
        return Err(Error::InvalidInput(format!("heads expect [B, {expected:?}] correlation maps, got {s:?}")));
    }
    Ok(())
}

pub fn heads_forward(config: &NetConfig, tape: &mut Tape, params: &Bound, r: Var) -> Result<HeadOutputs> {
    check_correlation_shape(config, tape, r)?;
    Ok(HeadOutputs {
        score: head_forward(tape, params, Head::Cls, r)?,
        boxreg: head_forward(tape, params, Head::Box, r)?,
        mask_logits: head_forward(tape, params, Head::Mask, r)?,
    })
}

/// Template and search features followed by the correlation.
pub fn correlate_pairs(
    config: &NetConfig,
    tape: &mut Tape,
    params: &Bound,
    templates: Var,
    searches: Var,
) -> Result<Var> {
    let z = backbone_forward(config, tape, params, templates)?;
    let x = backbone_forward(config, tape, params, searches)?;
    channel_correlation(tape, z, x)
}

/// Picks the mask logits at one score location per example, returning
/// `[B, n, n]`. `locations` holds `(row, col)` per batch entry.
pub fn select_mask(config: &NetConfig, tape: &mut Tape, mask_logits: Var, locations: &[(usize, usize)]) -> Result<Var> {
    let shape = tape.shape(mask_logits).to_vec();
    let (b, s, n) = (shape[0], config.score_size(), config.mask_size);
    if locations.len() != b {
        return Err(Error::InvalidInput(format!("{} locations for a batch of {b}", locations.len())));
    }
    let mut onehot = Tensor::zeros(&[b, 1, s, s]);
    for (i, &(row, col)) in locations.iter().enumerate() {
        onehot.set(&[i, 0, row, col], 1.0);
    }
    let onehot = tape.constant(onehot);
    let onehot = tape.broadcast(onehot, &shape)?;
    let picked = tape.mul(mask_logits, onehot)?;
    let picked = tape.sum_axes(picked, &[2, 3])?;
    Ok(tape.reshape(picked, &[b, n, n])?)
}

/// Per-pixel generator: `sigmoid(w1 . tanh(W0 x + b0) + b1)` over rows of
/// `inputs` (`[M, k]`), returning `[M]` values in `(0, 1)`.
pub fn generator_forward(config: &NetConfig, tape: &mut Tape, params: &Bound, inputs: Var) -> Result<Var> {
    let s = tape.shape(inputs).to_vec();
    if s.len() != 2 || s[1] != config.generator_inputs() {
        return Err(Error::InvalidInput(format!(
            "generator expects [M, {}] inputs, got {s:?}",
            config.generator_inputs()
        )));
    }
    let m = s[0];
    let w0 = params.var("gen.0.weight")?;
    let b0 = params.var("gen.0.bias")?;
    let w1 = params.var("gen.1.weight")?;
    let b1 = params.var("gen.1.bias")?;
    let h = tape.matmul(inputs, w0)?;
    let b0 = tape.reshape(b0, &[1, config.generator_hidden])?;
    let b0 = tape.broadcast(b0, &[m, config.generator_hidden])?;
    let h = tape.add(h, b0)?;
    let h = tape.tanh(h)?;
    let o = tape.matmul(h, w1)?;
    let b1 = tape.reshape(b1, &[1, 1])?;
    let b1 = tape.broadcast(b1, &[m, 1])?;
    let o = tape.add(o, b1)?;
    let o = tape.sigmoid(o)?;
    Ok(tape.reshape(o, &[m])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        ModelParams::init(NetConfig::default(), Seed(1)).unwrap()
    }

    #[test]
    fn default_shapes() {
        let cfg = NetConfig::default();
        assert_eq!(cfg.template_features(), 8);
        assert_eq!(cfg.search_features(), 16);
        assert_eq!(cfg.score_size(), 9);
        let m = model();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, |_| false);
        let z = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let x = tape.constant(Tensor::zeros(&[1, 1, 64, 64]));
        let zf = backbone_forward(&cfg, &mut tape, &p, z).unwrap();
        let xf = backbone_forward(&cfg, &mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(zf), &[1, 16, 8, 8]);
        assert_eq!(tape.shape(xf), &[1, 16, 16, 16]);
        let r = channel_correlation(&mut tape, zf, xf).unwrap();
        assert_eq!(tape.shape(r), &[1, 16, 9, 9]);
        let out = heads_forward(&cfg, &mut tape, &p, r).unwrap();
        assert_eq!(tape.shape(out.score), &[1, 1, 9, 9]);
        assert_eq!(tape.shape(out.boxreg), &[1, 4, 9, 9]);
        assert_eq!(tape.shape(out.mask_logits), &[1, 256, 9, 9]);
    }

    #[test]
    fn backbone_rejects_wrong_size() {
        let m = model();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 40, 40]));
        assert!(backbone_forward(m.config(), &mut tape, &p, x).is_err());
    }

    #[test]
    fn identical_images_give_identical_features() {
        let m = model();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, |_| false);
        let img = Tensor::from_fn(&[1, 1, 32, 32], |i| ((i * 31) % 17) as f64 / 17.0);
        let a = tape.constant(img.clone());
        let b = tape.constant(img);
        let fa = backbone_forward(m.config(), &mut tape, &p, a).unwrap();
        let fb = backbone_forward(m.config(), &mut tape, &p, b).unwrap();
        assert_eq!(tape.value(fa), tape.value(fb));
    }

    #[test]
    fn zero_template_features_give_zero_correlation() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let x = tape.constant(Tensor::from_fn(&[1, 3, 5, 5], |i| i as f64));
        let r = channel_correlation(&mut tape, z, x).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(channel_correlation(&mut tape, bad, x).is_err());
    }

    #[test]
    fn delta_template_crops_search_features() {
        // A kernel that is 1 at (1, 2) and 0 elsewhere picks x[u + 1, v + 2].
        let mut tape = Tape::new();
        let mut k = Tensor::zeros(&[1, 2, 3, 3]);
        k.set(&[0, 0, 1, 2], 1.0);
        k.set(&[0, 1, 1, 2], 1.0);
        let xs = Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f64).sin());
        let z = tape.constant(k);
        let x = tape.constant(xs.clone());
        let r = channel_correlation(&mut tape, z, x).unwrap();
        let r = tape.value(r);
        for c in 0..2 {
            for u in 0..4 {
                for v in 0..4 {
                    assert_eq!(r.at(&[0, c, u, v]), xs.at(&[0, c, u + 1, v + 2]));
                }
            }
        }
    }

    #[test]
    fn zero_output_layers_give_zero_logits() {
        let mut m = model();
        for head in HEADS {
            let p = head.prefix();
            for suffix in ["1.weight", "1.bias"] {
                let name = format!("{p}.{suffix}");
                let shape = m.get(&name).unwrap().shape().to_vec();
                m.set(&name, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, |_| false);
        let r = tape.constant(Tensor::from_fn(&[2, 16, 9, 9], |i| (i as f64 * 0.1).cos()));
        let out = heads_forward(m.config(), &mut tape, &p, r).unwrap();
        for v in [out.score, out.boxreg, out.mask_logits] {
            assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn generator_is_half_with_zero_weights_and_inside_unit_interval() {
        let mut m = model();
        for name in ["gen.0.weight", "gen.0.bias", "gen.1.weight", "gen.1.bias"] {
            let shape = m.get(name).unwrap().shape().to_vec();
            m.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::zeros(&[5, 3]));
        let out = generator_forward(m.config(), &mut tape, &p, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.5));

        let m = model();
        let p = m.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::from_fn(&[50, 3], |i| (i as f64 - 25.0) * 3.0));
        let out = generator_forward(m.config(), &mut tape, &p, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = tape.constant(Tensor::zeros(&[5, 2]));
        assert!(generator_forward(m.config(), &mut tape, &p, bad).is_err());
    }

    #[test]
    fn checkpoint_layout_and_round_trip() {
        let m = ModelParams::init(NetConfig::tiny(), Seed(3)).unwrap();
        let bytes = encode_checkpoint(m.tensors()).unwrap();
        assert_eq!(&bytes[..5], b"MTCK\x01");
        // First parameter in name order is backbone.0.bias, shape [4].
        assert_eq!(u16::from_le_bytes([bytes[5], bytes[6]]) as usize, "backbone.0.bias".len());
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(&back, m.tensors());
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }

    #[test]
    fn mask_at_locations_matches_full_head() {
        let m = ModelParams::init(NetConfig::tiny(), Seed(4)).unwrap();
        let cfg = m.config().clone();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, |_| false);
        let r = tape.constant(Tensor::from_fn(&[2, 4, 5, 5], |i| ((i * 7) % 13) as f64 / 6.0 - 1.0));
        let out = heads_forward(&cfg, &mut tape, &p, r).unwrap();
        let locs = [(1, 3), (4, 0)];
        let full = select_mask(&cfg, &mut tape, out.mask_logits, &locs).unwrap();
        let fast = mask_at_locations(&cfg, &mut tape, &p, r, &locs).unwrap();
        let diff = tape.value(full).max_abs_diff(tape.value(fast)).unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn adaptable_parameters_are_head_weights_only() {
        assert!(is_adaptable("mask.0.weight"));
        assert!(is_adaptable("cls.1.bias"));
        assert!(!is_adaptable("cls.norm.scale"));
        assert!(!is_adaptable("backbone.0.weight"));
        assert!(!is_adaptable("gen.0.weight"));
    }
}
