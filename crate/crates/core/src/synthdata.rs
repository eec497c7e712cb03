//! Synthetic single-channel video with exact ground truth, the `MTSQ`
//! sequence file format, corpus manifests, and support/query task
//! construction.

use std::fs;
use std::path::{Path, PathBuf};

use metatrack_autodiff::Tensor;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::{crop_image, BBox, CropWindow};
use crate::labels::{augment, SupportExample};
use crate::nets::NetConfig;
use crate::rng::{Rng, Seed};

pub const TEMPLATE_CONTEXT: f64 = 2.0;
pub const SEARCH_CONTEXT: f64 = 4.0;
/// Largest random offset, in search-patch pixels, of query crops from the
/// target center.
pub const QUERY_JITTER: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SeqParams {
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub distractors: usize,
    /// Scales the random-walk velocity; 0 keeps every object still.
    pub motion: f64,
    /// Scales the periodic change of the target's axes; 1 gives ±20%.
    pub deform: f64,
}

impl Default for SeqParams {
    fn default() -> Self {
        SeqParams { length: 30, height: 128, width: 128, distractors: 2, motion: 1.0, deform: 1.0 }
    }
}

impl SeqParams {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Config(format!("sequence length must be at least 2, got {}", self.length)));
        }
        if self.height < 96 || self.width < 96 {
            return Err(Error::Config(format!(
                "frames must be at least 96×96, got {}×{}",
                self.width, self.height
            )));
        }
        if !(self.motion >= 0.0 && self.deform >= 0.0 && self.motion.is_finite() && self.deform <= 4.0) {
            return Err(Error::Config("motion must be finite and non-negative, deform in [0, 4]".into()));
        }
        Ok(())
    }
}

/// A rendered video with the target's binary mask and tight box per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub width: usize,
    pub height: usize,
    /// Row-major frames with values in `[0, 1]`.
    pub frames: Vec<Vec<f64>>,
    pub masks: Vec<Vec<u8>>,
    pub boxes: Vec<BBox>,
    pub seed: u64,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_mean(&self, t: usize) -> f64 {
        self.frames[t].iter().sum::<f64>() / self.frames[t].len() as f64
    }

    /// Resampled crop of frame `t`, padded with the frame mean.
    pub fn crop(&self, t: usize, window: &CropWindow) -> Tensor {
        let data = crop_image(&self.frames[t], self.width, self.height, window, self.frame_mean(t));
        Tensor::from_fn(&[window.size, window.size], |i| data[i])
    }

    /// A one-frame sequence holding frame `t`.
    pub fn clone_frame(&self, t: usize) -> Sequence {
        Sequence {
            width: self.width,
            height: self.height,
            frames: vec![self.frames[t].clone()],
            masks: vec![self.masks[t].clone()],
            boxes: vec![self.boxes[t]],
            seed: self.seed,
        }
    }

    pub fn mask_at(&self, t: usize, x: f64, y: f64) -> u8 {
        let (xi, yi) = (x.round(), y.round());
        if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
            return 0;
        }
        self.masks[t][yi as usize * self.width + xi as usize]
    }
}

/// Tight box around the nonzero pixels of a mask.
pub fn mask_bounds(mask: &[u8], width: usize) -> Option<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (i, &m) in mask.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let (x, y) = (i % width, i / width);
        bounds = Some(match bounds {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    bounds.map(|(x0, y0, x1, y1)| BBox::from_pixel_bounds(x0, y0, x1, y1))
}

#[derive(Debug, Clone)]
struct Shape {
    a: f64,
    b: f64,
    angle: f64,
    /// Superellipse exponent; 2 is an ellipse, larger values approach a
    /// rounded rectangle.
    power: f64,
    intensity: f64,
}

impl Shape {
    fn random(rng: &mut Rng, intensity: (f64, f64)) -> Self {
        Shape {
            a: rng.gen_range(7.0..13.0),
            b: rng.gen_range(7.0..13.0),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            power: if rng.gen_bool(0.5) { 2.0 } else { 4.0 },
            intensity: rng.gen_range(intensity.0..intensity.1),
        }
    }

    fn contains(&self, cx: f64, cy: f64, sa: f64, sb: f64, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let u = (c * dx + s * dy) / (self.a * sa);
        let v = (-s * dx + c * dy) / (self.b * sb);
        u.abs().powf(self.power) + v.abs().powf(self.power) <= 1.0
    }
}

/// Bounded random walk that reflects off a margin around the frame edge.
fn random_walk(rng: &mut Rng, p: &SeqParams, margin: f64) -> Vec<(f64, f64)> {
    let (w, h) = (p.width as f64, p.height as f64);
    let mut pos = (rng.gen_range(0.3 * w..0.7 * w), rng.gen_range(0.3 * h..0.7 * h));
    let vmax = 2.5 * p.motion;
    let mut vel = (0.0, 0.0);
    let mut out = Vec::with_capacity(p.length);
    for _ in 0..p.length {
        out.push(pos);
        let (ax, ay): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        vel.0 = (0.85 * vel.0 + 0.8 * p.motion * ax).clamp(-vmax, vmax);
        vel.1 = (0.85 * vel.1 + 0.8 * p.motion * ay).clamp(-vmax, vmax);
        pos.0 += vel.0;
        pos.1 += vel.1;
        if pos.0 < margin || pos.0 > w - 1.0 - margin {
            vel.0 = -vel.0;
            pos.0 = pos.0.clamp(margin, w - 1.0 - margin);
        }
        if pos.1 < margin || pos.1 > h - 1.0 - margin {
            vel.1 = -vel.1;
            pos.1 = pos.1.clamp(margin, h - 1.0 - margin);
        }
    }
    out
}

/// Static background: smooth value noise plus fine grain, in `[0.2, 0.4]`.
fn background(rng: &mut Rng, p: &SeqParams) -> Vec<f64> {
    const G: usize = 9;
    let coarse: Vec<f64> = (0..G * G).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = Vec::with_capacity(p.width * p.height);
    for y in 0..p.height {
        for x in 0..p.width {
            let gx = x as f64 / (p.width - 1) as f64 * (G - 1) as f64;
            let gy = y as f64 / (p.height - 1) as f64 * (G - 1) as f64;
            let (x0, y0) = ((gx.floor() as usize).min(G - 2), (gy.floor() as usize).min(G - 2));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let at = |i: usize, j: usize| coarse[j * G + i];
            let smooth = (at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx) * (1.0 - fy)
                + (at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx) * fy;
            let grain: f64 = rng.gen_range(0.0..1.0);
            out.push(0.2 + 0.2 * (0.7 * smooth + 0.3 * grain));
        }
    }
    out
}

struct Track {
    shape: Shape,
    path: Vec<(f64, f64)>,
}

fn render(frame: &mut [f64], p: &SeqParams, shape: &Shape, (cx, cy): (f64, f64), (sa, sb): (f64, f64)) {
    const SUB: [f64; 2] = [-0.25, 0.25];
    let reach = shape.a.max(shape.b) * sa.max(sb) * 1.5 + 2.0;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil().max(0.0) as usize).min(p.width - 1);
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil().max(0.0) as usize).min(p.height - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut cover = 0.0;
            for dy in SUB {
                for dx in SUB {
                    if shape.contains(cx, cy, sa, sb, x as f64 + dx, y as f64 + dy) {
                        cover += 0.25;
                    }
                }
            }
            if cover > 0.0 {
                let px = &mut frame[y * p.width + x];
                *px = (1.0 - cover) * *px + cover * shape.intensity;
            }
        }
    }
}

/// Generates a sequence; identical `(seed, params)` give identical output.
///
/// One target moves by a bounded random walk and deforms periodically.
/// Distractors of similar shape and slightly lower brightness move
/// independently and are drawn beneath the target, except that with
/// probability 0.2 one distractor crosses over the target mid-sequence.
/// Pixel values and boxes are representable exactly in `f32`.
pub fn generate_sequence(seed: u64, p: &SeqParams) -> Result<Sequence> {
    p.validate()?;
    let root = Seed(seed);
    let bg = background(&mut root.child("background").rng(), p);
    let margin = 24.0;

    let mut rng = root.child("target").rng();
    let target = Track { shape: Shape::random(&mut rng, (0.7, 0.9)), path: random_walk(&mut rng, p, margin) };
    let period = rng.gen_range(15.0..40.0);
    let phases: (f64, f64) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let axes: Vec<(f64, f64)> = (0..p.length)
        .map(|t| {
            let w = 2.0 * std::f64::consts::PI * t as f64 / period;
            (1.0 + 0.2 * p.deform * (w + phases.0).sin(), 1.0 + 0.2 * p.deform * (w + phases.1).sin())
        })
        .collect();

    let mut distractors = Vec::with_capacity(p.distractors);
    for i in 0..p.distractors {
        let mut rng = root.child("distractor").index(i as u64).rng();
        distractors.push(Track { shape: Shape::random(&mut rng, (0.6, 0.8)), path: random_walk(&mut rng, p, margin) });
    }
    let mut occluder = None;
    if p.distractors > 0 && root.child("occlusion").rng().gen_bool(0.2) {
        let mut rng = root.child("occlusion").index(1).rng();
        let mid = p.length / 2;
        let heading: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let speed = 2.0 * p.motion.max(0.5);
        let (mx, my) = target.path[mid];
        // Offset so the crossing is partial rather than total.
        let (ox, oy) = (rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
        distractors[0].path = (0..p.length)
            .map(|t| {
                let d = (t as f64 - mid as f64) * speed;
                (mx + ox + d * heading.cos(), my + oy + d * heading.sin())
            })
            .collect();
        occluder = Some(0);
    }

    let mut frames = Vec::with_capacity(p.length);
    let mut masks = Vec::with_capacity(p.length);
    let mut boxes = Vec::with_capacity(p.length);
    for t in 0..p.length {
        let mut frame = bg.clone();
        for (i, d) in distractors.iter().enumerate() {
            if occluder != Some(i) {
                render(&mut frame, p, &d.shape, d.path[t], (1.0, 1.0));
            }
        }
        render(&mut frame, p, &target.shape, target.path[t], axes[t]);
        if let Some(i) = occluder {
            render(&mut frame, p, &distractors[i].shape, distractors[i].path[t], (1.0, 1.0));
        }
        for v in frame.iter_mut() {
            *v = *v as f32 as f64;
        }
        let (cx, cy) = target.path[t];
        let mut mask = vec![0u8; p.width * p.height];
        for y in 0..p.height {
            for x in 0..p.width {
                if target.shape.contains(cx, cy, axes[t].0, axes[t].1, x as f64, y as f64) {
                    mask[y * p.width + x] = 1;
                }
            }
        }
        let b = mask_bounds(&mask, p.width)
            .ok_or_else(|| Error::InvalidInput(format!("empty target mask at frame {t} of seed {seed}")))?;
        frames.push(frame);
        masks.push(mask);
        boxes.push(b);
    }
    Ok(Sequence { width: p.width, height: p.height, frames, masks, boxes, seed })
}

const SEQ_MAGIC: &[u8; 4] = b"MTSQ";
const SEQ_VERSION: u8 = 1;
const SEQ_HEADER: usize = 4 + 1 + 12;

/// Size in bytes of an `MTSQ` file.
pub fn sequence_file_len(length: usize, height: usize, width: usize) -> usize {
    SEQ_HEADER + length * (height * width * 4 + height * width + 16) + 8
}

pub fn encode_sequence(seq: &Sequence) -> Result<Vec<u8>> {
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidInput(format!("dimension {v} too large")));
    let mut out = Vec::with_capacity(sequence_file_len(seq.len(), seq.height, seq.width));
    out.extend_from_slice(SEQ_MAGIC);
    out.push(SEQ_VERSION);
    for v in [seq.len(), seq.height, seq.width] {
        out.extend_from_slice(&dim(v)?.to_le_bytes());
    }
    for t in 0..seq.len() {
        for &v in &seq.frames[t] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&seq.masks[t]);
        let b = seq.boxes[t];
        for v in [b.cx, b.cy, b.w, b.h] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&seq.seed.to_le_bytes());
    Ok(out)
}

pub fn decode_sequence(bytes: &[u8]) -> Result<Sequence> {
    let fail = |offset: usize, reason: String| Error::Format { what: "sequence", offset, reason };
    if bytes.len() < SEQ_HEADER {
        return Err(fail(
            bytes.len(),
            format!("truncated header: expected {SEQ_HEADER} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != SEQ_MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    if bytes[4] != SEQ_VERSION {
        return Err(fail(4, format!("unsupported version {}", bytes[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as f64;
    let (length, height, width) = (u32_at(5), u32_at(9), u32_at(13));
    if length == 0 || height == 0 || width == 0 {
        return Err(fail(5, format!("empty dimensions {length}×{height}×{width}")));
    }
    let expected = sequence_file_len(length, height, width);
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!("expected {expected} bytes for {length} frames of {width}×{height}, found {}", bytes.len()),
        ));
    }
    let pixels = height * width;
    let mut pos = SEQ_HEADER;
    let mut frames = Vec::with_capacity(length);
    let mut masks = Vec::with_capacity(length);
    let mut boxes = Vec::with_capacity(length);
    for _ in 0..length {
        frames.push((0..pixels).map(|i| f32_at(pos + 4 * i)).collect());
        pos += 4 * pixels;
        let mask = bytes[pos..pos + pixels].to_vec();
        if let Some(i) = mask.iter().position(|&m| m > 1) {
            return Err(fail(pos + i, format!("mask value {} is not 0 or 1", mask[i])));
        }
        masks.push(mask);
        pos += pixels;
        boxes.push(BBox { cx: f32_at(pos), cy: f32_at(pos + 4), w: f32_at(pos + 8), h: f32_at(pos + 12) });
        pos += 16;
    }
    let seed = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes"));
    Ok(Sequence { width, height, frames, masks, boxes, seed })
}

pub fn write_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    fs::write(path, encode_sequence(seq)?).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: &Path) -> Result<Sequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes)
}

pub const MANIFEST: &str = "manifest.txt";

/// Seed of sequence `i` of a corpus generated from `root`.
pub fn corpus_seed(root: u64, i: usize) -> u64 {
    Seed(root).child("sequence").index(i as u64).0
}

/// Writes `count` sequences and a manifest listing their file names.
pub fn write_corpus(dir: &Path, root: u64, count: usize, params: &SeqParams) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for i in 0..count {
        let name = format!("seq_{i:04}.mtsq");
        let seq = generate_sequence(corpus_seed(root, i), params)?;
        write_sequence(&seq, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Paths listed by a manifest, resolved against its directory. Blank lines
/// and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

pub fn read_corpus(manifest: &Path) -> Result<Vec<Sequence>> {
    read_manifest(manifest)?.iter().map(|p| read_sequence(p)).collect()
}

/// A query pair with its labels and the ground-truth mask on the mask grid
/// at the labeled location.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryExample {
    pub example: SupportExample,
    /// `[n, n]` binary
    pub mask: Tensor,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub support: Vec<SupportExample>,
    pub query: Vec<QueryExample>,
    pub source_frame: usize,
}

/// Template crop around the frame-`t` box.
pub fn template_window(b: &BBox, config: &NetConfig) -> CropWindow {
    CropWindow::around(b, b, TEMPLATE_CONTEXT, config.template_size)
}

/// Search crop centered at `center`, sized from `scale`.
pub fn search_window(center: &BBox, scale: &BBox, config: &NetConfig) -> CropWindow {
    CropWindow::around(center, scale, SEARCH_CONTEXT, config.search_size)
}

/// The base example of frame `t` (search crop centered on the target) and
/// `count - 1` augmented copies.
pub fn support_set(seq: &Sequence, t: usize, count: usize, config: &NetConfig, rng: &mut Rng) -> Result<Vec<SupportExample>> {
    if count == 0 {
        return Err(Error::InvalidInput("support set must have at least one example".into()));
    }
    let b = seq.boxes[t];
    let template = seq.crop(t, &template_window(&b, config));
    let window = search_window(&b, &b, config);
    let search = seq.crop(t, &window);
    let base = SupportExample::new(template, search, window.box_to_patch(&b), config)?;
    let mut out = Vec::with_capacity(count);
    for _ in 1..count {
        out.push(augment(&base, config, rng)?);
    }
    out.insert(0, base);
    Ok(out)
}

/// Ground-truth mask of frame `t` sampled by nearest neighbor at the cell
/// centers of the example's mask grid.
pub fn query_mask(seq: &Sequence, t: usize, window: &CropWindow, example: &SupportExample, config: &NetConfig) -> Tensor {
    let grid = example.mask_grid(config);
    let n = grid.n;
    Tensor::from_fn(&[n, n], |i| {
        let (x, y) = grid.cell_center(i / n, i % n);
        let (fx, fy) = window.patch_to_frame(x, y);
        seq.mask_at(t, fx, fy) as f64
    })
}

/// Builds a task from one sequence: `k` support examples from a random
/// frame and `n` query pairs from distinct other frames. Query search crops
/// are centered on the query frame's target with a random offset of up to
/// [`QUERY_JITTER`] patch pixels per axis; every template comes from the
/// support frame.
pub fn make_task(seq: &Sequence, k: usize, n: usize, config: &NetConfig, rng: &mut Rng) -> Result<Task> {
    if seq.len() < n + 1 {
        return Err(Error::InvalidInput(format!(
            "a task with {n} queries needs at least {} frames, sequence has {}",
            n + 1,
            seq.len()
        )));
    }
    let source = rng.gen_range(0..seq.len());
    let support = support_set(seq, source, k, config, rng)?;
    let template = support[0].template.clone();
    let others: Vec<usize> = (0..seq.len()).filter(|&t| t != source).collect();
    let picks = rand::seq::index::sample(rng, others.len(), n);
    let mut query = Vec::with_capacity(n);
    for i in picks.iter() {
        let t = others[i];
        let b = seq.boxes[t];
        let zoom = config.search_size as f64 / (SEARCH_CONTEXT * b.scale());
        let jx: f64 = rng.gen_range(-QUERY_JITTER..=QUERY_JITTER);
        let jy: f64 = rng.gen_range(-QUERY_JITTER..=QUERY_JITTER);
        let center = BBox { cx: b.cx + jx / zoom, cy: b.cy + jy / zoom, ..b };
        let window = search_window(&center, &b, config);
        let search = seq.crop(t, &window);
        let example = SupportExample::new(template.clone(), search, window.box_to_patch(&b), config)?;
        let mask = query_mask(seq, t, &window, &example, config);
        query.push(QueryExample { example, mask, frame: t });
    }
    Ok(Task { support, query, source_frame: source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let p = SeqParams { length: 6, ..SeqParams::default() };
        assert_eq!(generate_sequence(9, &p).unwrap(), generate_sequence(9, &p).unwrap());
        assert_ne!(generate_sequence(9, &p).unwrap().frames, generate_sequence(10, &p).unwrap().frames);
    }

    #[test]
    fn still_config_repeats_frames() {
        let p = SeqParams { length: 5, distractors: 0, motion: 0.0, deform: 0.0, ..SeqParams::default() };
        let s = generate_sequence(3, &p).unwrap();
        for t in 1..5 {
            assert_eq!(s.frames[t], s.frames[0]);
            assert_eq!(s.masks[t], s.masks[0]);
        }
    }

    #[test]
    fn boxes_are_tight_around_masks_and_values_in_range() {
        let s = generate_sequence(4, &SeqParams::default()).unwrap();
        for t in 0..s.len() {
            assert_eq!(mask_bounds(&s.masks[t], s.width), Some(s.boxes[t]));
            assert!(s.frames[t].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(generate_sequence(1, &SeqParams { length: 1, ..SeqParams::default() }).is_err());
        assert!(generate_sequence(1, &SeqParams { width: 64, ..SeqParams::default() }).is_err());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let p = SeqParams { length: 3, height: 96, width: 100, ..SeqParams::default() };
        let s = generate_sequence(11, &p).unwrap();
        let bytes = encode_sequence(&s).unwrap();
        assert_eq!(bytes.len(), sequence_file_len(3, 96, 100));
        assert_eq!(decode_sequence(&bytes).unwrap(), s);
        let err = decode_sequence(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(err.contains(&format!("expected {} bytes", bytes.len())), "{err}");
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_sequence(&bad).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn header_arithmetic() {
        assert_eq!(sequence_file_len(8, 96, 96), 17 + 8 * (96 * 96 * 4 + 96 * 96 + 16) + 8);
    }

    #[test]
    fn task_shapes() {
        let cfg = NetConfig::default();
        let s = generate_sequence(5, &SeqParams::default()).unwrap();
        let task = make_task(&s, 10, 10, &cfg, &mut Seed(1).rng()).unwrap();
        assert_eq!(task.support.len(), 10);
        assert_eq!(task.query.len(), 10);
        let t0 = &task.support[0].template;
        assert!(task.support.iter().all(|e| &e.template == t0));
        assert!(task.query.iter().all(|q| &q.example.template == t0));
        let mut frames: Vec<usize> = task.query.iter().map(|q| q.frame).collect();
        frames.sort();
        frames.dedup();
        assert_eq!(frames.len(), 10);
        assert!(!frames.contains(&task.source_frame));
        for q in &task.query {
            assert!(q.mask.data().contains(&1.0));
        }

        let single = make_task(&s, 1, 3, &cfg, &mut Seed(2).rng()).unwrap();
        assert_eq!(single.support.len(), 1);
        let b = s.boxes[single.source_frame];
        let w = search_window(&b, &b, &cfg);
        assert_eq!(single.support[0].search, s.crop(single.source_frame, &w));
    }
}
