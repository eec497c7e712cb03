//! First-frame adaptation and frame-by-frame tracking.

use metatrack_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{BBox, CropWindow, MaskGrid};
use crate::labels::soft_mask_labels;
use crate::meta::{correlation, head_losses, AdaptHeads, Batch, LossBundle, LossWeights};
use crate::nets::{backbone_forward, channel_correlation, mask_at_locations, score_and_box, HeadWeights, ModelParams};
use crate::rng::Seed;
use crate::synthdata::{search_window, support_set, Sequence};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackConfig {
    /// Support examples built from the first frame, the base included.
    pub n_aug: usize,
    pub adapt_steps: usize,
    pub adapt_alpha: f64,
    pub adapt_heads: AdaptHeads,
    pub mask_threshold: f64,
    /// Blend weight of the cosine window in the location score.
    pub cosine_influence: f64,
    /// Weight of the new mask-derived size in the size update.
    pub scale_damping: f64,
    pub loss_weights: LossWeights,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            n_aug: 40,
            adapt_steps: 20,
            adapt_alpha: 0.001,
            adapt_heads: AdaptHeads::All,
            mask_threshold: 0.5,
            cosine_influence: 0.4,
            scale_damping: 0.3,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_aug == 0 {
            return Err(Error::Config("n_aug must be at least 1".into()));
        }
        if !(self.adapt_alpha >= 0.0 && self.adapt_alpha.is_finite()) {
            return Err(Error::Config("adapt_alpha must be finite and non-negative".into()));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config("mask_threshold must lie in (0, 1)".into()));
        }
        if !unit(self.cosine_influence) || !unit(self.scale_damping) {
            return Err(Error::Config("cosine_influence and scale_damping must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub const LOW_CONFIDENCE: f64 = 0.3;
/// Smallest mask component, in cells, that yields a box.
pub const MIN_MASK_AREA: usize = 4;

/// Outcome of first-frame adaptation.
#[derive(Debug, Clone)]
pub struct Adaptation {
    pub heads: HeadWeights,
    /// Support loss before each step and after the last.
    pub losses: Vec<LossBundle>,
    /// Template features `[1, C, t, t]`.
    pub template_features: Tensor,
}

/// Builds `cfg.n_aug` support examples from frame `t` and takes
/// `cfg.adapt_steps` plain gradient steps on the selected head weights.
/// Backbone and generator stay fixed; the result is detached.
pub fn online_adapt(model: &ModelParams, seq: &Sequence, t: usize, b: &BBox, cfg: &TrackConfig, seed: Seed) -> Result<Adaptation> {
    cfg.validate()?;
    let config = model.config();
    if !(b.w >= 2.0 && b.h >= 2.0) || !b.is_finite() || b.clamped(seq.width, seq.height).is_none() {
        return Err(Error::InvalidInput(format!("cannot adapt to degenerate or outside box {b:?}")));
    }
    let mut local = seq.clone_frame(t);
    local.boxes[0] = *b;
    let support = support_set(&local, 0, cfg.n_aug, config, &mut seed.child("support").rng())?;
    let batch = Batch::support(&support)?;

    let mut tape = Tape::new();
    let fixed = model.bind(&mut tape, |_| false);
    let r = correlation(config, &mut tape, &fixed, &batch)?;
    let c = soft_mask_labels(config, &mut tape, &fixed, &batch.generator_inputs, &batch.inside)?;
    let zf = {
        let z = tape.constant(batch.templates.clone());
        let zf = backbone_forward(config, &mut tape, &fixed, z)?;
        tape.value(zf).clone()
    };
    let (r, c) = (tape.value(r).clone(), tape.value(c).clone());

    let mut heads = HeadWeights::slow(model);
    let names: Vec<String> = heads.tensors.keys().filter(|n| cfg.adapt_heads.selects(n)).cloned().collect();
    let mut losses = Vec::with_capacity(cfg.adapt_steps + 1);
    for step in 0..=cfg.adapt_steps {
        // A fresh tape per step keeps memory flat.
        let mut tape = Tape::new();
        let base = model.bind(&mut tape, |_| false);
        let mut leaves = Vec::with_capacity(names.len());
        let mut pairs = Vec::with_capacity(heads.tensors.len());
        for (name, value) in &heads.tensors {
            let v = if step < cfg.adapt_steps && names.contains(name) {
                let v = tape.leaf(value.clone());
                leaves.push(v);
                v
            } else {
                tape.constant(value.clone())
            };
            pairs.push((name.clone(), v));
        }
        let params = base.replaced(pairs);
        let rv = tape.constant(r.clone());
        let cv = tape.constant(c.clone());
        let l = head_losses(config, &mut tape, &params, rv, &batch, cv, &cfg.loss_weights)?;
        losses.push(l.values(&tape));
        if step == cfg.adapt_steps {
            break;
        }
        let grads = tape.backward(l.total, &leaves, false)?;
        for (name, &leaf) in names.iter().zip(&leaves) {
            let g = tape.value(grads.get(leaf).expect("requested"));
            if !g.all_finite() {
                return Err(Error::NonFinite { name: name.clone(), norm: g.norm() });
            }
            let w = heads.tensors.get_mut(name).expect("adaptable name");
            for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
                *wi -= cfg.adapt_alpha * gi;
            }
        }
    }
    Ok(Adaptation { heads, losses, template_features: zf })
}

/// Tracker output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub frame: usize,
    /// Target center in frame pixels.
    pub p: (f64, f64),
    pub bbox: BBox,
    /// `[A, S, S]` classification probabilities.
    pub score_map: Tensor,
    /// `[n, n]` mask probabilities at the chosen location.
    pub mask: Tensor,
    pub max_score: f64,
    pub low_confidence: bool,
    /// Score-map cell `(row, col)` the mask was taken from.
    pub location: (usize, usize),
    /// Crop and grid placing `mask` in the frame.
    pub window: CropWindow,
    pub grid: MaskGrid,
}

impl TrackState {
    /// Binary frame-resolution mask; see [`place_mask`].
    pub fn frame_mask(&self, width: usize, height: usize, threshold: f64) -> Vec<u8> {
        place_mask(self.mask.data(), &self.grid, &self.window, width, height, threshold)
    }
}

/// Pastes an `n×n` probability mask placed by `grid` inside `window` into a
/// binary frame: each pixel takes the nearest mask cell, pixels outside the
/// grid are background.
pub fn place_mask(mask: &[f64], grid: &MaskGrid, window: &CropWindow, width: usize, height: usize, threshold: f64) -> Vec<u8> {
    let n = grid.n;
    let mut out = vec![0u8; width * height];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = window.frame_to_patch(x as f64, y as f64);
            let col = ((px - grid.left) / grid.cell).floor();
            let row = ((py - grid.top) / grid.cell).floor();
            if col >= 0.0 && row >= 0.0 && (col as usize) < n && (row as usize) < n {
                out[y * width + x] = u8::from(mask[row as usize * n + col as usize] >= threshold);
            }
        }
    }
    out
}

/// Cells of the largest 4-connected component of `mask >= threshold`, or
/// `None` when it has fewer than [`MIN_MASK_AREA`] cells. Ties keep the
/// component found first in row-major order.
pub fn largest_component(mask: &[f64], n: usize, threshold: f64) -> Option<Vec<(usize, usize)>> {
    let mut seen = vec![false; n * n];
    let mut best: Vec<(usize, usize)> = Vec::new();
    for start in 0..n * n {
        if seen[start] || mask[start] < threshold {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / n, i % n);
            comp.push((r, c));
            let mut visit = |j: usize| {
                if !seen[j] && mask[j] >= threshold {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - n);
            }
            if r + 1 < n {
                visit(i + n);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < n {
                visit(i + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    (best.len() >= MIN_MASK_AREA).then_some(best)
}

/// Tight box, in frame coordinates, around the largest component of a
/// thresholded mask placed by `grid` inside `window`.
pub fn mask_to_box(mask: &[f64], threshold: f64, grid: &MaskGrid, window: &CropWindow) -> Option<BBox> {
    let cells = largest_component(mask, grid.n, threshold)?;
    let r0 = cells.iter().map(|c| c.0).min()?;
    let r1 = cells.iter().map(|c| c.0).max()?;
    let c0 = cells.iter().map(|c| c.1).min()?;
    let c1 = cells.iter().map(|c| c.1).max()?;
    Some(window.box_to_frame(&grid.cells_to_box(r0, c0, r1, c1)))
}

/// Row-major argmax of `(1 - w) * score + w * window`, with its value.
pub fn blended_argmax(scores: &[f64], window: &[f64], w: f64) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (s, c)) in scores.iter().zip(window).enumerate() {
        let v = (1.0 - w) * s + w * c;
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Previous state needed to track the next frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    pub p: (f64, f64),
    pub bbox: BBox,
}

/// Tracks one frame: search crop at the previous position, windowed
/// location choice, mask at that location, and a damped size update.
pub fn track_step(model: &ModelParams, adapted: &Adaptation, seq: &Sequence, t: usize, prev: &Prior, cfg: &TrackConfig) -> Result<TrackState> {
    let config = model.config();
    let geom = config.geometry();
    let center = BBox { cx: prev.p.0, cy: prev.p.1, ..prev.bbox };
    let window = search_window(&center, &prev.bbox, config);
    let search = seq.crop(t, &window);

    let mut tape = Tape::new();
    let base = model.bind(&mut tape, |_| false);
    let pairs: Vec<(String, Var)> =
        adapted.heads.tensors.iter().map(|(n, v)| (n.clone(), tape.constant(v.clone()))).collect();
    let params = base.replaced(pairs);
    let x = tape.constant(search.reshaped(&[1, 1, config.search_size, config.search_size])?);
    let xf = backbone_forward(config, &mut tape, &params, x)?;
    let zf = tape.constant(adapted.template_features.clone());
    let r = channel_correlation(&mut tape, zf, xf)?;
    let (score, _) = score_and_box(config, &mut tape, &params, r)?;

    let s = config.score_size();
    let a = config.num_anchors();
    let score = tape.value(score).map(sigmoid);
    let per_cell: Vec<f64> =
        (0..s * s).map(|i| (0..a).map(|k| score.data()[k * s * s + i]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let (best, max_score) = blended_argmax(&per_cell, &geom.cosine_window(), cfg.cosine_influence);
    let (row, col) = (best / s, best % s);

    let n = config.mask_size;
    let logits = mask_at_locations(config, &mut tape, &params, r, &[(row, col)])?;
    let mask = tape.value(logits).map(sigmoid).reshaped(&[n, n])?;
    let grid = geom.mask_grid(row, col);
    let located = window.patch_to_frame(geom.location_center(col), geom.location_center(row));

    let d = cfg.scale_damping;
    let (p, size) = match mask_to_box(mask.data(), cfg.mask_threshold, &grid, &window) {
        Some(m) => ((m.cx, m.cy), ((1.0 - d) * prev.bbox.w + d * m.w, (1.0 - d) * prev.bbox.h + d * m.h)),
        None => (located, (prev.bbox.w, prev.bbox.h)),
    };
    let raw = BBox { cx: p.0, cy: p.1, w: size.0.max(2.0), h: size.1.max(2.0) };
    let bbox = raw.clamped(seq.width, seq.height).unwrap_or_else(|| {
        // Entirely outside: keep the size and pull the center to the border.
        BBox {
            cx: raw.cx.clamp(0.0, seq.width as f64 - 1.0),
            cy: raw.cy.clamp(0.0, seq.height as f64 - 1.0),
            ..raw
        }
        .clamped(seq.width, seq.height)
        .unwrap_or(prev.bbox)
    });
    Ok(TrackState {
        frame: t,
        p: (bbox.cx, bbox.cy),
        bbox,
        score_map: score.reshaped(&[a, s, s])?,
        mask,
        max_score,
        low_confidence: max_score < LOW_CONFIDENCE,
        location: (row, col),
        window,
        grid,
    })
}

/// Output of a tracking run.
#[derive(Debug, Clone)]
pub struct TrackRun {
    /// One state per frame after the first.
    pub states: Vec<TrackState>,
    pub adaptation: Adaptation,
}

/// Adapts on the first frame with its ground-truth box and tracks the
/// remaining frames.
pub fn track_sequence(model: &ModelParams, seq: &Sequence, cfg: &TrackConfig, seed: Seed) -> Result<TrackRun> {
    let b0 = seq.boxes[0];
    let adaptation = online_adapt(model, seq, 0, &b0, cfg, seed)?;
    let mut prev = Prior { p: (b0.cx, b0.cy), bbox: b0 };
    let mut states = Vec::with_capacity(seq.len() - 1);
    for t in 1..seq.len() {
        let st = track_step(model, &adaptation, seq, t, &prev, cfg)?;
        prev = Prior { p: st.p, bbox: st.bbox };
        states.push(st);
    }
    Ok(TrackRun { states, adaptation })
}

/// Reset schedule: after a failure the tracker stays off for `delay`
/// frames and is then re-initialized from the ground truth; the `burn_in`
/// frames after a re-initialization do not count towards accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResetProtocol {
    pub delay: usize,
    pub burn_in: usize,
}

impl Default for ResetProtocol {
    fn default() -> Self {
        ResetProtocol { delay: 5, burn_in: 10 }
    }
}

/// Per-frame entry of a run under the reset protocol.
#[derive(Debug, Clone)]
pub enum FrameResult {
    Tracked(TrackState),
    /// Frame skipped while waiting to re-initialize.
    Skipped,
    /// Frame used to re-initialize from ground truth.
    Reinit,
}

impl FrameResult {
    pub fn state(&self) -> Option<&TrackState> {
        match self {
            FrameResult::Tracked(s) => Some(s),
            _ => None,
        }
    }
}

/// Tracks with re-initialization after failures (zero overlap with the
/// ground truth). Entries cover frames `1..L`.
pub fn track_with_resets(model: &ModelParams, seq: &Sequence, cfg: &TrackConfig, protocol: ResetProtocol, seed: Seed) -> Result<Vec<FrameResult>> {
    let b0 = seq.boxes[0];
    let mut adaptation = online_adapt(model, seq, 0, &b0, cfg, seed.index(0))?;
    let mut prev = Prior { p: (b0.cx, b0.cy), bbox: b0 };
    let mut out = Vec::with_capacity(seq.len() - 1);
    let mut t = 1;
    while t < seq.len() {
        let st = track_step(model, &adaptation, seq, t, &prev, cfg)?;
        let failed = st.bbox.iou(&seq.boxes[t]) == 0.0;
        prev = Prior { p: st.p, bbox: st.bbox };
        out.push(FrameResult::Tracked(st));
        t += 1;
        if failed {
            let resume = t + protocol.delay;
            while t < resume.min(seq.len()) {
                out.push(FrameResult::Skipped);
                t += 1;
            }
            if t < seq.len() {
                let b = seq.boxes[t];
                adaptation = online_adapt(model, seq, t, &b, cfg, seed.index(t as u64))?;
                prev = Prior { p: (b.cx, b.cy), bbox: b };
                out.push(FrameResult::Reinit);
                t += 1;
            }
        }
    }
    Ok(out)
}
