//! Training signals derived from a box: the Gaussian prior and soft mask
//! label, anchor classification and regression targets, and geometric
//! augmentation of support examples.

use metatrack_autodiff::{Tape, Tensor, Var};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::{sample_bilinear, BBox, MaskGrid, PatchGeometry};
use crate::nets::{generator_forward, Bound, NetConfig};
use crate::rng::Rng;

pub const POSITIVE_IOU: f64 = 0.6;
pub const NEGATIVE_IOU: f64 = 0.3;

/// `exp(-((x - cx)^2 / 2σx^2 + (y - cy)^2 / 2σy^2))` at the cell centers of
/// `grid`, with `σ = extent / 4`. Row-major `n × n`.
pub fn gaussian_prior(b: &BBox, grid: &MaskGrid) -> Result<Vec<f64>> {
    if !(b.w >= grid.cell && b.h >= grid.cell) || !b.is_finite() {
        return Err(Error::InvalidInput(format!(
            "box {b:?} is smaller than one mask cell ({} px)",
            grid.cell
        )));
    }
    let (sx, sy) = (b.w / 4.0, b.h / 4.0);
    let mut out = Vec::with_capacity(grid.n * grid.n);
    for row in 0..grid.n {
        for col in 0..grid.n {
            let (x, y) = grid.cell_center(row, col);
            let e = (x - b.cx).powi(2) / (2.0 * sx * sx) + (y - b.cy).powi(2) / (2.0 * sy * sy);
            out.push((-e).exp());
        }
    }
    Ok(out)
}

/// Per-cell generator inputs `[n*n, k]`: the prior value, followed by the
/// offsets from the box center normalized by the box extent when
/// `offsets` is set.
pub fn generator_inputs(b: &BBox, grid: &MaskGrid, offsets: bool) -> Result<Tensor> {
    let prior = gaussian_prior(b, grid)?;
    let k = if offsets { 3 } else { 1 };
    let mut data = Vec::with_capacity(prior.len() * k);
    for row in 0..grid.n {
        for col in 0..grid.n {
            data.push(prior[row * grid.n + col]);
            if offsets {
                let (x, y) = grid.cell_center(row, col);
                data.push((x - b.cx) / b.w);
                data.push((y - b.cy) / b.h);
            }
        }
    }
    Ok(Tensor::new(vec![grid.n * grid.n, k], data)?)
}

/// Soft mask labels `[B, n, n]` for a batch: generator output inside the
/// box, exactly −1 outside. `inputs` are the stacked per-example generator
/// inputs `[B*n*n, k]` and `inside` the stacked indicators `[B, n, n]`.
/// Gradients reach the generator parameters when they are bound as leaves.
pub fn soft_mask_labels(config: &NetConfig, tape: &mut Tape, params: &Bound, inputs: &Tensor, inside: &Tensor) -> Result<Var> {
    let n = config.mask_size;
    let b = inside.shape()[0];
    if inside.shape() != [b, n, n] || inputs.shape()[0] != b * n * n {
        return Err(Error::InvalidInput(format!(
            "soft mask inputs {:?} and indicators {:?} do not describe {b} {n}×{n} grids",
            inputs.shape(),
            inside.shape()
        )));
    }
    let x = tape.constant(inputs.clone());
    let g = generator_forward(config, tape, params, x)?;
    let g = tape.reshape(g, &[b, n, n])?;
    let ins = tape.constant(inside.clone());
    let outside = tape.constant(inside.map(|v| v - 1.0));
    let kept = tape.mul(g, ins)?;
    Ok(tape.add(kept, outside)?)
}

/// Soft mask label for one box, detached from any tape.
pub fn make_soft_mask_label(config: &NetConfig, params: &crate::nets::ModelParams, b: &BBox, grid: &MaskGrid) -> Result<Tensor> {
    let inputs = generator_inputs(b, grid, config.generator_offsets)?;
    let n = grid.n;
    let inside = Tensor::new(vec![1, n, n], grid.inside(b))?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let c = soft_mask_labels(config, &mut tape, &bound, &inputs, &inside)?;
    Ok(tape.value(c).reshaped(&[n, n])?)
}

/// Classification labels `[A, S, S]` in {−1, 0, +1} and regression targets
/// `[4A, S, S]` (channel `4a + k`). The best-matching anchor is forced
/// positive when no anchor clears the positive threshold.
pub fn anchor_labels(b: &BBox, geom: &PatchGeometry) -> Result<(Tensor, Tensor)> {
    if !(b.w > 0.0 && b.h > 0.0) || !b.is_finite() {
        return Err(Error::InvalidInput(format!("degenerate box {b:?}")));
    }
    let (a_n, s) = (geom.anchors.len(), geom.score_size);
    let mut cls = Tensor::zeros(&[a_n, s, s]);
    let mut target = Tensor::zeros(&[4 * a_n, s, s]);
    let mut best = (f64::NEG_INFINITY, 0, 0, 0);
    let mut any_positive = false;
    for a in 0..a_n {
        for row in 0..s {
            for col in 0..s {
                let iou = geom.anchor_box(a, row, col).iou(b);
                if iou > best.0 {
                    best = (iou, a, row, col);
                }
                let label = if iou > POSITIVE_IOU {
                    any_positive = true;
                    1.0
                } else if iou < NEGATIVE_IOU {
                    -1.0
                } else {
                    0.0
                };
                cls.set(&[a, row, col], label);
            }
        }
    }
    if !any_positive {
        let (_, a, row, col) = best;
        cls.set(&[a, row, col], 1.0);
    }
    for a in 0..a_n {
        for row in 0..s {
            for col in 0..s {
                if cls.at(&[a, row, col]) > 0.0 {
                    let anchor = geom.anchor_box(a, row, col);
                    let t = [
                        (b.cx - anchor.cx) / anchor.w,
                        (b.cy - anchor.cy) / anchor.h,
                        (b.w / anchor.w).ln(),
                        (b.h / anchor.h).ln(),
                    ];
                    for (k, v) in t.into_iter().enumerate() {
                        target.set(&[4 * a + k, row, col], v);
                    }
                }
            }
        }
    }
    Ok((cls, target))
}

/// One labeled template/search pair. Boxes are in search-patch pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportExample {
    /// `[T, T]`
    pub template: Tensor,
    /// `[X, X]`
    pub search: Tensor,
    pub bbox: BBox,
    pub cls_label: Tensor,
    pub box_target: Tensor,
    /// Score location `(row, col)` nearest to the box center.
    pub mask_location: (usize, usize),
    /// `[n, n]` indicator of mask cells inside the box.
    pub inside: Tensor,
    /// `[n*n, k]` generator inputs for the soft mask label.
    pub generator_inputs: Tensor,
}

impl SupportExample {
    pub fn new(template: Tensor, search: Tensor, bbox: BBox, config: &NetConfig) -> Result<Self> {
        let (t, x) = (config.template_size, config.search_size);
        if template.shape() != [t, t] || search.shape() != [x, x] {
            return Err(Error::InvalidInput(format!(
                "expected {t}×{t} template and {x}×{x} search, got {:?} and {:?}",
                template.shape(),
                search.shape()
            )));
        }
        let geom = config.geometry();
        let (cls_label, box_target) = anchor_labels(&bbox, &geom)?;
        let mask_location = geom.nearest_cell(bbox.cx, bbox.cy);
        let grid = geom.mask_grid(mask_location.0, mask_location.1);
        let n = config.mask_size;
        let inside = Tensor::new(vec![n, n], grid.inside(&bbox))?;
        let generator_inputs = generator_inputs(&bbox, &grid, config.generator_offsets)?;
        Ok(SupportExample { template, search, bbox, cls_label, box_target, mask_location, inside, generator_inputs })
    }

    pub fn mask_grid(&self, config: &NetConfig) -> MaskGrid {
        config.geometry().mask_grid(self.mask_location.0, self.mask_location.1)
    }
}

/// One draw of the geometric and blur augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
    /// Box-filter side, 1 (none) or 3.
    pub blur: usize,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { flip: false, tx: 0.0, ty: 0.0, scale: 1.0, blur: 1 };
    pub const MAX_SHIFT: f64 = 8.0;
    pub const MAX_TRIES: usize = 10;

    pub fn draw(rng: &mut Rng) -> Self {
        AugmentParams {
            flip: rng.gen_bool(0.5),
            tx: rng.gen_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
            ty: rng.gen_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
            scale: rng.gen_range(0.8..=1.2),
            blur: if rng.gen_bool(0.3) { 3 } else { 1 },
        }
    }

    fn center(size: usize) -> f64 {
        (size as f64 - 1.0) / 2.0
    }

    /// Where a source patch point lands after the transform.
    pub fn forward_point(&self, x: f64, y: f64, size: usize) -> (f64, f64) {
        let c = Self::center(size);
        let x = if self.flip { 2.0 * c - x } else { x };
        (c + self.scale * (x - c) + self.tx, c + self.scale * (y - c) + self.ty)
    }

    /// The source point that lands on `(x, y)`.
    pub fn inverse_point(&self, x: f64, y: f64, size: usize) -> (f64, f64) {
        let c = Self::center(size);
        let sx = c + (x - self.tx - c) / self.scale;
        let sy = c + (y - self.ty - c) / self.scale;
        (if self.flip { 2.0 * c - sx } else { sx }, sy)
    }

    pub fn forward_box(&self, b: &BBox, size: usize) -> BBox {
        let (cx, cy) = self.forward_point(b.cx, b.cy, size);
        BBox { cx, cy, w: b.w * self.scale, h: b.h * self.scale }
    }

    /// Applies the geometric part to a square `size × size` image with
    /// bilinear resampling; uncovered pixels take `fill`.
    pub fn warp(&self, image: &[f64], size: usize, fill: f64) -> Vec<f64> {
        if !self.flip && self.tx == 0.0 && self.ty == 0.0 && self.scale == 1.0 {
            return image.to_vec();
        }
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (sx, sy) = self.inverse_point(x as f64, y as f64, size);
                out.push(sample_bilinear(image, size, size, sx, sy, fill));
            }
        }
        out
    }
}

/// Box filter with edge replication.
pub fn box_blur(image: &[f64], size: usize, k: usize) -> Vec<f64> {
    if k <= 1 {
        return image.to_vec();
    }
    let r = (k / 2) as isize;
    let n = size as isize;
    let mut out = Vec::with_capacity(image.len());
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, n - 1) as usize;
                    let xx = (x + dx).clamp(0, n - 1) as usize;
                    acc += image[yy * size + xx];
                }
            }
            out.push(acc / (k * k) as f64);
        }
    }
    out
}

/// Augments the search patch of `example` and recomputes every label from
/// the transformed box. Draws whose box leaves the patch entirely are
/// redrawn up to [`AugmentParams::MAX_TRIES`] times, then the identity is
/// used.
pub fn augment(example: &SupportExample, config: &NetConfig, rng: &mut Rng) -> Result<SupportExample> {
    let size = config.search_size;
    let mut params = AugmentParams::IDENTITY;
    for _ in 0..AugmentParams::MAX_TRIES {
        let draw = AugmentParams::draw(rng);
        if draw.forward_box(&example.bbox, size).clamped(size, size).is_some() {
            params = draw;
            break;
        }
    }
    augment_with(example, config, &params)
}

pub fn augment_with(example: &SupportExample, config: &NetConfig, params: &AugmentParams) -> Result<SupportExample> {
    let size = config.search_size;
    let fill = example.search.data().iter().sum::<f64>() / example.search.len() as f64;
    let warped = params.warp(example.search.data(), size, fill);
    let blurred = box_blur(&warped, size, params.blur);
    let search = Tensor::new(vec![size, size], blurred)?;
    let bbox = params.forward_box(&example.bbox, size);
    SupportExample::new(example.template.clone(), search, bbox, config)
}

/// Fractional pixel coverage of a box over a `size × size` raster.
pub fn box_coverage(b: &BBox, size: usize) -> Vec<f64> {
    let overlap = |lo: f64, hi: f64, i: usize| {
        let (p0, p1) = (i as f64 - 0.5, i as f64 + 0.5);
        (hi.min(p1) - lo.max(p0)).max(0.0)
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let cy = overlap(b.top(), b.bottom(), y);
        for x in 0..size {
            out.push(cy * overlap(b.left(), b.right(), x));
        }
    }
    out
}

/// Estimates a box from a soft rectangle raster: the center from the first
/// moments, the extents from the largest row and column sums (the rows and
/// columns crossing the flat interior).
pub fn box_from_coverage(mask: &[f64], size: usize) -> Option<BBox> {
    let mut rows = vec![0.0; size];
    let mut cols = vec![0.0; size];
    for y in 0..size {
        for x in 0..size {
            let v = mask[y * size + x];
            rows[y] += v;
            cols[x] += v;
        }
    }
    let m: f64 = rows.iter().sum();
    if m <= 0.0 {
        return None;
    }
    let moment = |p: &[f64]| p.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / m;
    let peak = |p: &[f64]| p.iter().cloned().fold(0.0, f64::max);
    Some(BBox { cx: moment(&cols), cy: moment(&rows), w: peak(&rows), h: peak(&cols) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelParams;
    use crate::rng::Seed;

    fn geom() -> PatchGeometry {
        NetConfig::default().geometry()
    }

    #[test]
    fn prior_peaks_at_center_and_matches_analytic_values() {
        let grid = MaskGrid { left: 0.0, top: 0.0, cell: 1.0, n: 17 };
        let b = BBox { cx: 8.5, cy: 8.5, w: 8.0, h: 8.0 };
        let p = gaussian_prior(&b, &grid).unwrap();
        assert_eq!(p[8 * 17 + 8], 1.0);
        // Cell (8, 12) has its center at x = 12.5 = cx + 2σ.
        assert!((p[8 * 17 + 12] - (-2.0f64).exp()).abs() < 1e-15);
        for r in 0..17 {
            for c in 0..17 {
                assert_eq!(p[r * 17 + c], p[(16 - r) * 17 + (16 - c)]);
                assert!(p[r * 17 + c] > 0.0 && p[r * 17 + c] <= 1.0);
            }
        }
        let tiny = BBox { cx: 4.0, cy: 4.0, w: 0.5, h: 3.0 };
        assert!(gaussian_prior(&tiny, &grid).is_err());
    }

    #[test]
    fn soft_mask_sign_structure() {
        let cfg = NetConfig::default();
        let model = ModelParams::init(cfg.clone(), Seed(2)).unwrap();
        let g = geom();
        let b = BBox { cx: 31.5, cy: 33.0, w: 14.0, h: 18.0 };
        let (row, col) = g.nearest_cell(b.cx, b.cy);
        let grid = g.mask_grid(row, col);
        let c = make_soft_mask_label(&cfg, &model, &b, &grid).unwrap();
        let inside = grid.inside(&b);
        for (v, i) in c.data().iter().zip(&inside) {
            if *i > 0.0 {
                assert!(*v > 0.0 && *v < 1.0);
            } else {
                assert_eq!(*v, -1.0);
            }
        }

        let mut zero = model.clone();
        for name in ["gen.0.weight", "gen.0.bias", "gen.1.weight", "gen.1.bias"] {
            let s = zero.get(name).unwrap().shape().to_vec();
            zero.set(name, Tensor::zeros(&s)).unwrap();
        }
        let c = make_soft_mask_label(&cfg, &zero, &b, &grid).unwrap();
        for (v, i) in c.data().iter().zip(&inside) {
            assert_eq!(*v, if *i > 0.0 { 0.5 } else { -1.0 });
        }
    }

    #[test]
    fn anchor_targets_examples() {
        let g = geom();
        let center = g.location_center(4);
        let b = BBox { cx: center, cy: center, w: 16.0, h: 16.0 };
        let (cls, t) = anchor_labels(&b, &g).unwrap();
        assert_eq!(cls.at(&[0, 4, 4]), 1.0);
        for k in 0..4 {
            assert_eq!(t.at(&[k, 4, 4]), 0.0);
        }
        let wide = BBox { w: 32.0, ..b };
        let (cls, t) = anchor_labels(&wide, &g).unwrap();
        let pos = cls.data().iter().position(|&v| v == 1.0).unwrap();
        let (row, col) = (pos / 9, pos % 9);
        assert!((t.at(&[2, row, col]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(t.at(&[3, row, col]), 0.0);
    }

    #[test]
    fn forced_positive_when_no_anchor_qualifies() {
        let g = geom();
        let b = BBox { cx: 30.0, cy: 30.0, w: 4.0, h: 4.0 };
        let (cls, _) = anchor_labels(&b, &g).unwrap();
        assert_eq!(cls.data().iter().filter(|&&v| v == 1.0).count(), 1);
    }

    fn example() -> SupportExample {
        let cfg = NetConfig::default();
        let template = Tensor::from_fn(&[32, 32], |i| (i % 7) as f64 / 7.0);
        let search = Tensor::from_fn(&[64, 64], |i| ((i * 13) % 11) as f64 / 11.0);
        let b = BBox { cx: 31.5, cy: 31.5, w: 16.0, h: 12.0 };
        SupportExample::new(template, search, b, &cfg).unwrap()
    }

    #[test]
    fn identity_augmentation_is_noop() {
        let cfg = NetConfig::default();
        let ex = example();
        assert_eq!(augment_with(&ex, &cfg, &AugmentParams::IDENTITY).unwrap(), ex);
    }

    #[test]
    fn flip_mirrors_box_and_pixels() {
        let cfg = NetConfig::default();
        let mut ex = example();
        ex.bbox.cx = 20.0;
        let ex = SupportExample::new(ex.template, ex.search, ex.bbox, &cfg).unwrap();
        let flip = AugmentParams { flip: true, ..AugmentParams::IDENTITY };
        let out = augment_with(&ex, &cfg, &flip).unwrap();
        assert_eq!(out.bbox.cx, 63.0 - 20.0);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(out.search.at(&[y, x]), ex.search.at(&[y, 63 - x]));
            }
        }
        let n = cfg.mask_size;
        for r in 0..n {
            for c in 0..n {
                assert_eq!(out.inside.at(&[r, c]), ex.inside.at(&[r, n - 1 - c]));
            }
        }
    }

    #[test]
    fn augmentation_is_deterministic() {
        let cfg = NetConfig::default();
        let ex = example();
        let a = augment(&ex, &cfg, &mut Seed(5).rng()).unwrap();
        let b = augment(&ex, &cfg, &mut Seed(5).rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn moments_recover_box() {
        let b = BBox { cx: 20.3, cy: 30.8, w: 11.4, h: 7.2 };
        let r = box_from_coverage(&box_coverage(&b, 64), 64).unwrap();
        assert!(r.iou(&b) > 0.98, "{r:?}");
    }
}
