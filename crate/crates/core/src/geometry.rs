//! Boxes, crops, and the mapping between search patches, score locations
//! and mask grids.
//!
//! Coordinates follow the pixel-index convention: pixel `i` has its center
//! at `i` and covers `[i - 0.5, i + 0.5]`. A box covering pixels `x0..=x1`
//! has `cx = (x0 + x1) / 2` and `w = x1 - x0 + 1`.

use crate::error::{Error, Result};

/// Axis-aligned box given by center and extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        if !(w > 0.0 && h > 0.0) || !b.is_finite() {
            return Err(Error::InvalidInput(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    /// Tight box around the inclusive pixel range `x0..=x1`, `y0..=y1`.
    pub fn from_pixel_bounds(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox {
            cx: (x0 + x1) as f64 / 2.0,
            cy: (y0 + y1) as f64 / 2.0,
            w: (x1 - x0 + 1) as f64,
            h: (y1 - y0 + 1) as f64,
        }
    }

    /// Box from edge coordinates.
    pub fn from_edges(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        BBox { cx: (left + right) / 2.0, cy: (top + bottom) / 2.0, w: right - left, h: bottom - top }
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Whether a point lies strictly inside the box.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() < self.w / 2.0 && (y - self.cy).abs() < self.h / 2.0
    }

    /// Intersection over union; 0 for disjoint or degenerate boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.left().max(other.left())).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.top().max(other.top())).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Intersection with the image rectangle of the given size. `None` when
    /// nothing of the box remains inside.
    pub fn clamped(&self, width: usize, height: usize) -> Option<BBox> {
        let left = self.left().max(-0.5);
        let right = self.right().min(width as f64 - 0.5);
        let top = self.top().max(-0.5);
        let bottom = self.bottom().min(height as f64 - 0.5);
        (right > left && bottom > top).then(|| BBox::from_edges(left, top, right, bottom))
    }

    /// Geometric-mean extent, the scale used for context crops.
    pub fn scale(&self) -> f64 {
        (self.w * self.h).sqrt()
    }
}

/// A square crop of a frame resampled to `size × size` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    /// Crop center in frame coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Side of the crop in frame pixels.
    pub side: f64,
    /// Side of the resampled patch in pixels.
    pub size: usize,
}

impl CropWindow {
    /// Crop centered on `center_of` whose side is `context` times the box
    /// scale.
    pub fn around(center_of: &BBox, scale_box: &BBox, context: f64, size: usize) -> Self {
        CropWindow { cx: center_of.cx, cy: center_of.cy, side: context * scale_box.scale(), size }
    }

    /// Patch pixels per frame pixel.
    pub fn zoom(&self) -> f64 {
        self.size as f64 / self.side
    }

    fn half(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    pub fn frame_to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        let z = self.zoom();
        ((x - self.cx) * z + self.half(), (y - self.cy) * z + self.half())
    }

    pub fn patch_to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        let z = self.zoom();
        ((x - self.half()) / z + self.cx, (y - self.half()) / z + self.cy)
    }

    pub fn box_to_patch(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.frame_to_patch(b.cx, b.cy);
        BBox { cx, cy, w: b.w * self.zoom(), h: b.h * self.zoom() }
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.patch_to_frame(b.cx, b.cy);
        BBox { cx, cy, w: b.w / self.zoom(), h: b.h / self.zoom() }
    }
}

/// An `n × n` grid of square cells laid over a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskGrid {
    /// Top-left corner (edge coordinates) in patch pixels.
    pub left: f64,
    pub top: f64,
    /// Cell side in patch pixels.
    pub cell: f64,
    pub n: usize,
}

impl MaskGrid {
    /// Center of cell (`row`, `col`) in patch coordinates.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (self.left + (col as f64 + 0.5) * self.cell, self.top + (row as f64 + 0.5) * self.cell)
    }

    /// Box in patch coordinates covering the inclusive cell range.
    pub fn cells_to_box(&self, row0: usize, col0: usize, row1: usize, col1: usize) -> BBox {
        BBox::from_edges(
            self.left + col0 as f64 * self.cell,
            self.top + row0 as f64 * self.cell,
            self.left + (col1 + 1) as f64 * self.cell,
            self.top + (row1 + 1) as f64 * self.cell,
        )
    }

    /// Binary indicator of cells whose centers lie strictly inside `b`.
    pub fn inside(&self, b: &BBox) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n);
        for row in 0..self.n {
            for col in 0..self.n {
                let (x, y) = self.cell_center(row, col);
                out.push(if b.contains(x, y) { 1.0 } else { 0.0 });
            }
        }
        out
    }
}

/// Fixed geometry shared by labels, losses and the tracker: how score-map
/// locations and mask windows sit inside a search patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGeometry {
    pub template_size: usize,
    pub search_size: usize,
    /// Search-patch pixels per score-map step.
    pub stride: usize,
    pub score_size: usize,
    pub mask_size: usize,
    /// Anchor extents `(w, h)` in search-patch pixels.
    pub anchors: Vec<(f64, f64)>,
}

impl PatchGeometry {
    fn offset(&self) -> f64 {
        (self.search_size as f64 - 1.0) / 2.0 - self.stride as f64 * (self.score_size as f64 - 1.0) / 2.0
    }

    /// Patch coordinate of the center of score location `u` along one axis.
    pub fn location_center(&self, u: usize) -> f64 {
        self.offset() + (self.stride * u) as f64
    }

    /// Score location whose center is nearest to patch coordinate `x`.
    pub fn nearest_location(&self, x: f64) -> usize {
        let u = ((x - self.offset()) / self.stride as f64).round();
        u.clamp(0.0, (self.score_size - 1) as f64) as usize
    }

    /// Score location `(row, col)` nearest to a patch point.
    pub fn nearest_cell(&self, x: f64, y: f64) -> (usize, usize) {
        (self.nearest_location(y), self.nearest_location(x))
    }

    /// The mask window predicted at score location (`row`, `col`): a
    /// template-sized square centered on the location.
    pub fn mask_grid(&self, row: usize, col: usize) -> MaskGrid {
        let t = self.template_size as f64;
        MaskGrid {
            left: self.location_center(col) - t / 2.0,
            top: self.location_center(row) - t / 2.0,
            cell: t / self.mask_size as f64,
            n: self.mask_size,
        }
    }

    /// Anchor `a` placed at score location (`row`, `col`).
    pub fn anchor_box(&self, a: usize, row: usize, col: usize) -> BBox {
        let (w, h) = self.anchors[a];
        BBox { cx: self.location_center(col), cy: self.location_center(row), w, h }
    }

    /// Cosine (Hann) window over the score map, peaking at the center.
    pub fn cosine_window(&self) -> Vec<f64> {
        let s = self.score_size;
        let hann: Vec<f64> = (0..s)
            .map(|i| {
                if s == 1 {
                    1.0
                } else {
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 1.0) / (s as f64 + 1.0)).cos()
                }
            })
            .collect();
        let mut out = Vec::with_capacity(s * s);
        for r in 0..s {
            for c in 0..s {
                out.push(hann[r] * hann[c]);
            }
        }
        out
    }
}

/// Bilinear sample of a row-major image; `fill` outside the image.
pub fn sample_bilinear(image: &[f64], width: usize, height: usize, x: f64, y: f64, fill: f64) -> f64 {
    if !(x > -1.0 && y > -1.0 && x < width as f64 && y < height as f64) {
        return fill;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= width as f64 || yi >= height as f64 {
            fill
        } else {
            image[yi as usize * width + xi as usize]
        }
    };
    let top = if fx == 0.0 { at(x0, y0) } else { at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 { at(x0, y0 + 1.0) } else { at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx };
    top * (1.0 - fy) + bottom * fy
}

/// Resamples a square crop of a frame; pixels outside the frame take `fill`.
pub fn crop_image(frame: &[f64], width: usize, height: usize, window: &CropWindow, fill: f64) -> Vec<f64> {
    let n = window.size;
    let mut out = Vec::with_capacity(n * n);
    for py in 0..n {
        for px in 0..n {
            let (fx, fy) = window.patch_to_frame(px as f64, py as f64);
            out.push(sample_bilinear(frame, width, height, fx, fy, fill));
        }
    }
    out
}
