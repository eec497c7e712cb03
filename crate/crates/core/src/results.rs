//! Per-sequence tracking result files.
//!
//! A result CSV holds one row per tracked frame. Frames skipped or used for
//! re-initialization under the reset protocol have no row; [`replay`]
//! recovers them from the overlaps with the ground truth. The optional mask
//! sidecar stores the `n×n` mask of each row as little-endian `f32`.

use std::fmt::Write as _;
use std::path::Path;

use metatrack_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nets::NetConfig;
use crate::synthdata::{search_window, Sequence};
use crate::tracker::{FrameResult, ResetProtocol, TrackState, LOW_CONFIDENCE};

pub const HEADER: &str = "frame,cx,cy,w,h,max_score,iou_gt,row,col";

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRow {
    pub frame: usize,
    pub bbox: BBox,
    pub max_score: f64,
    pub iou_gt: f64,
    /// Score-map cell of the mask.
    pub location: (usize, usize),
}

impl TrackRow {
    pub fn of(state: &TrackState, seq: &Sequence) -> TrackRow {
        TrackRow {
            frame: state.frame,
            bbox: state.bbox,
            max_score: state.max_score,
            iou_gt: state.bbox.iou(&seq.boxes[state.frame]),
            location: state.location,
        }
    }
}

pub fn render_rows(rows: &[TrackRow]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in rows {
        let b = &r.bbox;
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
            r.frame, b.cx, b.cy, b.w, b.h, r.max_score, r.iou_gt, r.location.0, r.location.1
        );
    }
    out
}

pub fn parse_rows(text: &str) -> Result<Vec<TrackRow>> {
    let bad = |line: usize, reason: String| Error::InvalidInput(format!("track results line {line}: {reason}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(bad(1, format!("expected header `{HEADER}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(bad(i + 2, format!("expected 9 fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i + 2, format!("invalid number `{}`", f[k])));
        let int = |k: usize| f[k].parse::<usize>().map_err(|_| bad(i + 2, format!("invalid index `{}`", f[k])));
        rows.push(TrackRow {
            frame: int(0)?,
            bbox: BBox { cx: num(1)?, cy: num(2)?, w: num(3)?, h: num(4)? },
            max_score: num(5)?,
            iou_gt: num(6)?,
            location: (int(7)?, int(8)?),
        });
    }
    Ok(rows)
}

pub fn write_rows(rows: &[TrackRow], path: &Path) -> Result<()> {
    std::fs::write(path, render_rows(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<TrackRow>> {
    parse_rows(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_masks(masks: &[&Tensor]) -> Vec<u8> {
    masks.iter().flat_map(|m| m.data().iter().flat_map(|&v| (v as f32).to_le_bytes())).collect()
}

/// Splits a sidecar into `count` masks of `n×n` cells.
pub fn decode_masks(bytes: &[u8], n: usize, count: usize) -> Result<Vec<Tensor>> {
    let block = 4 * n * n;
    if bytes.len() != block * count {
        return Err(Error::Format {
            what: "mask sidecar",
            offset: 0,
            reason: format!("expected {} bytes for {count} masks of {n}x{n}, found {}", block * count, bytes.len()),
        });
    }
    bytes
        .chunks_exact(block)
        .map(|c| {
            let data = c.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            Ok(Tensor::new(vec![n, n], data)?)
        })
        .collect()
}

/// Rows and masks of the tracked frames of a run.
pub fn rows_of(results: &[FrameResult], seq: &Sequence) -> (Vec<TrackRow>, Vec<Tensor>) {
    results.iter().filter_map(FrameResult::state).map(|s| (TrackRow::of(s, seq), s.mask.clone())).unzip()
}

/// Rebuilds per-frame results from stored rows. Crop windows follow from
/// the previous box exactly as during tracking. With `reset`, a row with
/// zero overlap is a failure followed by `delay` skipped frames and one
/// re-initialization frame, none of which may have a row. Without masks the
/// states carry empty masks.
pub fn replay(
    rows: &[TrackRow],
    masks: Option<&[Tensor]>,
    seq: &Sequence,
    config: &NetConfig,
    reset: Option<ResetProtocol>,
) -> Result<Vec<FrameResult>> {
    if let Some(m) = masks {
        if m.len() != rows.len() {
            return Err(Error::InvalidInput(format!("{} masks for {} rows", m.len(), rows.len())));
        }
    }
    let geom = config.geometry();
    let mismatch = |t: usize, reason: &str| Error::InvalidInput(format!("frame {t}: {reason}"));
    let mut out = Vec::with_capacity(seq.len().saturating_sub(1));
    let mut prev = seq.boxes[0];
    let mut next = rows.iter().enumerate().peekable();
    let mut t = 1;
    while t < seq.len() {
        let (i, row) = next.next().ok_or_else(|| mismatch(t, "no result row"))?;
        if row.frame != t {
            return Err(mismatch(t, &format!("row is for frame {}", row.frame)));
        }
        let center = BBox { cx: prev.cx, cy: prev.cy, ..prev };
        let window = search_window(&center, &prev, config);
        let (r, c) = row.location;
        if r >= config.score_size() || c >= config.score_size() {
            return Err(mismatch(t, "mask location outside the score map"));
        }
        let mask = masks.map_or_else(|| Tensor::zeros(&[0]), |m| m[i].clone());
        let failed = row.bbox.iou(&seq.boxes[t]) == 0.0;
        out.push(FrameResult::Tracked(TrackState {
            frame: t,
            p: (row.bbox.cx, row.bbox.cy),
            bbox: row.bbox,
            score_map: Tensor::zeros(&[0]),
            mask,
            max_score: row.max_score,
            low_confidence: row.max_score < LOW_CONFIDENCE,
            location: row.location,
            window,
            grid: geom.mask_grid(r, c),
        }));
        prev = row.bbox;
        t += 1;
        if let (Some(p), true) = (reset, failed) {
            let resume = (t + p.delay).min(seq.len());
            while t < resume {
                out.push(FrameResult::Skipped);
                t += 1;
            }
            if t < seq.len() {
                out.push(FrameResult::Reinit);
                prev = seq.boxes[t];
                t += 1;
            }
            if next.peek().is_some_and(|(_, r)| r.frame < t) {
                return Err(mismatch(t - 1, "row inside the reset gap"));
            }
        }
    }
    if let Some((_, r)) = next.next() {
        return Err(mismatch(r.frame, "row beyond the tracked frames"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![TrackRow {
            frame: 3,
            bbox: BBox { cx: 10.1, cy: 0.3, w: 1.0 / 3.0, h: 7.0 },
            max_score: 0.25,
            iou_gt: 0.0,
            location: (4, 2),
        }];
        assert_eq!(parse_rows(&render_rows(&rows)).unwrap(), rows);
        assert!(parse_rows("frame,cx\n").is_err());
    }

    #[test]
    fn masks_round_trip_and_length_errors() {
        let m = Tensor::from_fn(&[2, 2], |i| i as f64 * 0.25);
        let bytes = encode_masks(&[&m, &m]);
        assert_eq!(decode_masks(&bytes, 2, 2).unwrap(), vec![m.clone(), m]);
        let err = decode_masks(&bytes[..30], 2, 2).unwrap_err().to_string();
        assert!(err.contains("expected 32 bytes"), "{err}");
    }
}
