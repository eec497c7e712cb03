//! Tracking metrics and the evaluation report.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nets::ModelParams;
use crate::rng::Seed;
use crate::synthdata::Sequence;
use crate::tracker::{track_sequence, track_with_resets, FrameResult, ResetProtocol, TrackConfig};

/// Box overlap; see [`BBox::iou`].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Binary mask IoU. Two empty masks agree perfectly.
pub fn mask_iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean over frames of binary mask IoU.
pub fn miou(pred: &[Vec<u8>], gt: &[Vec<u8>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!("{} predicted masks for {} frames", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("no frames to score".into()));
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sum += mask_iou(p, g)?;
    }
    Ok(sum / pred.len() as f64)
}

/// Accuracy over a set of sequences: the mean of per-sequence accuracies.
pub fn accuracy(records: &[SequenceRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.mean_iou_while_tracking).sum::<f64>() / records.len() as f64
}

/// Failures per hundred frames.
pub fn robustness(failures: usize, frames: usize) -> f64 {
    if frames == 0 {
        0.0
    } else {
        100.0 * failures as f64 / frames as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    /// Mean box IoU over scored frames.
    pub mean_iou_while_tracking: f64,
    pub failures: usize,
    /// Frames after the first.
    pub frames: usize,
    /// Mean mask IoU over tracked frames; `None` when the run carries no
    /// masks.
    pub miou: Option<f64>,
}

/// Scores one run. `results` covers frames `1..L`. With `reset`, a tracked
/// frame with zero overlap is a failure, and the `burn_in` frames following
/// each re-initialization are excluded from accuracy. Without it, every
/// entry must be a tracked frame, all frames count towards accuracy, and a
/// failure is each transition from overlap to zero overlap.
pub fn evaluate(
    id: &str,
    results: &[FrameResult],
    seq: &Sequence,
    reset: bool,
    protocol: ResetProtocol,
    mask_threshold: f64,
) -> Result<SequenceRecord> {
    if results.len() + 1 != seq.len() {
        return Err(Error::InvalidInput(format!(
            "{} results for a sequence of {} frames (expected one per frame after the first)",
            results.len(),
            seq.len()
        )));
    }
    let mut scored = Vec::new();
    let mut mask_scores = Vec::new();
    let mut failures = 0;
    let mut since_reinit: Option<usize> = None;
    let mut was_lost = false;
    let mut has_masks = true;
    for (i, r) in results.iter().enumerate() {
        let t = i + 1;
        match r {
            FrameResult::Tracked(st) => {
                if st.frame != t {
                    return Err(Error::InvalidInput(format!("result {i} is for frame {}, expected {t}", st.frame)));
                }
                let o = st.bbox.iou(&seq.boxes[t]);
                if st.mask.is_empty() {
                    has_masks = false;
                } else {
                    let pred = st.frame_mask(seq.width, seq.height, mask_threshold);
                    mask_scores.push(mask_iou(&pred, &seq.masks[t])?);
                }
                if reset {
                    let in_burn_in = since_reinit.is_some_and(|k| k < protocol.burn_in);
                    since_reinit = since_reinit.map(|k| k + 1);
                    if o == 0.0 {
                        failures += 1;
                    } else if !in_burn_in {
                        scored.push(o);
                    }
                } else {
                    if o == 0.0 && !was_lost {
                        failures += 1;
                    }
                    was_lost = o == 0.0;
                    scored.push(o);
                }
            }
            FrameResult::Skipped | FrameResult::Reinit if !reset => {
                return Err(Error::InvalidInput(format!("frame {t} was not tracked in a run without resets")));
            }
            FrameResult::Skipped => {}
            FrameResult::Reinit => since_reinit = Some(0),
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(SequenceRecord {
        id: id.to_string(),
        mean_iou_while_tracking: mean(&scored),
        failures,
        frames: results.len(),
        miou: has_masks.then(|| mean(&mask_scores)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub accuracy: f64,
    pub robustness: f64,
    /// Mean of per-sequence mask IoU; `None` unless every sequence has one.
    pub miou: Option<f64>,
}

impl Aggregate {
    pub fn of(records: &[SequenceRecord]) -> Aggregate {
        let failures = records.iter().map(|r| r.failures).sum();
        let frames = records.iter().map(|r| r.frames).sum();
        let miou = records
            .iter()
            .map(|r| r.miou)
            .sum::<Option<f64>>()
            .map(|s| if records.is_empty() { 0.0 } else { s / records.len() as f64 });
        Aggregate { accuracy: accuracy(records), robustness: robustness(failures, frames), miou }
    }
}

/// Hex SHA-256 of a rendered configuration.
pub fn config_hash(rendered: &str) -> String {
    Sha256::digest(rendered.as_bytes()).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| format!("{v:?}"))
}

/// Tracks every sequence, under the reset protocol when one is given.
/// Sequence `i` uses the seed `seed.index(i)`.
pub fn track_all(
    model: &ModelParams,
    corpus: &[Sequence],
    cfg: &TrackConfig,
    protocol: Option<ResetProtocol>,
    seed: Seed,
) -> Result<Vec<Vec<FrameResult>>> {
    corpus
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let seed = seed.index(i as u64);
            match protocol {
                Some(p) => track_with_resets(model, seq, cfg, p, seed),
                None => Ok(track_sequence(model, seq, cfg, seed)?.states.into_iter().map(FrameResult::Tracked).collect()),
            }
        })
        .collect()
}

/// Tracks every sequence under the reset protocol and scores it; `ids`
/// names the sequences in the records.
pub fn track_corpus(
    model: &ModelParams,
    ids: &[String],
    corpus: &[Sequence],
    cfg: &TrackConfig,
    protocol: ResetProtocol,
    seed: Seed,
) -> Result<Vec<SequenceRecord>> {
    if ids.len() != corpus.len() {
        return Err(Error::InvalidInput(format!("{} ids for {} sequences", ids.len(), corpus.len())));
    }
    let runs = track_all(model, corpus, cfg, Some(protocol), seed)?;
    ids.iter()
        .zip(corpus)
        .zip(&runs)
        .map(|((id, seq), results)| evaluate(id, results, seq, true, protocol, cfg.mask_threshold))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_sequence: Vec<SequenceRecord>,
    pub aggregate: Aggregate,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(per_sequence: Vec<SequenceRecord>, config_hash: String) -> Self {
        let aggregate = Aggregate::of(&per_sequence);
        EvalReport { per_sequence, aggregate, config_hash }
    }

    /// `key = value` lines in a fixed order; floats use the shortest
    /// representation that reads back exactly.
    pub fn structured(&self) -> String {
        let mut out = String::new();
        let a = &self.aggregate;
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "sequences = {}", self.per_sequence.len());
        let _ = writeln!(out, "accuracy = {:?}", a.accuracy);
        let _ = writeln!(out, "robustness = {:?}", a.robustness);
        let _ = writeln!(out, "miou = {}", opt(a.miou));
        for r in &self.per_sequence {
            let _ = writeln!(out, "sequence.{}.mean_iou_while_tracking = {:?}", r.id, r.mean_iou_while_tracking);
            let _ = writeln!(out, "sequence.{}.failures = {}", r.id, r.failures);
            let _ = writeln!(out, "sequence.{}.frames = {}", r.id, r.frames);
            let _ = writeln!(out, "sequence.{}.miou = {}", r.id, opt(r.miou));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>8}", "sequence", "acc", "fail", "frames", "miou");
        for r in &self.per_sequence {
            let miou = r.miou.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
            let _ = writeln!(
                out,
                "{:<12} {:>8.4} {:>8} {:>8} {:>8}",
                r.id, r.mean_iou_while_tracking, r.failures, r.frames, miou
            );
        }
        let a = &self.aggregate;
        let miou = a.miou.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
        let _ = writeln!(out, "accuracy {:.4}  robustness {:.3}  miou {miou}", a.accuracy, a.robustness);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_offset_unit_squares() {
        let a = BBox::from_edges(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_edges(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::from_edges(3.0, 3.0, 4.0, 4.0)), 0.0);
    }

    #[test]
    fn mask_metrics() {
        let gt = vec![vec![1, 1, 0, 0]];
        assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(miou(&[vec![0, 0, 1, 1]], &gt).unwrap(), 0.0);
        assert!((miou(&[vec![0, 1, 1, 0]], &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(miou(&[], &[]).is_err());
    }

    #[test]
    fn two_failures_in_a_hundred_frames() {
        assert_eq!(robustness(2, 100), 2.0);
    }

    #[test]
    fn aggregates_follow_records() {
        let rec = |acc, failures, frames| SequenceRecord { id: "s".into(), mean_iou_while_tracking: acc, failures, frames, miou: Some(acc) };
        let rs = vec![rec(0.5, 1, 29), rec(0.7, 0, 29)];
        let a = Aggregate::of(&rs);
        assert_eq!(a.accuracy, (0.5 + 0.7) / 2.0);
        assert_eq!(a.robustness, 100.0 / 58.0);
        let report = EvalReport::new(rs, config_hash("x = 1\n"));
        assert!(report.structured().starts_with("config_hash = "));
        assert_eq!(report.config_hash.len(), 64);
    }
}
