//! The training-by-adaptation ablation grid.
//!
//! Two models start from the same pretrained weights and receive the same
//! number of further optimizer steps: one keeps pretraining, the other is
//! meta-trained. Each is then tracked on held-out sequences with and without
//! first-frame adaptation.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::{track_corpus, Aggregate, SequenceRecord};
use crate::meta::AdaptHeads;
use crate::nets::ModelParams;
use crate::rng::Seed;
use crate::synthdata::{corpus_seed, generate_sequence, Sequence};
use crate::tracker::TrackConfig;
use crate::train::{train, LogRow, Phase};

/// Margin by which adaptation must raise the accuracy of the meta-trained
/// model.
pub const ADAPT_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Training {
    Pretrain,
    Meta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub training: Training,
    /// Heads adapted on the first frame; `None` without adaptation.
    pub adapt: Option<AdaptHeads>,
    pub aggregate: Aggregate,
    pub failures: usize,
    pub records: Vec<SequenceRecord>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let t = match self.training {
            Training::Pretrain => "pretrain",
            Training::Meta => "meta",
        };
        match self.adapt {
            None => t.to_string(),
            Some(h) => format!("{t}+adapt({})", h.name()),
        }
    }
}

/// Outcome of the directional checks for one adaptation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationChecks {
    pub heads: AdaptHeads,
    /// Adaptation helps the meta-trained model by at least [`ADAPT_MARGIN`].
    pub meta_gains: bool,
    /// Adaptation does not reduce the failures of the pretrained model.
    pub pretrain_not_more_robust: bool,
    /// The meta-trained, adapted tracker is strictly the most accurate of
    /// the four runs of this mode.
    pub meta_adapt_best: bool,
}

impl AblationChecks {
    pub fn all(&self) -> bool {
        self.meta_gains && self.pretrain_not_more_robust && self.meta_adapt_best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    /// Unadapted rows first, then one pair of adapted rows per mode.
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    fn row(&self, training: Training, adapt: Option<AdaptHeads>) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.training == training && r.adapt == adapt)
    }

    /// Adaptation modes present in the grid, in row order.
    pub fn modes(&self) -> Vec<AdaptHeads> {
        let mut out = Vec::new();
        for h in self.rows.iter().filter_map(|r| r.adapt) {
            if !out.contains(&h) {
                out.push(h);
            }
        }
        out
    }

    /// Checks for one mode; `None` if the grid lacks a run of it.
    pub fn checks(&self, heads: AdaptHeads) -> Option<AblationChecks> {
        let grid = [
            self.row(Training::Pretrain, None)?,
            self.row(Training::Pretrain, Some(heads))?,
            self.row(Training::Meta, None)?,
            self.row(Training::Meta, Some(heads))?,
        ];
        let [pre, pre_adapt, meta, meta_adapt] = grid;
        let best = meta_adapt.aggregate.accuracy;
        Some(AblationChecks {
            heads,
            meta_gains: best >= meta.aggregate.accuracy + ADAPT_MARGIN,
            pretrain_not_more_robust: pre_adapt.failures >= pre.failures,
            meta_adapt_best: grid[..3].iter().all(|r| best > r.aggregate.accuracy),
        })
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<26} {:>9} {:>11} {:>9}\n", "model", "accuracy", "robustness", "failures");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<26} {:>9.4} {:>11.3} {:>9}",
                r.label(),
                r.aggregate.accuracy,
                r.aggregate.robustness,
                r.failures
            );
        }
        out
    }
}

/// Tracks the held-out corpus with both models, without adaptation and
/// with each of `modes`. Without adaptation the tracker runs on the slow
/// head weights.
pub fn run_grid(
    pretrained: &ModelParams,
    meta: &ModelParams,
    ids: &[String],
    held_out: &[Sequence],
    cfg: &RunConfig,
    modes: &[AdaptHeads],
    seed: Seed,
) -> Result<Ablation> {
    let settings: Vec<Option<AdaptHeads>> = std::iter::once(None).chain(modes.iter().copied().map(Some)).collect();
    let mut rows = Vec::with_capacity(2 * settings.len());
    for adapt in settings {
        for (training, model) in [(Training::Pretrain, pretrained), (Training::Meta, meta)] {
            let track = match adapt {
                None => TrackConfig { adapt_steps: 0, ..cfg.track.clone() },
                Some(h) => TrackConfig { adapt_heads: h, ..cfg.track.clone() },
            };
            let records = track_corpus(model, ids, held_out, &track, cfg.reset, seed.child("track"))?;
            rows.push(AblationRow {
                training,
                adapt,
                aggregate: Aggregate::of(&records),
                failures: records.iter().map(|r| r.failures).sum(),
                records,
            });
        }
    }
    Ok(Ablation { rows })
}

/// `count` sequences generated from `seed.child(label)`, named
/// `<label>_0000`, `<label>_0001`, ...
pub fn generated_corpus(cfg: &RunConfig, label: &str, count: usize) -> Result<(Vec<String>, Vec<Sequence>)> {
    let root = Seed(cfg.seed).child(label).0;
    let seqs = (0..count).map(|i| generate_sequence(corpus_seed(root, i), &cfg.data)).collect::<Result<_>>()?;
    Ok(((0..count).map(|i| format!("{label}_{i:04}")).collect(), seqs))
}

/// The two models of the grid and their training logs.
pub struct TrainedPair {
    pub pretrained: ModelParams,
    pub meta: ModelParams,
    pub pretrain_log: Vec<LogRow>,
    pub meta_log: Vec<LogRow>,
}

/// Pretrains for `schedule.pretrain_steps`, then branches: the baseline
/// continues pretraining for `schedule.meta_steps` more steps and the other
/// copy is meta-trained for the same number of steps.
pub fn train_pair(cfg: &RunConfig, corpus: &[Sequence], seed: Seed, mut progress: impl FnMut(&str, &LogRow)) -> Result<TrainedPair> {
    let s = &cfg.schedule;
    let mut base = ModelParams::init(cfg.net.clone(), seed.child("init"))?;
    let mut pretrain_log =
        train(&mut base, corpus, &cfg.meta, Phase::Pretrain, s.pretrain_steps, s.pretrain_lr, seed, |r| progress("pretrain", r))?;
    let mut meta = base.clone();
    let meta_log = train(&mut meta, corpus, &cfg.meta, Phase::Meta, s.meta_steps, s.pretrain_lr, seed, |r| progress("meta", r))?;
    let more = train(&mut base, corpus, &cfg.meta, Phase::Pretrain, s.meta_steps, s.pretrain_lr, seed.child("continue"), |r| {
        progress("pretrain-continued", r)
    })?;
    let offset = pretrain_log.len();
    pretrain_log.extend(more.into_iter().map(|r| LogRow { step: r.step + offset, ..r }));
    Ok(TrainedPair { pretrained: base, meta, pretrain_log, meta_log })
}
