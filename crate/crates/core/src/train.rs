//! Training loops over a sequence corpus and the CSV training log.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::meta::{outer_step, pretrain_step, MetaConfig, Momentum, StepReport, TaskData};
use crate::nets::ModelParams;
use crate::rng::{Rng, Seed};
use crate::synthdata::{make_task, Sequence};

pub const LOG_HEADER: &str = "step,cls,box,mask,total,query_total,grad_norm_theta,grad_norm_heads,grad_norm_zeta";

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Supervised query loss under the slow weights.
    Pretrain,
    /// Query loss after the inner update.
    Meta,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub report: StepReport,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        let s = &r.support;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, s.cls, s.boxreg, s.mask, s.total, r.query.total, r.grad_norm_theta, r.grad_norm_heads, r.grad_norm_zeta
        )
    }
}

pub fn render_log(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.csv_line());
    }
    out
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    std::fs::write(path, render_log(rows)).map_err(|e| Error::io(path, e))
}

/// Samples `cfg.tasks_per_batch` tasks, each from a sequence chosen
/// uniformly at random.
pub fn sample_tasks(model: &ModelParams, corpus: &[Sequence], cfg: &MetaConfig, rng: &mut Rng) -> Result<Vec<TaskData>> {
    use rand::Rng as _;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    (0..cfg.tasks_per_batch)
        .map(|_| {
            let seq = &corpus[rng.gen_range(0..corpus.len())];
            let task = make_task(seq, cfg.support_size, cfg.query_size, model.config(), rng)?;
            Ok((task.support, task.query))
        })
        .collect()
}

/// Runs `steps` optimizer steps in place and returns one log row per step.
/// `lr` is the pretraining learning rate and is ignored in the meta phase.
/// `progress` sees every row as it is produced.
pub fn train(
    model: &mut ModelParams,
    corpus: &[Sequence],
    cfg: &MetaConfig,
    phase: Phase,
    steps: usize,
    lr: f64,
    seed: Seed,
    mut progress: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let mut rng = seed.child(match phase {
        Phase::Pretrain => "pretrain",
        Phase::Meta => "meta-train",
    })
    .rng();
    let mut opt = Momentum::default();
    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        let tasks = sample_tasks(model, corpus, cfg, &mut rng)?;
        let report = match phase {
            Phase::Pretrain => pretrain_step(model, &mut opt, &tasks, lr, cfg)?,
            Phase::Meta => outer_step(model, &mut opt, &tasks, cfg)?,
        };
        let row = LogRow { step, report };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}
