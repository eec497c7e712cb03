//! Losses, inner-loop head adaptation, and the outer meta-update.
//!
//! Only head weights adapt in the inner loop. The outer gradient of the
//! heads, their normalization affines and the generator is exact: it is
//! taken through the recorded inner update. The backbone gets the
//! first-order gradient, because support features are computed from a
//! constant copy of the backbone and only the query path sees the live
//! parameters.

use std::collections::BTreeMap;

use metatrack_autodiff::{Tape, Tensor, Var};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labels::{soft_mask_labels, SupportExample};
use crate::nets::{
    backbone_forward, channel_correlation, is_adaptable, mask_at_locations, score_and_box, stack_images, Bound,
    FastWeights, ModelParams, NetConfig, ParamGroup,
};
use crate::synthdata::QueryExample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub boxreg: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 1.0, boxreg: 1.0, mask: 2.0 }
    }
}

/// Which head parameters adapt in the inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptHeads {
    All,
    MaskOnly,
}

impl AdaptHeads {
    pub fn name(self) -> &'static str {
        match self {
            AdaptHeads::All => "all",
            AdaptHeads::MaskOnly => "mask_only",
        }
    }

    pub fn selects(self, name: &str) -> bool {
        is_adaptable(name) && (self == AdaptHeads::All || name.starts_with("mask."))
    }
}

impl std::str::FromStr for AdaptHeads {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(AdaptHeads::All),
            "mask_only" => Ok(AdaptHeads::MaskOnly),
            _ => Err(Error::Config(format!("adapt_heads must be all or mask_only, got {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    /// Inner step size.
    pub alpha: f64,
    /// Outer learning rate of backbone and heads.
    pub gamma: f64,
    pub momentum: f64,
    /// Outer learning rate of the generator.
    pub eta: f64,
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub loss_weights: LossWeights,
    pub adapt_heads: AdaptHeads,
    /// Largest global norm of an applied gradient; longer gradients are
    /// rescaled. Zero disables clipping.
    pub clip_norm: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.001,
            gamma: 0.001,
            momentum: 0.9,
            eta: 0.001,
            inner_steps: 1,
            tasks_per_batch: 4,
            support_size: 10,
            query_size: 10,
            loss_weights: LossWeights::default(),
            adapt_heads: AdaptHeads::All,
            clip_norm: 10.0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.alpha, self.gamma, self.eta];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || self.gamma <= 0.0 || self.eta <= 0.0 {
            return Err(Error::Config("step sizes must be finite, learning rates positive".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("clip_norm must be finite and non-negative, got {}", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.inner_steps == 0 || self.tasks_per_batch == 0 || self.support_size == 0 || self.query_size == 0 {
            return Err(Error::Config("inner_steps, tasks_per_batch, support and query sizes must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub cls: f64,
    pub boxreg: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossBundle {
    fn mean(items: &[LossBundle]) -> LossBundle {
        let n = items.len().max(1) as f64;
        let mut out = LossBundle::default();
        for b in items {
            out.cls += b.cls / n;
            out.boxreg += b.boxreg / n;
            out.mask += b.mask / n;
            out.total += b.total / n;
        }
        out
    }
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls: Var,
    pub boxreg: Var,
    pub mask: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBundle {
        let v = |x: Var| tape.value(x).data()[0];
        LossBundle { cls: v(self.cls), boxreg: v(self.boxreg), mask: v(self.mask), total: v(self.total) }
    }
}

/// Stacked examples with precomputed loss weights.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[1, 1, T, T]` when every template is identical, else `[B, 1, T, T]`.
    pub templates: Tensor,
    pub searches: Tensor,
    pub locations: Vec<(usize, usize)>,
    /// Weights of `softplus(-score)` at positive cells.
    pub positive_weight: Tensor,
    /// Weights of `softplus(score)` at negative cells.
    pub negative_weight: Tensor,
    pub box_target: Tensor,
    pub box_weight: Tensor,
    /// `[B, n, n]`
    pub inside: Tensor,
    /// `[B*n*n, k]`
    pub generator_inputs: Tensor,
    /// `[B, n, n]` ground-truth mask labels in {−1, +1}, for query batches.
    pub mask_label: Option<Tensor>,
    pub positives: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn support(examples: &[SupportExample]) -> Result<Batch> {
        Self::build(examples.iter().collect(), None)
    }

    pub fn query(examples: &[QueryExample]) -> Result<Batch> {
        let masks: Vec<&Tensor> = examples.iter().map(|q| &q.mask).collect();
        Self::build(examples.iter().map(|q| &q.example).collect(), Some(masks))
    }

    fn build(examples: Vec<&SupportExample>, masks: Option<Vec<&Tensor>>) -> Result<Batch> {
        let first = examples.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let b = examples.len();
        let shared = examples.iter().all(|e| e.template == first.template);
        let templates = if shared {
            stack_images(&[&first.template])?
        } else {
            stack_images(&examples.iter().map(|e| &e.template).collect::<Vec<_>>())?
        };
        let searches = stack_images(&examples.iter().map(|e| &e.search).collect::<Vec<_>>())?;

        let cls_shape: Vec<usize> = std::iter::once(b).chain(first.cls_label.shape().iter().copied()).collect();
        let per = first.cls_label.len();
        let mut pos_w = Vec::with_capacity(b * per);
        let mut neg_w = Vec::with_capacity(b * per);
        let anchors = first.cls_label.shape()[0];
        let cells = per / anchors;
        let mut box_w = Vec::with_capacity(4 * b * per);
        let mut positives = 0;
        for e in &examples {
            let labels = e.cls_label.data();
            let np = labels.iter().filter(|&&v| v > 0.0).count();
            let nn = labels.iter().filter(|&&v| v < 0.0).count();
            positives += np;
            for &v in labels {
                pos_w.push(if v > 0.0 { 0.5 / (np as f64 * b as f64) } else { 0.0 });
                neg_w.push(if v < 0.0 { 0.5 / (nn as f64 * b as f64) } else { 0.0 });
            }
            for a in 0..anchors {
                for _ in 0..4 {
                    for cell in 0..cells {
                        let v = labels[a * cells + cell];
                        box_w.push(if v > 0.0 { 1.0 / (4.0 * np as f64 * b as f64) } else { 0.0 });
                    }
                }
            }
        }
        let mut box_shape = cls_shape.clone();
        box_shape[1] *= 4;
        let concat = |ts: Vec<&Tensor>, shape: Vec<usize>| -> Result<Tensor> {
            let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
            Ok(Tensor::new(shape, data)?)
        };
        let n = first.inside.shape()[0];
        let k = first.generator_inputs.shape()[1];
        let mask_label = match masks {
            Some(m) => Some(concat(m, vec![b, n, n])?.map(|v| 2.0 * v - 1.0)),
            None => None,
        };
        Ok(Batch {
            templates,
            searches,
            locations: examples.iter().map(|e| e.mask_location).collect(),
            positive_weight: Tensor::new(cls_shape.clone(), pos_w)?,
            negative_weight: Tensor::new(cls_shape, neg_w)?,
            box_target: concat(examples.iter().map(|e| &e.box_target).collect(), box_shape.clone())?,
            box_weight: Tensor::new(box_shape, box_w)?,
            inside: concat(examples.iter().map(|e| &e.inside).collect(), vec![b, n, n])?,
            generator_inputs: concat(examples.iter().map(|e| &e.generator_inputs).collect(), vec![b * n * n, k])?,
            mask_label,
            positives,
        })
    }
}

/// Correlation maps `[B, C, S, S]` of a batch under the given parameters.
pub fn correlation(config: &NetConfig, tape: &mut Tape, params: &Bound, batch: &Batch) -> Result<Var> {
    let z = tape.constant(batch.templates.clone());
    let x = tape.constant(batch.searches.clone());
    let zf = backbone_forward(config, tape, params, z)?;
    let xf = backbone_forward(config, tape, params, x)?;
    channel_correlation(tape, zf, xf)
}

/// Mean over the grid of `softplus(-c * y)`.
pub fn seg_adaptation_loss(tape: &mut Tape, logits: Var, c: Var) -> Result<Var> {
    if tape.shape(logits) != tape.shape(c) {
        return Err(Error::InvalidInput(format!(
            "mask logits {:?} and labels {:?} differ in shape",
            tape.shape(logits),
            tape.shape(c)
        )));
    }
    let z = tape.mul(c, logits)?;
    let z = tape.neg(z)?;
    let l = tape.softplus(z)?;
    Ok(tape.mean(l)?)
}

fn weighted_sum(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p)?)
}

/// `0.5 d² if |d| < 1 else |d| - 0.5`, elementwise.
fn smooth_l1(tape: &mut Tape, d: Var) -> Result<Var> {
    let pos = tape.relu(d)?;
    let nd = tape.neg(d)?;
    let neg = tape.relu(nd)?;
    let a = tape.add(pos, neg)?;
    let ones = tape.constant(Tensor::ones(tape.shape(a)));
    let excess = tape.sub(a, ones)?;
    let excess = tape.relu(excess)?;
    let q = tape.sub(a, excess)?;
    let q2 = tape.mul(q, q)?;
    let quad = tape.scale(q2, 0.5)?;
    let lin = tape.sub(a, q)?;
    Ok(tape.add(quad, lin)?)
}

/// Weighted classification, box and mask losses of head outputs computed
/// from `r` under `params`. `mask_label` is `[B, n, n]`.
pub fn head_losses(
    config: &NetConfig,
    tape: &mut Tape,
    params: &Bound,
    r: Var,
    batch: &Batch,
    mask_label: Var,
    weights: &LossWeights,
) -> Result<LossVars> {
    let (score, boxreg) = score_and_box(config, tape, params, r)?;
    let ns = tape.neg(score)?;
    let lp = tape.softplus(ns)?;
    let ln = tape.softplus(score)?;
    let cp = weighted_sum(tape, lp, &batch.positive_weight)?;
    let cn = weighted_sum(tape, ln, &batch.negative_weight)?;
    let cls = tape.add(cp, cn)?;

    let target = tape.constant(batch.box_target.clone());
    let d = tape.sub(boxreg, target)?;
    let l = smooth_l1(tape, d)?;
    let boxreg = weighted_sum(tape, l, &batch.box_weight)?;

    let logits = mask_at_locations(config, tape, params, r, &batch.locations)?;
    let mask = seg_adaptation_loss(tape, logits, mask_label)?;

    let a = tape.scale(cls, weights.cls)?;
    let b = tape.scale(boxreg, weights.boxreg)?;
    let c = tape.scale(mask, weights.mask)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossVars { cls, boxreg, mask, total })
}

/// One gradient step `w - alpha * dL/dw` for each of `weights`. With
/// `create_graph` the step is recorded; otherwise the new weights are fresh
/// leaves holding the stepped values.
pub fn gradient_step(
    tape: &mut Tape,
    loss: Var,
    names: &[String],
    weights: &[Var],
    alpha: f64,
    create_graph: bool,
) -> Result<Vec<Var>> {
    let grads = tape.backward(loss, weights, create_graph)?;
    let mut out = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let g = grads.get(w).expect("gradient for every requested weight");
        let gv = tape.value(g);
        if !gv.all_finite() {
            return Err(Error::NonFinite { name: names[i].clone(), norm: gv.norm() });
        }
        let next = if create_graph {
            let step = tape.scale(g, alpha)?;
            tape.sub(w, step)?
        } else {
            let (wv, gv) = (tape.value(w), tape.value(g));
            let data = wv.data().iter().zip(gv.data()).map(|(a, b)| a - alpha * b).collect();
            let t = Tensor::new(wv.shape().to_vec(), data)?;
            tape.leaf(t)
        };
        out.push(next);
    }
    Ok(out)
}

/// Result of an inner loop: adapted weights and the support loss before
/// each step and after the last.
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub fast: FastWeights,
    pub losses: Vec<LossBundle>,
}

/// `steps` gradient steps on the selected head weights against the support
/// loss. `r` are support correlation maps and `mask_label` the soft labels.
#[allow(clippy::too_many_arguments)]
pub fn inner_update(
    config: &NetConfig,
    tape: &mut Tape,
    params: &Bound,
    r: Var,
    batch: &Batch,
    mask_label: Var,
    weights: &LossWeights,
    alpha: f64,
    steps: usize,
    create_graph: bool,
    adapt: AdaptHeads,
) -> Result<InnerResult> {
    let names: Vec<String> = params.vars().keys().filter(|n| adapt.selects(n)).cloned().collect();
    let mut vars = params.select(&names)?;
    let mut losses = Vec::with_capacity(steps + 1);
    let fast = |vars: &[Var]| FastWeights {
        vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        graph_attached: create_graph,
    };
    for _ in 0..steps {
        let current = params.overridden(&fast(&vars));
        let l = head_losses(config, tape, &current, r, batch, mask_label, weights)?;
        losses.push(l.values(tape));
        vars = gradient_step(tape, l.total, &names, &vars, alpha, create_graph)?;
    }
    Ok(InnerResult { fast: fast(&vars), losses })
}

/// Support loss under the given head weights, evaluated without recording
/// gradients beyond the forward pass.
pub fn support_loss(
    config: &NetConfig,
    tape: &mut Tape,
    params: &Bound,
    r: Var,
    batch: &Batch,
    mask_label: Var,
    weights: &LossWeights,
) -> Result<LossBundle> {
    Ok(head_losses(config, tape, params, r, batch, mask_label, weights)?.values(tape))
}

/// Gradients of one task and its loss values.
#[derive(Debug, Clone)]
pub struct TaskGradients {
    pub grads: BTreeMap<String, Tensor>,
    /// Support loss before adaptation.
    pub support: LossBundle,
    /// Query loss under the adapted weights.
    pub query: LossBundle,
}

fn is_backbone(name: &str) -> bool {
    ParamGroup::of(name) == Some(ParamGroup::Backbone)
}

struct MetaForward {
    params: Bound,
    support: LossBundle,
    query: LossVars,
}

/// How the adapted heads depend on the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FastPath {
    /// Support features use a constant copy of the backbone; the inner
    /// steps are recorded when `create_graph` is set.
    FrozenBackbone { create_graph: bool },
    /// Support features use the live backbone and the adapted heads are
    /// cut from the graph after the inner loop.
    Detached,
}

/// Records the meta-objective of one task: inner adaptation from the
/// support set, then the query loss under the adapted heads.
fn meta_forward(
    model: &ModelParams,
    tape: &mut Tape,
    support: &[SupportExample],
    query: &[QueryExample],
    cfg: &MetaConfig,
    path: FastPath,
) -> Result<MetaForward> {
    let config = model.config();
    let params = model.bind(tape, |_| true);
    let sb = Batch::support(support)?;
    let qb = Batch::query(query)?;

    let (rs, create_graph) = match path {
        FastPath::FrozenBackbone { create_graph } => {
            let frozen = params.frozen(tape, is_backbone);
            (correlation(config, tape, &frozen, &sb)?, create_graph)
        }
        FastPath::Detached => (correlation(config, tape, &params, &sb)?, true),
    };
    let c = soft_mask_labels(config, tape, &params, &sb.generator_inputs, &sb.inside)?;
    let inner = inner_update(
        config,
        tape,
        &params,
        rs,
        &sb,
        c,
        &cfg.loss_weights,
        cfg.alpha,
        cfg.inner_steps,
        create_graph,
        cfg.adapt_heads,
    )?;

    let mut fast = inner.fast;
    if path == FastPath::Detached {
        for v in fast.vars.values_mut() {
            *v = tape.detach(*v);
        }
        fast.graph_attached = false;
    }
    let rq = correlation(config, tape, &params, &qb)?;
    let adapted = params.overridden(&fast);
    let label = tape.constant(qb.mask_label.clone().expect("query batch has masks"));
    let query = head_losses(config, tape, &adapted, rq, &qb, label, &cfg.loss_weights)?;
    Ok(MetaForward { params, support: inner.losses[0], query })
}

/// Query loss after inner adaptation, without outer gradients.
pub fn adapted_query_loss(model: &ModelParams, support: &[SupportExample], query: &[QueryExample], cfg: &MetaConfig) -> Result<LossBundle> {
    let mut tape = Tape::new();
    let f = meta_forward(model, &mut tape, support, query, cfg, FastPath::FrozenBackbone { create_graph: false })?;
    Ok(f.query.values(&tape))
}

fn all_gradients(tape: &mut Tape, f: &MetaForward) -> Result<BTreeMap<String, Tensor>> {
    let leaves: Vec<Var> = f.params.vars().values().copied().collect();
    let g = tape.backward(f.query.total, &leaves, false)?;
    Ok(f.params.vars().iter().map(|(n, &v)| (n.clone(), tape.value(g.get(v).expect("requested")).clone())).collect())
}

/// Outer gradients of one task: inner adaptation with a recorded graph,
/// query loss under the adapted heads, and one backward pass over every
/// parameter.
pub fn task_gradients(model: &ModelParams, support: &[SupportExample], query: &[QueryExample], cfg: &MetaConfig) -> Result<TaskGradients> {
    let mut tape = Tape::new();
    let f = meta_forward(model, &mut tape, support, query, cfg, FastPath::FrozenBackbone { create_graph: true })?;
    let grads = all_gradients(&mut tape, &f)?;
    Ok(TaskGradients { grads, support: f.support, query: f.query.values(&tape) })
}

/// Gradients of the query loss with the adapted heads explicitly detached
/// after an inner loop on live backbone features. The backbone entries
/// equal those of [`task_gradients`]; the head and generator entries lose
/// their path through the inner loop.
pub fn detached_task_gradients(
    model: &ModelParams,
    support: &[SupportExample],
    query: &[QueryExample],
    cfg: &MetaConfig,
) -> Result<BTreeMap<String, Tensor>> {
    let mut tape = Tape::new();
    let f = meta_forward(model, &mut tape, support, query, cfg, FastPath::Detached)?;
    all_gradients(&mut tape, &f)
}

/// Plain supervised gradients of the query loss under the slow weights;
/// the generator is not involved.
pub fn supervised_gradients(model: &ModelParams, query: &[QueryExample], weights: &LossWeights) -> Result<TaskGradients> {
    let config = model.config();
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, |n| ParamGroup::of(n) != Some(ParamGroup::Generator));
    let qb = Batch::query(query)?;
    let rq = correlation(config, &mut tape, &params, &qb)?;
    let label = tape.constant(qb.mask_label.clone().expect("query batch has masks"));
    let ql = head_losses(config, &mut tape, &params, rq, &qb, label, weights)?;
    let query = ql.values(&tape);
    let leaves: Vec<Var> = params.vars().values().copied().collect();
    let g = tape.backward(ql.total, &leaves, false)?;
    let grads = params
        .vars()
        .iter()
        .map(|(n, &v)| (n.clone(), tape.value(g.get(v).expect("requested")).clone()))
        .collect();
    Ok(TaskGradients { grads, support: query, query })
}

/// SGD with momentum: `v = mu v + g; p -= lr v`.
#[derive(Debug, Clone, Default)]
pub struct Momentum {
    pub velocity: BTreeMap<String, Tensor>,
}

impl Momentum {
    pub fn step(&mut self, model: &mut ModelParams, grads: &BTreeMap<String, Tensor>, momentum: f64, lr: impl Fn(&str) -> f64) -> Result<()> {
        for (name, g) in grads {
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = momentum * *vi + gi;
            }
            let rate = lr(name);
            let p = model.get(name).ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
            let data = p.data().iter().zip(v.data()).map(|(p, v)| p - rate * v).collect();
            let updated = Tensor::new(p.shape().to_vec(), data)?;
            model.set(name, updated)?;
        }
        Ok(())
    }
}

/// Summary of one optimizer step; gradient norms are taken before
/// clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub support: LossBundle,
    pub query: LossBundle,
    pub grad_norm_theta: f64,
    pub grad_norm_heads: f64,
    pub grad_norm_zeta: f64,
    /// Tasks dropped for a non-finite loss or gradient.
    pub skipped: usize,
}

fn group_norm(grads: &BTreeMap<String, Tensor>, pick: impl Fn(&str) -> bool) -> f64 {
    grads.iter().filter(|(n, _)| pick(n)).map(|(_, g)| g.norm().powi(2)).sum::<f64>().sqrt()
}

/// Averages per-task gradients in task order, dropping failed tasks.
fn reduce(results: Vec<Result<TaskGradients>>) -> Result<(BTreeMap<String, Tensor>, Vec<TaskGradients>, usize)> {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r {
            Ok(t) if t.query.total.is_finite() && t.grads.values().all(Tensor::all_finite) => kept.push(t),
            Ok(_) | Err(Error::NonFinite { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::InvalidInput(format!("all {skipped} tasks of the batch produced non-finite values")));
    }
    let mut mean: BTreeMap<String, Tensor> = BTreeMap::new();
    let scale = 1.0 / kept.len() as f64;
    for t in &kept {
        for (name, g) in &t.grads {
            let acc = mean.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }
    Ok((mean, kept, skipped))
}

fn report(mean: &BTreeMap<String, Tensor>, kept: &[TaskGradients], skipped: usize) -> StepReport {
    let support: Vec<LossBundle> = kept.iter().map(|t| t.support).collect();
    let query: Vec<LossBundle> = kept.iter().map(|t| t.query).collect();
    StepReport {
        support: LossBundle::mean(&support),
        query: LossBundle::mean(&query),
        grad_norm_theta: group_norm(mean, is_backbone),
        grad_norm_heads: group_norm(mean, |n| matches!(ParamGroup::of(n), Some(ParamGroup::Head(_)))),
        grad_norm_zeta: group_norm(mean, |n| ParamGroup::of(n) == Some(ParamGroup::Generator)),
        skipped,
    }
}

/// Rescales `grads` so their joint norm is at most `max_norm` (no-op when
/// `max_norm` is zero).
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = group_norm(grads, |_| true);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// A task as support and query examples.
pub type TaskData = (Vec<SupportExample>, Vec<QueryExample>);

/// One meta-update over a batch of tasks. Task gradients may be computed in
/// parallel; they are averaged in task order, so results do not depend on
/// scheduling.
pub fn outer_step(model: &mut ModelParams, opt: &mut Momentum, tasks: &[TaskData], cfg: &MetaConfig) -> Result<StepReport> {
    cfg.validate()?;
    let results: Vec<Result<TaskGradients>> =
        tasks.par_iter().map(|(s, q)| task_gradients(model, s, q, cfg)).collect();
    let (mut mean, kept, skipped) = reduce(results)?;
    let summary = report(&mean, &kept, skipped);
    clip_global_norm(&mut mean, cfg.clip_norm);
    let (gamma, eta) = (cfg.gamma, cfg.eta);
    opt.step(model, &mean, cfg.momentum, |n| if ParamGroup::of(n) == Some(ParamGroup::Generator) { eta } else { gamma })?;
    Ok(summary)
}

/// One supervised update on the query examples of each task with slow
/// weights; the generator stays fixed.
pub fn pretrain_step(model: &mut ModelParams, opt: &mut Momentum, tasks: &[TaskData], lr: f64, cfg: &MetaConfig) -> Result<StepReport> {
    cfg.validate()?;
    let results: Vec<Result<TaskGradients>> =
        tasks.par_iter().map(|(_, q)| supervised_gradients(model, q, &cfg.loss_weights)).collect();
    let (mut mean, kept, skipped) = reduce(results)?;
    mean.retain(|n, _| ParamGroup::of(n) != Some(ParamGroup::Generator));
    let summary = report(&mean, &kept, skipped);
    clip_global_norm(&mut mean, cfg.clip_norm);
    opt.step(model, &mean, cfg.momentum, |_| lr)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &mut Tape, v: f64) -> Var {
        tape.leaf(Tensor::from_vec(vec![v]))
    }

    #[test]
    fn seg_loss_values_and_gradients() {
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::zeros(&[1, 2, 2]));
        let c = tape.constant(Tensor::ones(&[1, 2, 2]));
        let l = seg_adaptation_loss(&mut tape, y, c).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(l, &[y], false).unwrap().get(y).unwrap();
        // Mean over four cells scales the per-cell derivative −0.5.
        assert!(tape.value(g).data().iter().all(|&v| v == -0.5 / 4.0));
    }

    #[test]
    fn smooth_l1_matches_definition() {
        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::from_vec(vec![-3.0, -0.5, 0.0, 0.25, 2.0]));
        let l = smooth_l1(&mut tape, d).unwrap();
        assert_eq!(tape.value(l).data(), &[2.5, 0.125, 0.0, 0.03125, 1.5]);
    }

    #[test]
    fn gradient_step_on_quadratic() {
        let mut tape = Tape::new();
        let phi = scalar(&mut tape, 0.0);
        let three = tape.constant(Tensor::from_vec(vec![3.0]));
        let d = tape.sub(phi, three).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let l = tape.sum(sq).unwrap();
        let next = gradient_step(&mut tape, l, &["phi".into()], &[phi], 0.1, false).unwrap();
        assert!((tape.value(next[0]).data()[0] - 0.6).abs() < 1e-15);
        let same = gradient_step(&mut tape, l, &["phi".into()], &[phi], 0.0, true).unwrap();
        assert_eq!(tape.value(same[0]).data(), &[0.0]);
    }

    #[test]
    fn momentum_update() {
        let mut model = ModelParams::init(NetConfig::tiny(), crate::rng::Seed(1)).unwrap();
        let before = model.get("gen.1.bias").unwrap().data()[0];
        let mut grads = BTreeMap::new();
        grads.insert("gen.1.bias".to_string(), Tensor::from_vec(vec![1.0]));
        let mut opt = Momentum::default();
        opt.step(&mut model, &grads, 0.9, |_| 0.1).unwrap();
        opt.step(&mut model, &grads, 0.9, |_| 0.1).unwrap();
        let after = model.get("gen.1.bias").unwrap().data()[0];
        assert!((before - after - 0.1 * (1.0 + 1.9)).abs() < 1e-12);
    }
}
