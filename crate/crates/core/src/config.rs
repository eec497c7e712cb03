//! Run configuration: `key = value` lines with `#` comments.
//!
//! Every key is optional; unknown or repeated keys are errors. The
//! canonical rendering lists every key in a fixed order and parses back to
//! the same configuration, so its digest identifies a run.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::meta::{LossWeights, MetaConfig};
use crate::nets::NetConfig;
use crate::synthdata::SeqParams;
use crate::tracker::{ResetProtocol, TrackConfig};

/// Training and corpus sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub meta_steps: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { pretrain_steps: 200, pretrain_lr: 0.003, meta_steps: 150, train_sequences: 100, test_sequences: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub meta: MetaConfig,
    pub track: TrackConfig,
    pub reset: ResetProtocol,
    pub data: SeqParams,
    pub schedule: Schedule,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_anchors(key: &str, value: &str) -> Result<Vec<(f64, f64)>> {
    value
        .split(',')
        .map(|a| {
            let (w, h) = a
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("{key}: expected WxH entries, got `{a}`")))?;
            Ok((parse(key, w)?, parse(key, h)?))
        })
        .collect()
}

fn join<T: std::fmt::Debug>(items: &[T]) -> String {
    items.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        let mut eta_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: key {key} given twice", i + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
            eta_set |= key == "meta.eta";
            seen.push(key.to_string());
        }
        if !eta_set {
            cfg.meta.eta = cfg.meta.gamma;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.meta.validate()?;
        self.track.validate()?;
        self.data.validate()?;
        let s = &self.schedule;
        if !(s.pretrain_lr > 0.0 && s.pretrain_lr.is_finite()) {
            return Err(Error::Config("schedule.pretrain_lr must be positive".into()));
        }
        if s.train_sequences == 0 || s.test_sequences == 0 {
            return Err(Error::Config("corpus sizes must be at least 1".into()));
        }
        if self.data.length < self.meta.query_size + 1 {
            return Err(Error::Config(format!(
                "data.length {} leaves too few frames for {} queries",
                self.data.length, self.meta.query_size
            )));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (n, m, t, d, s) = (&mut self.net, &mut self.meta, &mut self.track, &mut self.data, &mut self.schedule);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "net.template_size" => n.template_size = parse(key, v)?,
            "net.search_size" => n.search_size = parse(key, v)?,
            "net.backbone_channels" => n.backbone_channels = parse_list(key, v)?,
            "net.backbone_strides" => n.backbone_strides = parse_list(key, v)?,
            "net.head_hidden" => n.head_hidden = parse(key, v)?,
            "net.anchors" => n.anchors = parse_anchors(key, v)?,
            "net.mask_size" => n.mask_size = parse(key, v)?,
            "net.generator_hidden" => n.generator_hidden = parse(key, v)?,
            "net.generator_offsets" => n.generator_offsets = parse(key, v)?,
            "meta.alpha" => m.alpha = parse(key, v)?,
            "meta.gamma" => m.gamma = parse(key, v)?,
            "meta.momentum" => m.momentum = parse(key, v)?,
            "meta.eta" => m.eta = parse(key, v)?,
            "meta.inner_steps" => m.inner_steps = parse(key, v)?,
            "meta.tasks_per_batch" => m.tasks_per_batch = parse(key, v)?,
            "meta.support_size" => m.support_size = parse(key, v)?,
            "meta.query_size" => m.query_size = parse(key, v)?,
            "meta.adapt_heads" => m.adapt_heads = v.parse()?,
            "meta.clip_norm" => m.clip_norm = parse(key, v)?,
            "loss.cls" => set_weight(&mut m.loss_weights, &mut t.loss_weights, |w| &mut w.cls, parse(key, v)?),
            "loss.box" => set_weight(&mut m.loss_weights, &mut t.loss_weights, |w| &mut w.boxreg, parse(key, v)?),
            "loss.mask" => set_weight(&mut m.loss_weights, &mut t.loss_weights, |w| &mut w.mask, parse(key, v)?),
            "track.n_aug" => t.n_aug = parse(key, v)?,
            "track.adapt_steps" => t.adapt_steps = parse(key, v)?,
            "track.adapt_alpha" => t.adapt_alpha = parse(key, v)?,
            "track.adapt_heads" => t.adapt_heads = v.parse()?,
            "track.mask_threshold" => t.mask_threshold = parse(key, v)?,
            "track.cosine_influence" => t.cosine_influence = parse(key, v)?,
            "track.scale_damping" => t.scale_damping = parse(key, v)?,
            "reset.delay" => self.reset.delay = parse(key, v)?,
            "reset.burn_in" => self.reset.burn_in = parse(key, v)?,
            "data.length" => d.length = parse(key, v)?,
            "data.height" => d.height = parse(key, v)?,
            "data.width" => d.width = parse(key, v)?,
            "data.distractors" => d.distractors = parse(key, v)?,
            "data.motion" => d.motion = parse(key, v)?,
            "data.deform" => d.deform = parse(key, v)?,
            "schedule.pretrain_steps" => s.pretrain_steps = parse(key, v)?,
            "schedule.pretrain_lr" => s.pretrain_lr = parse(key, v)?,
            "schedule.meta_steps" => s.meta_steps = parse(key, v)?,
            "schedule.train_sequences" => s.train_sequences = parse(key, v)?,
            "schedule.test_sequences" => s.test_sequences = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key in canonical order.
    pub fn render(&self) -> String {
        let (n, m, t, d, s) = (&self.net, &self.meta, &self.track, &self.data, &self.schedule);
        let w = &m.loss_weights;
        let anchors: Vec<String> = n.anchors.iter().map(|(a, b)| format!("{a:?}x{b:?}")).collect();
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("net.template_size", n.template_size.to_string()),
            ("net.search_size", n.search_size.to_string()),
            ("net.backbone_channels", join(&n.backbone_channels)),
            ("net.backbone_strides", join(&n.backbone_strides)),
            ("net.head_hidden", n.head_hidden.to_string()),
            ("net.anchors", anchors.join(",")),
            ("net.mask_size", n.mask_size.to_string()),
            ("net.generator_hidden", n.generator_hidden.to_string()),
            ("net.generator_offsets", n.generator_offsets.to_string()),
            ("meta.alpha", format!("{:?}", m.alpha)),
            ("meta.gamma", format!("{:?}", m.gamma)),
            ("meta.momentum", format!("{:?}", m.momentum)),
            ("meta.eta", format!("{:?}", m.eta)),
            ("meta.inner_steps", m.inner_steps.to_string()),
            ("meta.tasks_per_batch", m.tasks_per_batch.to_string()),
            ("meta.support_size", m.support_size.to_string()),
            ("meta.query_size", m.query_size.to_string()),
            ("meta.adapt_heads", m.adapt_heads.name().to_string()),
            ("meta.clip_norm", format!("{:?}", m.clip_norm)),
            ("loss.cls", format!("{:?}", w.cls)),
            ("loss.box", format!("{:?}", w.boxreg)),
            ("loss.mask", format!("{:?}", w.mask)),
            ("track.n_aug", t.n_aug.to_string()),
            ("track.adapt_steps", t.adapt_steps.to_string()),
            ("track.adapt_alpha", format!("{:?}", t.adapt_alpha)),
            ("track.adapt_heads", t.adapt_heads.name().to_string()),
            ("track.mask_threshold", format!("{:?}", t.mask_threshold)),
            ("track.cosine_influence", format!("{:?}", t.cosine_influence)),
            ("track.scale_damping", format!("{:?}", t.scale_damping)),
            ("reset.delay", self.reset.delay.to_string()),
            ("reset.burn_in", self.reset.burn_in.to_string()),
            ("data.length", d.length.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.distractors", d.distractors.to_string()),
            ("data.motion", format!("{:?}", d.motion)),
            ("data.deform", format!("{:?}", d.deform)),
            ("schedule.pretrain_steps", s.pretrain_steps.to_string()),
            ("schedule.pretrain_lr", format!("{:?}", s.pretrain_lr)),
            ("schedule.meta_steps", s.meta_steps.to_string()),
            ("schedule.train_sequences", s.train_sequences.to_string()),
            ("schedule.test_sequences", s.test_sequences.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Loss weights are shared by training and online adaptation.
fn set_weight(a: &mut LossWeights, b: &mut LossWeights, field: impl Fn(&mut LossWeights) -> &mut f64, v: f64) {
    *field(a) = v;
    *field(b) = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::AdaptHeads;

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.meta.eta = 0.002;
        c.net.anchors = vec![(16.0, 16.0), (12.0, 20.5)];
        c.track.adapt_heads = AdaptHeads::MaskOnly;
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn comments_defaults_and_eta() {
        let c = RunConfig::parse("# a comment\n\nmeta.gamma = 0.01  # trailing\n").unwrap();
        assert_eq!(c.meta.gamma, 0.01);
        assert_eq!(c.meta.eta, 0.01);
        assert_eq!(c.track, TrackConfig::default());
    }

    #[test]
    fn bad_input_is_rejected() {
        for text in ["meta.alhpa = 0.1", "meta.alpha", "meta.alpha = x", "seed = 1\nseed = 2", "meta.gamma = 0"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
