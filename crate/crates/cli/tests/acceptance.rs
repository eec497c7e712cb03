//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The empirical criteria (6 and 7) are reported but only fail the run when
//! `ACCEPTANCE_STRICT` is set; every other criterion always does.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use metatrack::ablation::{generated_corpus, run_grid, train_pair};
use metatrack::config::RunConfig;
use metatrack::eval::{accuracy, evaluate, iou, miou, robustness, Aggregate};
use metatrack::geometry::{CropWindow, MaskGrid};
use metatrack::gradsuite::{tiny_task, CHECK_ALPHA};
use metatrack::meta::{detached_task_gradients, gradient_step, seg_adaptation_loss, task_gradients, AdaptHeads, MetaConfig};
use metatrack::nets::ParamGroup;
use metatrack::synthdata::{generate_sequence, SeqParams, Sequence};
use metatrack::tracker::{online_adapt, FrameResult, ResetProtocol, TrackState};
use metatrack::{BBox, Seed};
use metatrack_autodiff::{Tape, Tensor};
use rand::Rng;

const BIN: &str = env!("CARGO_BIN_EXE_metatrack");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn metatrack(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let out = metatrack(&["gradcheck", "--seed", "7"]);
    let elapsed = start.elapsed();
    let ok = out.status.success() && elapsed <= Duration::from_secs(300);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last = stdout.lines().last().unwrap_or("").to_string();
    verdict(ok, format!("{last}, exit {:?}, {:.0?}", out.status.code(), elapsed))
}

fn maml_oracle() -> Verdict {
    let mut tape = Tape::new();
    let phi = tape.leaf(Tensor::from_vec(vec![0.0]));
    let loss = |tape: &mut Tape, w, y: f64| {
        let t = tape.constant(Tensor::from_vec(vec![y]));
        let d = tape.sub(w, t).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.scale(s, 0.5).unwrap()
    };
    let ls = loss(&mut tape, phi, 1.0);
    let fast = gradient_step(&mut tape, ls, &["phi".into()], &[phi], 0.1, true).unwrap()[0];
    let lq = loss(&mut tape, fast, 2.0);
    let g = tape.backward(lq, &[phi], false).unwrap().get(phi).unwrap();
    let (adapted, grad) = (tape.value(fast).data()[0], tape.value(g).data()[0]);
    let ok = (adapted - 0.1).abs() <= 1e-12 && (grad + 1.71).abs() <= 1e-12;
    verdict(ok, format!("phi* = {adapted}, outer gradient = {grad}"))
}

fn seg_loss_gradient() -> Verdict {
    let grad = |c: f64, y: f64| {
        let mut tape = Tape::new();
        let logit = tape.leaf(Tensor::new(vec![1, 1, 1], vec![y]).unwrap());
        let label = tape.constant(Tensor::new(vec![1, 1, 1], vec![c]).unwrap());
        let l = seg_adaptation_loss(&mut tape, logit, label).unwrap();
        let g = tape.backward(l, &[logit], false).unwrap().get(logit).unwrap();
        tape.value(g).data()[0]
    };
    let zero = [-3.0, 0.0, 2.5].iter().all(|&y| grad(0.0, y) == 0.0);
    let inside = grad(1.0, 0.0);
    let outside = grad(-1.0, 0.0);
    let signs = [-2.0, 0.0, 1.5].iter().all(|&y| grad(1.0, y) < 0.0 && grad(-1.0, y) > 0.0);
    let ok = zero && inside == -0.5 && outside == 0.5 && signs;
    verdict(ok, format!("c=0 zero: {zero}; c=1: {inside}; c=-1: {outside}; opposite signs: {signs}"))
}

fn generator_norm(grads: &BTreeMap<String, Tensor>) -> (f64, bool) {
    let g: Vec<&Tensor> = grads.iter().filter(|(n, _)| ParamGroup::of(n) == Some(ParamGroup::Generator)).map(|(_, t)| t).collect();
    let norm = g.iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt();
    (norm, g.iter().all(|t| t.data().iter().all(|&v| v == 0.0)))
}

fn generator_liveness() -> Verdict {
    let mut ok = true;
    let mut smallest = f64::INFINITY;
    for seed in 0..10 {
        let (model, support, query) = tiny_task(seed).unwrap();
        let cfg = MetaConfig { support_size: 2, query_size: 2, ..MetaConfig::default() };
        for alpha in [MetaConfig::default().alpha, CHECK_ALPHA] {
            let (norm, _) = generator_norm(&task_gradients(&model, &support, &query, &MetaConfig { alpha, ..cfg.clone() }).unwrap().grads);
            smallest = smallest.min(norm);
            ok &= norm > 0.0;
        }
        let (_, zero) = generator_norm(&task_gradients(&model, &support, &query, &MetaConfig { alpha: 0.0, ..cfg }).unwrap().grads);
        ok &= zero;
    }
    verdict(ok, format!("10 tasks; smallest norm for alpha > 0: {smallest:.3e}; alpha = 0 exactly zero: {ok}"))
}

fn first_order_theta() -> Verdict {
    let mut identical = true;
    let mut nonzero = true;
    for seed in 0..20 {
        let (model, support, query) = tiny_task(seed).unwrap();
        let cfg = MetaConfig { alpha: CHECK_ALPHA, support_size: 2, query_size: 2, ..MetaConfig::default() };
        let recorded = task_gradients(&model, &support, &query, &cfg).unwrap().grads;
        let detached = detached_task_gradients(&model, &support, &query, &cfg).unwrap();
        for (name, g) in recorded.iter().filter(|(n, _)| ParamGroup::of(n) == Some(ParamGroup::Backbone)) {
            identical &= g.data().iter().zip(detached[name].data()).all(|(a, b)| a.to_bits() == b.to_bits());
            nonzero &= g.norm() > 0.0;
        }
    }
    verdict(identical && nonzero, format!("20 tasks; bit-identical: {identical}; nonzero: {nonzero}"))
}

struct Trained {
    cfg: RunConfig,
    ids: Vec<String>,
    held_out: Vec<Sequence>,
    meta: metatrack::nets::ModelParams,
}

fn ablation() -> (Verdict, Trained) {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let (_, train) = generated_corpus(&cfg, "train", cfg.schedule.train_sequences).unwrap();
    let (ids, held_out) = generated_corpus(&cfg, "test", cfg.schedule.test_sequences).unwrap();
    let pair = train_pair(&cfg, &train, Seed(cfg.seed), |_, _| {}).unwrap();
    let modes = [AdaptHeads::All, AdaptHeads::MaskOnly];
    let grid = run_grid(&pair.pretrained, &pair.meta, &ids, &held_out, &cfg, &modes, Seed(cfg.seed)).unwrap();
    let elapsed = start.elapsed();
    for line in grid.table().lines() {
        println!("    {line}");
    }
    let mut ok = elapsed <= Duration::from_secs(1800);
    let mut parts = Vec::new();
    for h in modes {
        let c = grid.checks(h).unwrap();
        ok &= c.all();
        parts.push(format!("[{}] a {} b {} c {}", h.name(), c.meta_gains, c.pretrain_not_more_robust, c.meta_adapt_best));
    }
    let v = verdict(ok, format!("{}; {:.0?}", parts.join("; "), elapsed));
    (v, Trained { cfg, ids, held_out, meta: pair.meta })
}

fn adaptation_improvement(t: &Trained) -> Verdict {
    let cfg = &t.cfg.track;
    let mut good = 0;
    let mut ratios = Vec::new();
    for (i, seq) in t.held_out.iter().enumerate() {
        let a = online_adapt(&t.meta, seq, 0, &seq.boxes[0], cfg, Seed(t.cfg.seed).child("fixture").index(i as u64)).unwrap();
        let ratio = a.losses.last().unwrap().total / a.losses[0].total;
        good += usize::from(ratio <= 0.7);
        ratios.push(ratio);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    verdict(good >= 45, format!("{good}/{} fixtures at or below 0.7 (mean ratio {mean:.3}, alpha {}, n_aug {})", t.ids.len(), cfg.adapt_alpha, cfg.n_aug))
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let list = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let (la, lb) = (list(a), list(b));
    la == lb && la.iter().all(|n| std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap())
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let small = p("small.cfg");
    std::fs::write(&small, "data.length = 8\nmeta.tasks_per_batch = 2\nmeta.support_size = 2\nmeta.query_size = 2\ntrack.n_aug = 4\ntrack.adapt_steps = 3\n").unwrap();
    let run = |args: &[&str]| assert!(metatrack(args).status.success(), "metatrack {args:?} failed");
    for k in ["a", "b"] {
        run(&["gen-data", "--n", "50", "--seed", "1", "--out", &p(&format!("corpus_{k}"))]);
    }
    let data = same_tree(&dir.path().join("corpus_a"), &dir.path().join("corpus_b"));
    run(&["gen-data", "--config", &small, "--n", "3", "--seed", "2", "--out", &p("small")]);
    let manifest = p("small/manifest.txt");
    for k in ["a", "b"] {
        let (ckpt, log) = (p(&format!("meta_{k}.mtck")), p(&format!("meta_{k}.csv")));
        run(&["meta-train", "--config", &small, "--seed", "3", "--corpus", &manifest, "--steps", "3", "--out", &ckpt, "--log", &log]);
    }
    let read = |s: &str| std::fs::read(p(s)).unwrap();
    let train = read("meta_a.mtck") == read("meta_b.mtck") && read("meta_a.csv") == read("meta_b.csv");
    for k in ["a", "b"] {
        run(&["track", "--config", &small, "--seed", "4", "--corpus", &manifest, "--model", &p("meta_a.mtck"), "--dump-masks", "--out", &p(&format!("track_{k}"))]);
    }
    let track = same_tree(&dir.path().join("track_a"), &dir.path().join("track_b"));
    verdict(data && train && track, format!("gen-data {data}, meta-train {train}, track {track}"))
}

fn raster_area(l: f64, t: f64, r: f64, b: f64, other: Option<(f64, f64, f64, f64)>) -> usize {
    let mut n = 0;
    for i in 0..80 {
        for j in 0..80 {
            let (x, y) = (0.125 + 0.25 * i as f64, 0.125 + 0.25 * j as f64);
            let inside = |(l, t, r, b): (f64, f64, f64, f64)| x > l && x < r && y > t && y < b;
            if inside((l, t, r, b)) && other.is_none_or(inside) {
                n += 1;
            }
        }
    }
    n
}

fn metric_arithmetic() -> Verdict {
    let mut rng = Seed(9).rng();
    let mut worst = 0.0f64;
    let edge = |rng: &mut metatrack::rng::Rng| 0.25 * rng.gen_range(0..60) as f64;
    for _ in 0..100 {
        let side = |rng: &mut metatrack::rng::Rng| {
            let (x, y) = (edge(rng), edge(rng));
            (x, y, x + 0.25 * rng.gen_range(1..20) as f64, y + 0.25 * rng.gen_range(1..20) as f64)
        };
        let (a, b) = (side(&mut rng), side(&mut rng));
        let inter = raster_area(a.0, a.1, a.2, a.3, Some(b)) as f64;
        let union = raster_area(a.0, a.1, a.2, a.3, None) as f64 + raster_area(b.0, b.1, b.2, b.3, None) as f64 - inter;
        let got = iou(&BBox::from_edges(a.0, a.1, a.2, a.3), &BBox::from_edges(b.0, b.1, b.2, b.3));
        worst = worst.max((got - inter / union).abs());
    }
    let iou_err = worst;

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let frames = rng.gen_range(1..6);
        let (w, h) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let p_on = rng.gen_range(0.0..1.0);
        let mask = |rng: &mut metatrack::rng::Rng| (0..w * h).map(|_| u8::from(rng.gen_bool(p_on))).collect::<Vec<u8>>();
        let pred: Vec<Vec<u8>> = (0..frames).map(|_| mask(&mut rng)).collect();
        let gt: Vec<Vec<u8>> = (0..frames).map(|_| mask(&mut rng)).collect();
        let mut total = 0.0;
        for (p, g) in pred.iter().zip(&gt) {
            let (mut both, mut any) = (0, 0);
            for y in 0..h {
                for x in 0..w {
                    let (a, b) = (p[y * w + x] == 1, g[y * w + x] == 1);
                    both += usize::from(a && b);
                    any += usize::from(a || b);
                }
            }
            total += if any == 0 { 1.0 } else { both as f64 / any as f64 };
        }
        worst = worst.max((miou(&pred, &gt).unwrap() - total / frames as f64).abs());
    }
    let miou_err = worst;

    let (acc_err, rob_err) = protocol_cases(&mut rng);
    let ok = iou_err <= 1e-9 && miou_err <= 1e-9 && acc_err <= 1e-9 && rob_err <= 1e-9;
    verdict(ok, format!("max errors: iou {iou_err:.1e}, miou {miou_err:.1e}, accuracy {acc_err:.1e}, robustness {rob_err:.1e}"))
}

fn state(frame: usize, bbox: BBox) -> TrackState {
    TrackState {
        frame,
        p: (bbox.cx, bbox.cy),
        bbox,
        score_map: Tensor::zeros(&[0]),
        mask: Tensor::zeros(&[0]),
        max_score: 1.0,
        low_confidence: false,
        location: (0, 0),
        window: CropWindow { cx: 0.0, cy: 0.0, side: 1.0, size: 1 },
        grid: MaskGrid { left: 0.0, top: 0.0, cell: 1.0, n: 1 },
    }
}

/// Random runs under the reset protocol, scored by `evaluate` and by a
/// direct reading of the protocol over frame indices.
fn protocol_cases(rng: &mut metatrack::rng::Rng) -> (f64, f64) {
    let protocol = ResetProtocol::default();
    let base = generate_sequence(11, &SeqParams { length: 40, ..SeqParams::default() }).unwrap();
    let (mut acc_err, mut rob_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let count = rng.gen_range(1..5);
        let mut records = Vec::new();
        let (mut ious_all, mut failures_all, mut frames_all) = (Vec::new(), 0usize, 0usize);
        for _ in 0..count {
            let len = rng.gen_range(2..=base.len());
            let seq = Sequence {
                frames: base.frames[..len].to_vec(),
                masks: base.masks[..len].to_vec(),
                boxes: base.boxes[..len].to_vec(),
                ..base.clone()
            };
            let p_fail = rng.gen_range(0.0..0.3);
            let mut results = Vec::new();
            let mut t = 1;
            while t < len {
                let gt = seq.boxes[t];
                let fail = rng.gen_bool(p_fail);
                let shift = if fail { 1000.0 } else { rng.gen_range(-0.5..0.5) * gt.w };
                results.push(FrameResult::Tracked(state(t, BBox { cx: gt.cx + shift, ..gt })));
                t += 1;
                if fail {
                    for _ in 0..protocol.delay {
                        if t < len {
                            results.push(FrameResult::Skipped);
                            t += 1;
                        }
                    }
                    if t < len {
                        results.push(FrameResult::Reinit);
                        t += 1;
                    }
                }
            }
            // Frames at index k (frame k + 1) are scored when tracked, not
            // failed, and more than burn_in entries past the last reinit.
            let mut last_reinit: Option<usize> = None;
            let (mut scored, mut failures) = (Vec::new(), 0);
            for (k, r) in results.iter().enumerate() {
                match r {
                    FrameResult::Reinit => last_reinit = Some(k),
                    FrameResult::Skipped => {}
                    FrameResult::Tracked(s) => {
                        let o = s.bbox.iou(&seq.boxes[k + 1]);
                        let warm = last_reinit.is_some_and(|r| k - r <= protocol.burn_in);
                        if o == 0.0 {
                            failures += 1;
                        } else if !warm {
                            scored.push(o);
                        }
                    }
                }
            }
            ious_all.push(if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 });
            failures_all += failures;
            frames_all += len - 1;
            records.push(evaluate("s", &results, &seq, true, protocol, 0.5).unwrap());
        }
        let agg = Aggregate::of(&records);
        let acc_ref = ious_all.iter().sum::<f64>() / count as f64;
        let rob_ref = 100.0 * failures_all as f64 / frames_all as f64;
        acc_err = acc_err.max((agg.accuracy - acc_ref).abs()).max((accuracy(&records) - acc_ref).abs());
        let summed = robustness(records.iter().map(|r| r.failures).sum(), records.iter().map(|r| r.frames).sum());
        rob_err = rob_err.max((agg.robustness - rob_ref).abs()).max((summed - rob_ref).abs());
    }
    (acc_err, rob_err)
}

fn main() {
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some();
    let mut hard_failures = 0;
    let mut report = |n: usize, name: &str, v: Verdict, empirical: bool| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {status} {name}: {}", v.detail);
        if !v.pass && (strict || !empirical) {
            hard_failures += 1;
        }
    };
    report(1, "gradient suite", gradient_suite(), false);
    report(2, "1-D MAML oracle", maml_oracle(), false);
    report(3, "segmentation loss gradient", seg_loss_gradient(), false);
    report(4, "generator path liveness", generator_liveness(), false);
    report(5, "first-order backbone gradient", first_order_theta(), false);
    let (v, trained) = ablation();
    report(6, "ablation direction", v, true);
    report(7, "online adaptation improvement", adaptation_improvement(&trained), true);
    report(8, "determinism", determinism(), false);
    report(9, "metric arithmetic", metric_arithmetic(), false);
    if hard_failures > 0 {
        eprintln!("{hard_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
