use metatrack::config::RunConfig;
use metatrack::eval::{evaluate, track_all};
use metatrack::geometry::{CropWindow, MaskGrid};
use metatrack::meta::MetaConfig;
use metatrack::nets::{is_adaptable, ModelParams, NetConfig, ParamGroup};
use metatrack::results::{decode_masks, encode_masks, parse_rows, render_rows, replay, rows_of};
use metatrack::synthdata::{generate_sequence, SeqParams, Sequence};
use metatrack::tracker::{largest_component, mask_to_box, online_adapt, track_sequence, ResetProtocol, TrackConfig};
use metatrack::train::{train, Phase};
use metatrack::Seed;

fn short_sequence(seed: u64, length: usize) -> Sequence {
    generate_sequence(seed, &SeqParams { length, ..SeqParams::default() }).unwrap()
}

fn quick_track() -> TrackConfig {
    TrackConfig { n_aug: 4, adapt_steps: 3, adapt_alpha: 0.01, ..TrackConfig::default() }
}

#[test]
fn online_adapt_leaves_slow_weights_alone() {
    let model = ModelParams::init(NetConfig::default(), Seed(5)).unwrap();
    let frozen = |n: &str| !is_adaptable(n);
    let (all, fixed) = (model.checksum(|_| true), model.checksum(frozen));
    let seq = short_sequence(3, 4);
    let a = online_adapt(&model, &seq, 0, &seq.boxes[0], &quick_track(), Seed(1)).unwrap();
    assert_eq!(model.checksum(|_| true), all);
    assert_eq!(model.checksum(frozen), fixed);
    assert_eq!(a.losses.len(), 4);
    assert!(a.heads.tensors.keys().all(|n| is_adaptable(n)));
    assert!(a.heads.tensors.iter().any(|(n, t)| t != model.get(n).unwrap()));
    assert!(a.heads.tensors.keys().all(|n| matches!(ParamGroup::of(n), Some(ParamGroup::Head(_)))));
}

#[test]
fn ground_truth_mask_recovers_ground_truth_box() {
    let mut checked = 0;
    for seed in 0..4 {
        let seq = short_sequence(seed, 10);
        let (w, h) = (seq.width, seq.height);
        assert_eq!(w, h);
        let window = CropWindow { cx: (w as f64 - 1.0) / 2.0, cy: (h as f64 - 1.0) / 2.0, side: w as f64, size: w };
        let grid = MaskGrid { left: -0.5, top: -0.5, cell: 1.0, n: w };
        for t in 0..seq.len() {
            let mask: Vec<f64> = seq.masks[t].iter().map(|&m| f64::from(m)).collect();
            let area = seq.masks[t].iter().filter(|&&m| m != 0).count();
            // Occluders can split the target; the box then spans pieces the
            // largest component does not.
            if largest_component(&mask, w, 0.5).map(|c| c.len()) != Some(area) {
                continue;
            }
            let b = mask_to_box(&mask, 0.5, &grid, &window).unwrap();
            let gt = seq.boxes[t];
            assert!((b.cx - gt.cx).abs() < 1e-9 && (b.cy - gt.cy).abs() < 1e-9, "frame {t}: {b:?} vs {gt:?}");
            assert!((b.w - gt.w).abs() < 1e-9 && (b.h - gt.h).abs() < 1e-9, "frame {t}: {b:?} vs {gt:?}");
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} single-component frames");
}

#[test]
fn tracked_boxes_stay_inside_the_frame_and_repeat_exactly() {
    let model = ModelParams::init(NetConfig::default(), Seed(8)).unwrap();
    let seq = short_sequence(21, 8);
    let run = track_sequence(&model, &seq, &quick_track(), Seed(2)).unwrap();
    assert_eq!(run.states.len(), seq.len() - 1);
    for s in &run.states {
        let b = s.bbox;
        assert!(b.left() >= -0.5 && b.top() >= -0.5, "{b:?}");
        assert!(b.right() <= seq.width as f64 - 0.5 && b.bottom() <= seq.height as f64 - 0.5, "{b:?}");
    }
    let again = track_sequence(&model, &seq, &quick_track(), Seed(2)).unwrap();
    assert_eq!(run.states, again.states);
}

#[test]
fn two_frame_sequence_gives_one_state() {
    let model = ModelParams::init(NetConfig::default(), Seed(8)).unwrap();
    let seq = short_sequence(4, 2);
    assert_eq!(track_sequence(&model, &seq, &quick_track(), Seed(0)).unwrap().states.len(), 1);
}

#[test]
fn stored_results_score_like_live_results() {
    let model = ModelParams::init(NetConfig::default(), Seed(13)).unwrap();
    let corpus = vec![short_sequence(30, 12), short_sequence(31, 12)];
    let cfg = quick_track();
    let protocol = ResetProtocol { delay: 2, burn_in: 3 };
    for reset in [Some(protocol), None] {
        let runs = track_all(&model, &corpus, &cfg, reset, Seed(3)).unwrap();
        for (seq, results) in corpus.iter().zip(&runs) {
            let live = evaluate("s", results, seq, reset.is_some(), protocol, cfg.mask_threshold).unwrap();
            let (rows, masks) = rows_of(results, seq);
            let rows = parse_rows(&render_rows(&rows)).unwrap();
            let n = model.config().mask_size;
            let bytes = encode_masks(&masks.iter().collect::<Vec<_>>());
            let masks = decode_masks(&bytes, n, rows.len()).unwrap();
            let stored = replay(&rows, Some(&masks), seq, model.config(), reset).unwrap();
            let scored = evaluate("s", &stored, seq, reset.is_some(), protocol, cfg.mask_threshold).unwrap();
            assert_eq!(scored.mean_iou_while_tracking, live.mean_iou_while_tracking);
            assert_eq!(scored.failures, live.failures);
            // Masks pass through f32, which can only move cells sitting on
            // the threshold.
            assert!((scored.miou.unwrap() - live.miou.unwrap()).abs() < 1e-6);
            let boxes_only = replay(&rows, None, seq, model.config(), reset).unwrap();
            let b = evaluate("s", &boxes_only, seq, reset.is_some(), protocol, cfg.mask_threshold).unwrap();
            assert_eq!((b.mean_iou_while_tracking, b.miou), (live.mean_iou_while_tracking, None));
        }
    }
}

#[test]
fn pretraining_lowers_the_query_loss() {
    let corpus: Vec<Sequence> = (0..4).map(|i| short_sequence(40 + i, 6)).collect();
    let mut model = ModelParams::init(NetConfig::default(), Seed(2)).unwrap();
    let cfg = MetaConfig { tasks_per_batch: 2, support_size: 2, query_size: 4, ..MetaConfig::default() };
    let rows = train(&mut model, &corpus, &cfg, Phase::Pretrain, 30, 0.003, Seed(6), |_| {}).unwrap();
    let mean = |r: &[metatrack::train::LogRow]| r.iter().map(|r| r.report.query.total).sum::<f64>() / r.len() as f64;
    assert!(mean(&rows[25..]) < 0.9 * mean(&rows[..5]), "{} vs {}", mean(&rows[25..]), mean(&rows[..5]));
    assert!(rows.iter().all(|r| r.report.grad_norm_zeta == 0.0));
}

#[test]
fn config_file_round_trip_keeps_the_digest() {
    let text = "seed = 9\nmeta.gamma = 0.002\ntrack.adapt_heads = mask_only\nreset.delay = 4\n";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(cfg.meta.eta, 0.002);
    let again = RunConfig::parse(&cfg.render()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.render(), cfg.render());
    assert!(RunConfig::parse("meta.gamma = 0.002\nmeta.gama = 1\n").is_err());
}
