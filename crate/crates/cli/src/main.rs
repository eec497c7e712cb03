use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use metatrack::ablation::{generated_corpus, run_grid, train_pair};
use metatrack::config::RunConfig;
use metatrack::eval::{config_hash, evaluate, track_all, EvalReport};
use metatrack::gradsuite::{check_model, OBJECTIVES};
use metatrack::meta::AdaptHeads;
use metatrack::nets::ModelParams;
use metatrack::plot::{line_chart, Series};
use metatrack::results::{decode_masks, encode_masks, read_rows, replay, rows_of, write_rows};
use metatrack::synthdata::{read_manifest, read_sequence, write_corpus, Sequence};
use metatrack::train::{train, write_log, Phase, LOG_HEADER};
use metatrack::Seed;
use metatrack_autodiff::suite::{primitive_cases, run_case};

/// Siamese segmentation tracking with meta-learned first-frame adaptation.
#[derive(Parser)]
#[command(name = "metatrack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Root seed; overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence corpus and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of sequences [default: schedule.train_sequences].
        #[arg(long)]
        n: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training on a corpus.
    Pretrain(TrainArgs),
    /// Meta-training on a corpus.
    MetaTrain(TrainArgs),
    /// Track every sequence of a corpus and write per-sequence results.
    Track {
        #[command(flatten)]
        common: Common,
        /// Corpus manifest.
        #[arg(long)]
        corpus: PathBuf,
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Output directory for `<sequence>.csv` files.
        #[arg(long)]
        out: PathBuf,
        /// Also write `<sequence>.masks` with the raw f32 masks.
        #[arg(long)]
        dump_masks: bool,
        /// Track straight through failures instead of re-initializing.
        #[arg(long)]
        no_reset: bool,
    },
    /// Score tracking results against the ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Corpus manifest.
        #[arg(long)]
        corpus: PathBuf,
        /// Directory written by `track`.
        #[arg(long)]
        results: PathBuf,
        /// The results were produced with `--no-reset`.
        #[arg(long)]
        no_reset: bool,
        /// Structured report path [default: <results>/report.txt].
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference checks of every primitive and of the model losses.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Seeds per check, starting at the root seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Train both models and compare them with and without adaptation.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Training corpus manifest [default: generated from the seed].
        #[arg(long)]
        train_corpus: Option<PathBuf>,
        /// Held-out corpus manifest [default: generated from the seed].
        #[arg(long)]
        test_corpus: Option<PathBuf>,
        /// Adaptation modes to run.
        #[arg(long, value_delimiter = ',', default_values_t = vec![String::from("all"), String::from("mask_only")])]
        adapt_heads: Vec<String>,
        /// Directory for checkpoints, logs and the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render training curves and per-sequence IoU traces as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Training logs written by `pretrain` or `meta-train`.
        #[arg(long)]
        log: Vec<PathBuf>,
        /// Directory written by `track`.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus manifest.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint to start from [default: fresh initialization].
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Optimizer steps [default: from the schedule].
    #[arg(long)]
    steps: Option<usize>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether every check passed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, n, out } => {
            let cfg = common.load()?;
            let n = n.unwrap_or(cfg.schedule.train_sequences);
            let manifest = write_corpus(&out, cfg.seed, n, &cfg.data)?;
            println!("wrote {n} sequences, manifest {}", manifest.display());
        }
        Command::Pretrain(args) => train_command(args, Phase::Pretrain)?,
        Command::MetaTrain(args) => train_command(args, Phase::Meta)?,
        Command::Track { common, corpus, model, out, dump_masks, no_reset } => {
            let cfg = common.load()?;
            let model = ModelParams::load(&model, cfg.net.clone())?;
            let (ids, seqs) = load_corpus(&corpus)?;
            let protocol = (!no_reset).then_some(cfg.reset);
            let runs = track_all(&model, &seqs, &cfg.track, protocol, Seed(cfg.seed).child("track"))?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for ((id, seq), results) in ids.iter().zip(&seqs).zip(&runs) {
                let (rows, masks) = rows_of(results, seq);
                write_rows(&rows, &out.join(format!("{id}.csv")))?;
                if dump_masks {
                    let path = out.join(format!("{id}.masks"));
                    fs::write(&path, encode_masks(&masks.iter().collect::<Vec<_>>()))
                        .with_context(|| format!("writing {}", path.display()))?;
                }
            }
            println!("tracked {} sequences into {}", ids.len(), out.display());
        }
        Command::Eval { common, corpus, results, no_reset, report } => {
            let cfg = common.load()?;
            let (ids, seqs) = load_corpus(&corpus)?;
            let protocol = (!no_reset).then_some(cfg.reset);
            let n = cfg.net.mask_size;
            let mut records = Vec::with_capacity(ids.len());
            for (id, seq) in ids.iter().zip(&seqs) {
                let rows = read_rows(&results.join(format!("{id}.csv")))?;
                let mask_path = results.join(format!("{id}.masks"));
                let masks = match fs::read(&mask_path) {
                    Ok(bytes) => Some(decode_masks(&bytes, n, rows.len())?),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
                    Err(e) => return Err(e).with_context(|| format!("reading {}", mask_path.display())),
                };
                let replayed = replay(&rows, masks.as_deref(), seq, &cfg.net, protocol)
                    .with_context(|| format!("sequence {id}"))?;
                records.push(evaluate(id, &replayed, seq, protocol.is_some(), cfg.reset, cfg.track.mask_threshold)?);
            }
            let report_data = EvalReport::new(records, config_hash(&cfg.render()));
            let path = report.unwrap_or_else(|| results.join("report.txt"));
            fs::write(&path, report_data.structured()).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", report_data.table());
        }
        Command::Gradcheck { common, seeds } => return gradcheck(common.load()?.seed, seeds),
        Command::Ablate { common, train_corpus, test_corpus, adapt_heads, out } => {
            let cfg = common.load()?;
            let modes = adapt_heads.iter().map(|h| h.parse()).collect::<metatrack::Result<Vec<AdaptHeads>>>()?;
            return ablate(&cfg, train_corpus, test_corpus, &modes, out.as_deref());
        }
        Command::Plot { common, log, results, out } => {
            common.load()?;
            plot(&log, results.as_deref(), &out)?;
        }
    }
    Ok(true)
}

fn train_command(args: TrainArgs, phase: Phase) -> Result<()> {
    let cfg = args.common.load()?;
    let (_, corpus) = load_corpus(&args.corpus)?;
    let mut model = match &args.init {
        Some(p) => ModelParams::load(p, cfg.net.clone())?,
        None => ModelParams::init(cfg.net.clone(), Seed(cfg.seed).child("init"))?,
    };
    let steps = args.steps.unwrap_or(match phase {
        Phase::Pretrain => cfg.schedule.pretrain_steps,
        Phase::Meta => cfg.schedule.meta_steps,
    });
    let rows = train(&mut model, &corpus, &cfg.meta, phase, steps, cfg.schedule.pretrain_lr, Seed(cfg.seed), |r| {
        if r.step % 10 == 0 || r.step + 1 == steps {
            eprintln!("step {:>5}  support {:.4}  query {:.4}", r.step, r.report.support.total, r.report.query.total);
        }
    })?;
    model.save(&args.out)?;
    if let Some(log) = &args.log {
        write_log(&rows, log)?;
    }
    Ok(())
}

/// Sequences of a manifest, named by file stem.
fn load_corpus(manifest: &Path) -> Result<(Vec<String>, Vec<Sequence>)> {
    let paths = read_manifest(manifest)?;
    let ids = paths.iter().map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned()).collect();
    let seqs = paths.iter().map(|p| read_sequence(p)).collect::<metatrack::Result<_>>()?;
    Ok((ids, seqs))
}

fn gradcheck(root: u64, seeds: u64) -> Result<bool> {
    let mut ok = true;
    for case in primitive_cases() {
        let mut worst = (0.0f64, 0.0f64);
        let mut failed = 0;
        for seed in root..root + seeds {
            let o = run_case(&case, seed)?;
            worst.0 = worst.0.max(o.first_order);
            worst.1 = worst.1.max(o.second_order);
            failed += usize::from(!o.passes());
        }
        ok &= failed == 0;
        println!("{:<28} max err {:.2e} / {:.2e}  failed {failed}/{seeds}", case.name, worst.0, worst.1);
    }
    for objective in OBJECTIVES {
        let mut worst = 0.0f64;
        let mut failed = 0;
        for seed in root..root + seeds {
            let c = check_model(objective, seed)?;
            worst = worst.max(c.relative_error);
            failed += usize::from(!c.passes());
        }
        ok &= failed == 0;
        println!("model:{:<22} max err {worst:.2e}  failed {failed}/{seeds}", objective.name());
    }
    println!("{}", if ok { "gradcheck passed" } else { "gradcheck FAILED" });
    Ok(ok)
}

fn ablate(cfg: &RunConfig, train_corpus: Option<PathBuf>, test_corpus: Option<PathBuf>, modes: &[AdaptHeads], out: Option<&Path>) -> Result<bool> {
    let seed = Seed(cfg.seed);
    let (_, train_seqs) = match train_corpus {
        Some(p) => load_corpus(&p)?,
        None => generated_corpus(cfg, "train", cfg.schedule.train_sequences)?,
    };
    let (ids, test_seqs) = match test_corpus {
        Some(p) => load_corpus(&p)?,
        None => generated_corpus(cfg, "test", cfg.schedule.test_sequences)?,
    };
    let pair = train_pair(cfg, &train_seqs, seed, |phase, r| {
        if r.step % 25 == 0 {
            eprintln!("{phase} step {:>4}  query {:.4}", r.step, r.report.query.total);
        }
    })?;
    let grid = run_grid(&pair.pretrained, &pair.meta, &ids, &test_seqs, cfg, modes, seed)?;
    let mut table = grid.table();
    let mut ok = true;
    for h in modes {
        let c = grid.checks(*h).expect("mode was run");
        ok &= c.all();
        table.push_str(&format!(
            "[{}] meta adaptation gain: {}  pretrain adaptation not more robust: {}  meta+adapt best: {}\n",
            h.name(),
            verdict(c.meta_gains),
            verdict(c.pretrain_not_more_robust),
            verdict(c.meta_adapt_best)
        ));
    }
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        pair.pretrained.save(&dir.join("pretrained.mtck"))?;
        pair.meta.save(&dir.join("meta.mtck"))?;
        write_log(&pair.pretrain_log, &dir.join("pretrain.csv"))?;
        write_log(&pair.meta_log, &dir.join("meta.csv"))?;
        fs::write(dir.join("ablation.txt"), &table).context("writing ablation table")?;
    }
    Ok(ok)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

/// Columns of a CSV file with the given header, by name.
fn read_columns(path: &Path, header: &str, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        bail!("{}: unexpected header", path.display());
    }
    let columns: Vec<&str> = header.split(',').collect();
    let idx: Vec<usize> = names.iter().map(|n| columns.iter().position(|c| c == n).expect("known column")).collect();
    let mut out = vec![Vec::new(); names.len()];
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        for (col, &k) in out.iter_mut().zip(&idx) {
            let v = fields.get(k).and_then(|f| f.parse().ok());
            col.push(v.with_context(|| format!("{} line {}: bad field {k}", path.display(), i + 2))?);
        }
    }
    Ok(out)
}

fn plot(logs: &[PathBuf], results: Option<&Path>, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if !logs.is_empty() {
        let mut series = Vec::new();
        for log in logs {
            let name = log.file_stem().unwrap_or_default().to_string_lossy();
            let cols = read_columns(log, LOG_HEADER, &["step", "total", "query_total"])?;
            let pts = |c: &Vec<f64>| cols[0].iter().copied().zip(c.iter().copied()).collect();
            series.push(Series::new(format!("{name} support"), pts(&cols[1])));
            series.push(Series::new(format!("{name} query"), pts(&cols[2])));
        }
        fs::write(out.join("training.svg"), line_chart("training loss", "step", "loss", &series))?;
    }
    if let Some(dir) = results {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "csv"));
        files.sort();
        let mut series = Vec::new();
        for f in &files {
            let rows = read_rows(f)?;
            let name = f.file_stem().unwrap_or_default().to_string_lossy();
            series.push(Series::new(name, rows.iter().map(|r| (r.frame as f64, r.iou_gt)).collect()));
        }
        fs::write(out.join("iou_traces.svg"), line_chart("overlap with ground truth", "frame", "IoU", &series))?;
    }
    Ok(())
}
