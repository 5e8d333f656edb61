//! The pipeline commands behind the CLI subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::{PipelineError, RunConfig};
use crate::clips::{downsample_frames, MAX_CLIP_FRAMES};
use crate::corpus::{load_landmarks, CaptionedVideo, Corpus, Split};
use crate::decode::{cascade_translate, translate_segment, translate_segments, DecodeConfig};
use crate::metrics::{bleu, chrf, spearman, EvalReport, EvalRow, Stage, REPORT_HEADER};
use crate::mixture::{MixtureInventory, MixtureSampler};
use crate::model::{
    finetune, load_checkpoint, save_checkpoint, FinetuneConfig, Seq2SeqModel, Trainer,
};
use crate::synth::{gen_benchmark, load_spec, BenchmarkSpec, BenchmarkSummary};
use crate::tasks::{caption_segments, Direction, Segment};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINETUNE_LOG_FILE: &str = "finetune_log.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";

const LOG_HEADER: &str = "step,loss,slt_loss,align_loss,mt_loss,aug_slt_loss,\
n_slt,n_align,n_mt,n_aug_slt,slt_examples,dev_chrf,dev_bleu";

/// Independent random streams derived from the run seed.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn cmd_gen(spec: &BenchmarkSpec, out: &Path) -> Result<BenchmarkSummary, PipelineError> {
    Ok(gen_benchmark(spec, out)?)
}

/// Caption segments of `split` videos signed in `dir.source` with genuine
/// `dir.target` references.
pub fn direction_segments(corpus: &Corpus, split: Split, dir: &Direction, stride: usize) -> Vec<Segment> {
    corpus
        .split(split)
        .iter()
        .filter(|v| v.sign_lang == dir.source)
        .flat_map(|v| caption_segments(v, &dir.target, stride))
        .collect()
}

fn first_genuine_direction(videos: &[CaptionedVideo]) -> Option<Direction> {
    videos.iter().find_map(|v| {
        v.caption_langs()
            .into_iter()
            .find(|(_, aug)| !aug)
            .map(|(lang, _)| Direction::new(&v.sign_lang, lang))
    })
}

fn selection_direction(cfg: &RunConfig, corpus: &Corpus) -> Result<Direction, PipelineError> {
    if let Some(d) = &cfg.select_direction {
        return Ok(d.clone());
    }
    first_genuine_direction(corpus.split(Split::Train))
        .ok_or_else(|| PipelineError::Config("corpus has no genuine train captions".into()))
}

fn missing(dir: &Direction, split: Split) -> PipelineError {
    PipelineError::MissingDirection { direction: dir.to_string(), split: split.as_str().to_string() }
}

/// Dev segments used for checkpoint selection.
pub fn dev_segments(cfg: &RunConfig, corpus: &Corpus) -> Result<(Direction, Vec<Segment>), PipelineError> {
    let dir = selection_direction(cfg, corpus)?;
    let mut segs = direction_segments(corpus, Split::Dev, &dir, cfg.clips.frame_stride);
    if let Some(n) = cfg.dev_limit {
        segs.truncate(n);
    }
    if segs.is_empty() {
        return Err(missing(&dir, Split::Dev));
    }
    Ok((dir, segs))
}

fn score(model: &Seq2SeqModel, segs: &[Segment], decode: &DecodeConfig) -> Result<(f64, f64), PipelineError> {
    let hyps = translate_segments(model, segs, decode)?;
    let refs: Vec<&str> = segs.iter().map(|s| s.target_text.as_str()).collect();
    Ok((chrf(&hyps, &refs)?, bleu(&hyps, &refs)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DevPoint {
    pub step: u64,
    pub slt_examples: u64,
    pub chrf: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub direction: Direction,
    pub best_step: u64,
    pub best_chrf: f64,
    pub last_step: u64,
    /// Video-bearing examples consumed.
    pub slt_examples: u64,
    pub history: Vec<DevPoint>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub log_path: PathBuf,
}

fn create_log(path: &Path, cfg: &RunConfig, header: &str) -> Result<BufWriter<fs::File>, PipelineError> {
    let file = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "# seed={}", cfg.seed)
        .and_then(|_| writeln!(log, "# config={}", cfg.to_json()))
        .and_then(|_| writeln!(log, "{header}"))
        .map_err(|e| PipelineError::io(path, e))?;
    Ok(log)
}

fn ckpt_meta(cfg: &RunConfig, stage: Stage, step: u64, extra: Value) -> Value {
    let mut meta = json!({
        "stage": stage.as_str(),
        "seed": cfg.seed,
        "step": step,
        "config": cfg.to_json(),
    });
    super::merge_json(&mut meta, &extra);
    meta
}

/// Mixture pretraining with periodic dev evaluation. Writes the training log,
/// `best.ckpt` (highest dev ChrF, earliest on ties) and `last.ckpt`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainOutcome, PipelineError> {
    cfg.validate()?;
    let corpus = Corpus::load(&cfg.corpus)?;
    let (direction, dev) = dev_segments(cfg, &corpus)?;
    let inv = MixtureInventory::from_corpus(&corpus, &cfg.mixture)?;
    let mut sampler =
        MixtureSampler::new(cfg.mixture.clone(), cfg.clips.clone(), inv, derive_seed(cfg.seed, 2));
    let model = Seq2SeqModel::new(cfg.model.clone(), derive_seed(cfg.seed, 1))?;
    let mut trainer = Trainer::new(model, cfg.train.clone());

    fs::create_dir_all(&cfg.out).map_err(|e| PipelineError::io(&cfg.out, e))?;
    let log_path = cfg.out.join(LOG_FILE);
    let best_path = cfg.out.join(BEST_CKPT);
    let last_path = cfg.out.join(LAST_CKPT);
    let mut log = create_log(&log_path, cfg, LOG_HEADER)?;
    let log_err = |e| PipelineError::io(&log_path, e);

    let (chrf0, bleu0) = score(&trainer.model, &dev, &cfg.dev_decode)?;
    let mut history = vec![DevPoint { step: 0, slt_examples: 0, chrf: chrf0, bleu: bleu0 }];
    writeln!(log, "0,,,,,,0,0,0,0,0,{chrf0},{bleu0}").map_err(log_err)?;
    let dev_meta = |step: u64, chrf: f64| {
        ckpt_meta(cfg, Stage::Pretrain, step, json!({"dev_direction": direction.to_string(), "dev_chrf": chrf}))
    };
    save_checkpoint(&best_path, &trainer.model, &dev_meta(0, chrf0))?;
    let (mut best_step, mut best_chrf) = (0, chrf0);

    let mut slt_examples = 0u64;
    let mut step = 0u64;
    let mut target_hit = false;
    while step < cfg.train.max_steps && !target_hit {
        if cfg.slt_example_budget.is_some_and(|b| slt_examples >= b) {
            break;
        }
        let batch = sampler.next_batch(cfg.train.batch_size)?;
        let report = trainer.train_step(&batch)?;
        step = report.step;
        slt_examples += batch.iter().filter(|e| e.kind.uses_frames()).count() as u64;

        let mut row = format!("{step},{}", report.loss);
        for t in &report.per_task {
            row.push(',');
            if t.tokens > 0 {
                let _ = write!(row, "{}", t.nll / t.tokens as f64);
            }
        }
        for t in &report.per_task {
            let _ = write!(row, ",{}", t.examples);
        }
        let _ = write!(row, ",{slt_examples}");

        let budget_hit = cfg.slt_example_budget.is_some_and(|b| slt_examples >= b);
        let last = step == cfg.train.max_steps || budget_hit;
        if step % cfg.eval_every == 0 || last {
            let (c, b) = score(&trainer.model, &dev, &cfg.dev_decode)?;
            history.push(DevPoint { step, slt_examples, chrf: c, bleu: b });
            let _ = write!(row, ",{c},{b}");
            target_hit = cfg.target_dev_chrf.is_some_and(|t| c >= t);
            if c > best_chrf {
                best_chrf = c;
                best_step = step;
                save_checkpoint(&best_path, &trainer.model, &dev_meta(step, c))?;
            }
        } else {
            row.push_str(",,");
        }
        writeln!(log, "{row}").map_err(log_err)?;
    }
    let last_chrf = history.last().map(|p| p.chrf).unwrap_or(chrf0);
    save_checkpoint(&last_path, &trainer.model, &dev_meta(step, last_chrf))?;
    log.flush().map_err(log_err)?;

    Ok(PretrainOutcome {
        direction,
        best_step,
        best_chrf,
        last_step: step,
        slt_examples,
        history,
        best_path,
        last_path,
        log_path,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub direction: Direction,
    pub segments: usize,
    pub best_step: u64,
    pub best_dev_chrf: Option<f64>,
    pub path: PathBuf,
}

/// Finetunes `checkpoint` on aligned tune-split segments of one direction,
/// selecting by dev ChrF, and writes `finetune.ckpt` plus its log.
pub fn cmd_finetune(cfg: &RunConfig, checkpoint: &Path) -> Result<FinetuneRun, PipelineError> {
    cfg.validate()?;
    let corpus = Corpus::load(&cfg.corpus)?;
    let base = load_checkpoint(checkpoint)?;
    let direction = match &cfg.finetune.direction {
        Some(d) => d.clone(),
        None => selection_direction(cfg, &corpus)?,
    };
    let stride = cfg.clips.frame_stride;
    let mut train = direction_segments(&corpus, Split::Tune, &direction, stride);
    train.truncate(cfg.finetune.max_segments);
    if train.is_empty() {
        return Err(missing(&direction, Split::Tune));
    }
    let mut dev = direction_segments(&corpus, Split::Dev, &direction, stride);
    if let Some(n) = cfg.dev_limit {
        dev.truncate(n);
    }
    let ft = FinetuneConfig {
        train: cfg.finetune.train.clone(),
        eval_every: cfg.finetune.eval_every,
        decode: cfg.dev_decode.clone(),
    };
    let outcome = finetune(&base.model, &train, &dev, &ft)?;

    fs::create_dir_all(&cfg.out).map_err(|e| PipelineError::io(&cfg.out, e))?;
    let log_path = cfg.out.join(FINETUNE_LOG_FILE);
    let mut log = create_log(&log_path, cfg, "step,loss,dev_chrf")?;
    let evals: BTreeMap<u64, f64> = outcome.dev_history.iter().copied().collect();
    let log_err = |e| PipelineError::io(&log_path, e);
    if let Some(c) = evals.get(&0) {
        writeln!(log, "0,,{c}").map_err(log_err)?;
    }
    for (step, loss) in &outcome.losses {
        let dev = evals.get(step).map(|c| c.to_string()).unwrap_or_default();
        writeln!(log, "{step},{loss},{dev}").map_err(log_err)?;
    }
    log.flush().map_err(log_err)?;

    let path = cfg.out.join(FINETUNE_CKPT);
    let meta = ckpt_meta(
        cfg,
        Stage::Finetune,
        outcome.best_step,
        json!({
            "direction": direction.to_string(),
            "base_checkpoint": checkpoint.display().to_string(),
            "segments": train.len(),
            "dev_chrf": outcome.best_dev_chrf,
        }),
    );
    save_checkpoint(&path, &outcome.model, &meta)?;
    Ok(FinetuneRun {
        direction,
        segments: train.len(),
        best_step: outcome.best_step,
        best_dev_chrf: outcome.best_dev_chrf,
        path,
    })
}

/// Translates one landmark file: stride, cap at 512 frames, decode.
pub fn cmd_translate(
    checkpoint: &Path,
    landmarks: &Path,
    direction: &Direction,
    stride: usize,
    decode: &DecodeConfig,
) -> Result<String, PipelineError> {
    if stride == 0 {
        return Err(PipelineError::Config("frame_stride must be >= 1".into()));
    }
    decode.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let ckpt = load_checkpoint(checkpoint)?;
    let stream = load_landmarks(landmarks)?;
    let mut frames = downsample_frames(&stream, stride).frames;
    frames.truncate(MAX_CLIP_FRAMES);
    let owned = ckpt.model.net();
    Ok(translate_segment(&owned.view(), &frames, &direction.source, &direction.target, decode)?)
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub split: Split,
    pub directions: Vec<Direction>,
    pub decode: DecodeConfig,
    pub stride: usize,
    /// Benchmark label; defaults to the corpus directory name.
    pub benchmark: Option<String>,
    /// Adds cascade rows through this pivot language.
    pub cascade_pivot: Option<String>,
    /// Cap on segments per direction.
    pub limit: Option<usize>,
    /// Appends rows to this report CSV (created when absent).
    pub out_csv: Option<PathBuf>,
}

/// Scores a checkpoint on every requested direction; seed and stage come
/// from the checkpoint metadata.
pub fn cmd_eval(req: &EvalRequest) -> Result<EvalReport, PipelineError> {
    req.decode.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let ckpt = load_checkpoint(&req.checkpoint)?;
    let seed = ckpt.meta.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let stage = match ckpt.meta.get("stage").and_then(Value::as_str) {
        Some(s) => s.parse::<Stage>().map_err(PipelineError::Config)?,
        None => Stage::Pretrain,
    };
    let corpus = Corpus::load(&req.corpus)?;
    let benchmark = req.benchmark.clone().unwrap_or_else(|| {
        req.corpus
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into())
    });
    let oracle = match &req.cascade_pivot {
        Some(_) => Some(load_spec(&req.corpus)?.oracle().lenient()),
        None => None,
    };

    let owned = ckpt.model.net();
    let net = owned.view();
    let mut report = EvalReport { checkpoint: req.checkpoint.display().to_string(), rows: Vec::new() };
    for dir in &req.directions {
        let mut segs = direction_segments(&corpus, req.split, dir, req.stride);
        if let Some(n) = req.limit {
            segs.truncate(n);
        }
        if segs.is_empty() {
            return Err(missing(dir, req.split));
        }
        let refs: Vec<&str> = segs.iter().map(|s| s.target_text.as_str()).collect();
        let hyps = translate_segments(&ckpt.model, &segs, &req.decode)?;
        report.rows.push(EvalRow {
            benchmark: benchmark.clone(),
            direction: dir.to_string(),
            stage,
            seed,
            bleu: bleu(&hyps, &refs)?,
            chrf: chrf(&hyps, &refs)?,
        });
        if let (Some(pivot), Some(oracle)) = (&req.cascade_pivot, &oracle) {
            if *pivot == dir.target {
                continue;
            }
            let hyps = segs
                .iter()
                .map(|s| cascade_translate(&net, &s.frames, &s.sign_lang, pivot, &dir.target, oracle, &req.decode))
                .collect::<Result<Vec<_>, _>>()?;
            report.rows.push(EvalRow {
                benchmark: format!("{benchmark}+cascade:{pivot}"),
                direction: dir.to_string(),
                stage,
                seed,
                bleu: bleu(&hyps, &refs)?,
                chrf: chrf(&hyps, &refs)?,
            });
        }
    }

    if let Some(path) = &req.out_csv {
        let mut all = if path.exists() { EvalReport::read_csv(path)? } else { EvalReport::default() };
        all.rows.extend(report.rows.iter().cloned());
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
        all.write_csv(path)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub metric: &'static str,
    pub rho: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub rows: Vec<EvalRow>,
    /// `(benchmark, direction, seed)` with pretrain and finetune rows.
    pub pairs: Vec<(EvalRow, EvalRow)>,
    pub correlations: Vec<Correlation>,
    pub warnings: Vec<String>,
    pub table: String,
    pub pairs_csv: PathBuf,
}

pub const REPORT_SUMMARY_DIR: &str = "summary";

/// Reads every report CSV directly in `dir`, pairs pretrain and finetune
/// rows and correlates them per metric. Writes `summary/pairs.csv`.
pub fn cmd_report(dir: &Path) -> Result<ReportOutcome, PipelineError> {
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for path in &files {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        if text.lines().next().map(str::trim) != Some(REPORT_HEADER) {
            continue;
        }
        rows.extend(EvalReport::from_csv(&text)?.rows);
    }

    let mut keyed: BTreeMap<(String, String, u64), (Option<EvalRow>, Option<EvalRow>)> = BTreeMap::new();
    for r in &rows {
        let slot = keyed.entry((r.benchmark.clone(), r.direction.clone(), r.seed)).or_default();
        match r.stage {
            Stage::Pretrain => slot.0 = Some(r.clone()),
            Stage::Finetune => slot.1 = Some(r.clone()),
        }
    }
    let pairs: Vec<(EvalRow, EvalRow)> = keyed
        .into_values()
        .filter_map(|(p, f)| Some((p?, f?)))
        .collect();

    let mut correlations = Vec::new();
    let mut warnings = Vec::new();
    if pairs.len() < 3 {
        warnings.push(format!(
            "correlation omitted: {} shared pretrain/finetune rows, need at least 3",
            pairs.len()
        ));
    } else {
        type Pick = fn(&EvalRow) -> f64;
        let metrics: [(&'static str, Pick); 2] = [("bleu", |r| r.bleu), ("chrf", |r| r.chrf)];
        for (metric, pick) in metrics {
            let x: Vec<f64> = pairs.iter().map(|(p, _)| pick(p)).collect();
            let y: Vec<f64> = pairs.iter().map(|(_, f)| pick(f)).collect();
            correlations.push(Correlation { metric, rho: spearman(&x, &y)?, n: pairs.len() });
        }
    }

    let mut table = EvalReport { checkpoint: String::new(), rows: rows.clone() }.render_table();
    table.push('\n');
    for c in &correlations {
        let _ = writeln!(table, "spearman {:<5} rho={:.4} n={}", c.metric, c.rho, c.n);
    }
    for w in &warnings {
        let _ = writeln!(table, "warning: {w}");
    }

    let summary = dir.join(REPORT_SUMMARY_DIR);
    fs::create_dir_all(&summary).map_err(|e| PipelineError::io(&summary, e))?;
    let pairs_csv = summary.join("pairs.csv");
    let mut csv = String::from("benchmark,direction,seed,pretrain_bleu,finetune_bleu,pretrain_chrf,finetune_chrf\n");
    for (p, f) in &pairs {
        let _ = writeln!(
            csv,
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            p.benchmark, p.direction, p.seed, p.bleu, f.bleu, p.chrf, f.chrf
        );
    }
    for c in &correlations {
        let _ = writeln!(csv, "# spearman_{}={:.6} n={}", c.metric, c.rho, c.n);
    }
    for w in &warnings {
        let _ = writeln!(csv, "# warning: {w}");
    }
    fs::write(&pairs_csv, csv).map_err(|e| PipelineError::io(&pairs_csv, e))?;

    Ok(ReportOutcome { rows, pairs, correlations, warnings, table, pairs_csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(dir: &str, stage: Stage, seed: u64, bleu: f64, chrf: f64) -> EvalRow {
        EvalRow { benchmark: "b".into(), direction: dir.into(), stage, seed, bleu, chrf }
    }

    #[test]
    fn report_pairs_and_correlates() {
        let tmp = tempfile::tempdir().unwrap();
        let mut pre = EvalReport::default();
        let mut fin = EvalReport::default();
        for (i, d) in ["a-x", "a-y", "a-z"].iter().enumerate() {
            pre.rows.push(row(d, Stage::Pretrain, 1, i as f64, 10.0 * i as f64));
            fin.rows.push(row(d, Stage::Finetune, 1, i as f64, 10.0 * i as f64));
        }
        pre.write_csv(&tmp.path().join("pre.csv")).unwrap();
        fin.write_csv(&tmp.path().join("fin.csv")).unwrap();
        fs::write(tmp.path().join("other.csv"), "x,y\n1,2\n").unwrap();
        let out = cmd_report(tmp.path()).unwrap();
        assert_eq!(out.pairs.len(), 3);
        assert_eq!(out.correlations.len(), 2);
        assert!(out.correlations.iter().all(|c| (c.rho - 1.0).abs() < 1e-12));
        assert!(out.table.contains("unavailable"));
        // The summary directory is not re-read as input.
        assert_eq!(cmd_report(tmp.path()).unwrap().rows.len(), 6);
    }

    #[test]
    fn report_warns_with_few_pairs() {
        let tmp = tempfile::tempdir().unwrap();
        let rep = EvalReport {
            checkpoint: String::new(),
            rows: vec![row("a-x", Stage::Pretrain, 1, 1.0, 2.0), row("a-x", Stage::Finetune, 1, 3.0, 4.0)],
        };
        rep.write_csv(&tmp.path().join("r.csv")).unwrap();
        let out = cmd_report(tmp.path()).unwrap();
        assert!(out.correlations.is_empty());
        assert_eq!(out.warnings.len(), 1);
        assert!(fs::read_to_string(out.pairs_csv).unwrap().contains("# warning"));
    }

    #[test]
    fn seeds_are_split_into_streams() {
        assert_ne!(derive_seed(5, 1), derive_seed(5, 2));
        assert_eq!(derive_seed(5, 0), 5);
    }

    #[test]
    fn pretrain_stops_at_budget_or_target() {
        let tmp = tempfile::tempdir().unwrap();
        let mut spec = crate::synth::BenchmarkSpec::transfer();
        let sl = &mut spec.sign_languages[0];
        (sl.train_videos, sl.dev_videos, sl.test_videos, sl.tune_videos) = (3, 1, 1, 1);
        spec.mt_pairs.iter_mut().for_each(|p| p.count = 4);
        let corpus = tmp.path().join("corpus");
        cmd_gen(&spec, &corpus).unwrap();
        let run = |extra: serde_json::Value| {
            let mut v = json!({
                "corpus": corpus,
                "out": tmp.path().join("run"),
                "train": {"max_steps": 6, "batch_size": 2},
                "eval_every": 2,
                "dev_decode": {"max_len": 4},
            });
            super::super::merge_json(&mut v, &extra);
            cmd_pretrain(&RunConfig::from_json(&v).unwrap()).unwrap()
        };
        let full = run(json!({}));
        assert_eq!(full.last_step, 6);
        assert_eq!(full.history.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
        let budget = run(json!({"slt_example_budget": 5}));
        assert_eq!((budget.last_step, budget.slt_examples), (3, 6));
        let target = run(json!({"target_dev_chrf": 0.0}));
        assert_eq!(target.last_step, 2);
    }
}
