//! `slt`: generate a synthetic benchmark, pretrain, finetune, translate,
//! evaluate, report, and run experiment presets.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use slt_core::corpus::Split;
use slt_core::pipeline::experiments::{Lab, EXPERIMENTS};
use slt_core::pipeline::{
    cmd_eval, cmd_finetune, cmd_gen, cmd_pretrain, cmd_report, cmd_translate, parse_override_value,
    set_json_path, EvalRequest, PipelineError, RunConfig,
};
use slt_core::synth::BenchmarkSpec;
use slt_core::tasks::Direction;

#[derive(Debug, Parser)]
#[command(name = "slt", version, about = "Multi-task sign language translation pretraining")]
struct Cli {
    /// JSON run config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (corpus directory for `gen`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.max_steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic benchmark corpus.
    Gen(GenArgs),
    /// Mixture pretraining with dev-ChrF checkpoint selection.
    Pretrain(CorpusArg),
    /// Finetune a checkpoint on aligned tune-split segments.
    Finetune(FinetuneArgs),
    /// Translate one `.lmk` landmark file and print the hypothesis.
    Translate(TranslateArgs),
    /// Score a checkpoint and append rows to a report CSV.
    Eval(EvalArgs),
    /// Tabulate report CSVs and correlate pretrain with finetune scores.
    Report(ReportArgs),
    /// Run an experiment preset (exp:mt-transfer, exp:zero-shot, ...).
    Exp(ExpArgs),
}

#[derive(Debug, Args)]
struct CorpusArg {
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// JSON benchmark spec; defaults to the named benchmark.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// `default` (two sign languages) or `transfer` (one).
    #[arg(long, default_value = "default")]
    benchmark: String,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sign-to-text direction such as `sl0-xb`.
    #[arg(long)]
    direction: Option<Direction>,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Landmark stream in `.lmk` format.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    direction: Direction,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: Option<Split>,
    /// Directions to score; defaults to every sign/genuine-language pair of the split.
    #[arg(long = "direction")]
    directions: Vec<Direction>,
    /// Add cascade rows through a pivot, as `pivot=<lang>`.
    #[arg(long)]
    cascade: Option<String>,
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
    /// Report CSV; defaults to `<report_dir>/eval.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory of report CSVs; defaults to the config's report directory.
    dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExpArgs {
    /// One of exp:mt-transfer, exp:zero-shot, exp:augmentation, exp:pmt-sweep, exp:size-sweep.
    name: String,
    /// Comma-separated seeds; defaults to `--seed` (or 0).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value = "default")]
    benchmark: String,
}

fn benchmark_spec(name: &str) -> Result<BenchmarkSpec, PipelineError> {
    match name {
        "default" => Ok(BenchmarkSpec::default()),
        "transfer" => Ok(BenchmarkSpec::transfer()),
        other => Err(PipelineError::Config(format!("unknown benchmark {other:?}"))),
    }
}

impl Cli {
    /// Config file, then `--set`, then named flags.
    fn config_json(&self, corpus: Option<&Path>) -> Result<Value, PipelineError> {
        let mut v = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => json!({}),
        };
        for kv in &self.overrides {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            set_json_path(&mut v, key.trim(), parse_override_value(raw.trim()))?;
        }
        if let Some(seed) = self.seed {
            set_json_path(&mut v, "seed", json!(seed))?;
        }
        if let Some(out) = &self.out {
            set_json_path(&mut v, "out", json!(out))?;
        }
        if let Some(corpus) = corpus {
            set_json_path(&mut v, "corpus", json!(corpus))?;
        }
        Ok(v)
    }

    fn run_config(&self, corpus: Option<&Path>) -> Result<RunConfig, PipelineError> {
        RunConfig::from_json(&self.config_json(corpus)?)
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    match &cli.command {
        Command::Gen(args) => {
            let mut spec = match &args.spec {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
                    serde_json::from_str(&text)
                        .map_err(|e| PipelineError::Config(format!("bad spec {}: {e}", path.display())))?
                }
                None => benchmark_spec(&args.benchmark)?,
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("corpus"));
            let summary = cmd_gen(&spec, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::Pretrain(args) => {
            let cfg = cli.run_config(args.corpus.as_deref())?;
            let out = cmd_pretrain(&cfg)?;
            println!(
                "pretrained {} steps ({} SLT examples); best dev ChrF {:.2} on {} at step {}",
                out.last_step, out.slt_examples, out.best_chrf, out.direction, out.best_step
            );
            println!("best: {}", out.best_path.display());
            println!("last: {}", out.last_path.display());
        }
        Command::Finetune(args) => {
            let mut cfg = cli.run_config(args.corpus.corpus.as_deref())?;
            if args.direction.is_some() {
                cfg.finetune.direction = args.direction.clone();
            }
            let run = cmd_finetune(&cfg, &args.checkpoint)?;
            let dev = run.best_dev_chrf.map_or("n/a".to_string(), |c| format!("{c:.2}"));
            println!(
                "finetuned on {} {} segments; best dev ChrF {dev} at step {}",
                run.segments, run.direction, run.best_step
            );
            println!("checkpoint: {}", run.path.display());
        }
        Command::Translate(args) => {
            let cfg = cli.run_config(None)?;
            let mut decode = cfg.decode.clone();
            if let Some(beam) = args.beam {
                decode.beam_size = beam;
            }
            let text = cmd_translate(&args.checkpoint, &args.input, &args.direction, cfg.clips.frame_stride, &decode)?;
            println!("{text}");
        }
        Command::Eval(args) => {
            let cfg = cli.run_config(args.corpus.corpus.as_deref())?;
            let split = args.split.unwrap_or(cfg.eval_split);
            let directions = if args.directions.is_empty() {
                default_directions(&cfg.corpus, split)?
            } else {
                args.directions.clone()
            };
            let cascade_pivot = match &args.cascade {
                Some(c) => Some(
                    c.strip_prefix("pivot=")
                        .ok_or_else(|| PipelineError::Config(format!("--cascade expects pivot=<lang>, got {c:?}")))?
                        .to_string(),
                ),
                None => None,
            };
            let req = EvalRequest {
                checkpoint: args.checkpoint.clone(),
                corpus: cfg.corpus.clone(),
                split,
                directions,
                decode: cfg.decode.clone(),
                stride: cfg.clips.frame_stride,
                benchmark: args.benchmark.clone(),
                cascade_pivot,
                limit: args.limit,
                out_csv: Some(args.report.clone().unwrap_or_else(|| cfg.report_dir().join("eval.csv"))),
            };
            print!("{}", cmd_eval(&req)?.render_table());
        }
        Command::Report(args) => {
            let dir = match &args.dir {
                Some(d) => d.clone(),
                None => cli.run_config(None)?.report_dir(),
            };
            let out = cmd_report(&dir)?;
            print!("{}", out.table);
            println!("pairs: {}", out.pairs_csv.display());
        }
        Command::Exp(args) => {
            if !EXPERIMENTS.contains(&args.name.as_str()) {
                return Err(PipelineError::Config(format!(
                    "unknown experiment {:?}; expected one of {EXPERIMENTS:?}",
                    args.name
                )));
            }
            let mut base = cli.config_json(None)?;
            let root = base
                .get("out")
                .and_then(Value::as_str)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs/exp"));
            let seeds = if args.seeds.is_empty() { vec![cli.seed.unwrap_or(0)] } else { args.seeds.clone() };
            if let Some(obj) = base.as_object_mut() {
                for key in ["out", "corpus", "seed"] {
                    obj.remove(key);
                }
            }
            let mut lab = Lab::prepare(&root, &benchmark_spec(&args.benchmark)?, base, seeds)?;
            print!("{}", lab.run_experiment(&args.name)?);
        }
    }
    Ok(())
}

/// Every (sign language, genuine caption language) pair present in `split`.
fn default_directions(corpus: &Path, split: Split) -> Result<Vec<Direction>, PipelineError> {
    let corpus = slt_core::corpus::Corpus::load(corpus)?;
    let mut dirs = std::collections::BTreeSet::new();
    for v in corpus.split(split) {
        for (lang, aug) in v.caption_langs() {
            if !aug {
                dirs.insert(Direction::new(&v.sign_lang, lang));
            }
        }
    }
    Ok(dirs.into_iter().collect())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
