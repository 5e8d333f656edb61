//! Named training arms run per seed on one generated benchmark, and the
//! experiment presets built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::commands::{cmd_eval, cmd_finetune, cmd_pretrain, EvalRequest, PretrainOutcome};
use super::{PipelineError, RunConfig};
use crate::corpus::Split;
use crate::metrics::EvalRow;
use crate::synth::{gen_benchmark, load_spec, BenchmarkSpec};
use crate::tasks::Direction;

pub const EXPERIMENTS: [&str; 5] = ["exp:mt-transfer", "exp:zero-shot", "exp:augmentation", "exp:pmt-sweep", "exp:size-sweep"];

/// A named set of config overrides on top of the lab's base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub overrides: Value,
}

impl Arm {
    pub fn new(name: impl Into<String>, overrides: Value) -> Self {
        Arm { name: name.into(), overrides }
    }

    pub fn baseline() -> Self {
        Arm::new("baseline", json!({"preset": "baseline"}))
    }

    /// SLT plus MT over every corpus MT direction.
    pub fn with_mt(p_mt: f64) -> Self {
        Arm::new(format!("mt-p{p_mt}"), json!({"preset": "baseline+mt", "mixture": {"p_mt": p_mt}}))
    }

    pub fn augmented() -> Self {
        Arm::new("aug", json!({"preset": "baseline+aug"}))
    }

    pub fn size(preset: &str) -> Self {
        Arm::new(format!("baseline-{preset}"), json!({"preset": "baseline", "model": {"preset": preset}}))
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub config: RunConfig,
    pub pretrain: PretrainOutcome,
    /// Test rows of the selected checkpoint, keyed by direction.
    pub test: BTreeMap<String, EvalRow>,
}

impl ArmResult {
    pub fn test_chrf(&self, dir: &Direction) -> f64 {
        self.test[&dir.to_string()].chrf
    }

    /// Dev ChrF of the first evaluation after `budget` video-bearing
    /// examples had been consumed.
    pub fn dev_chrf_at(&self, budget: u64) -> Option<f64> {
        self.pretrain.history.iter().find(|p| p.slt_examples >= budget).map(|p| p.chrf)
    }

    /// Best dev ChrF over the whole run.
    pub fn best_dev_chrf(&self) -> f64 {
        self.pretrain.best_chrf
    }
}

/// Everything the experiments share: corpus, base config, seeds, the
/// supervised direction and the held-out zero-shot direction.
#[derive(Debug)]
pub struct Lab {
    pub root: PathBuf,
    pub base: Value,
    pub seeds: Vec<u64>,
    pub source: Direction,
    pub zero_shot: Direction,
    /// Video-bearing example budget shared by every arm.
    pub slt_budget: u64,
    /// Step cap for arms whose MT share delays the budget.
    pub max_steps: u64,
    pub p_mt_sweep: Vec<f64>,
    /// MT share of the zero-shot and finetuning arm.
    pub zero_shot_p_mt: f64,
    pub sizes: Vec<String>,
    arms: BTreeMap<(String, u64), ArmResult>,
    finetuned: BTreeMap<(String, u64), EvalRow>,
}

pub const CORPUS_DIR: &str = "corpus";
pub const REPORTS_DIR: &str = "reports";

impl Lab {
    /// Generates the benchmark under `root/corpus` unless an identical one
    /// is already there. `base` holds config keys shared by every arm.
    pub fn prepare(root: &Path, spec: &BenchmarkSpec, base: Value, seeds: Vec<u64>) -> Result<Self, PipelineError> {
        let corpus = root.join(CORPUS_DIR);
        if load_spec(&corpus).ok().as_ref() != Some(spec) {
            if corpus.exists() {
                std::fs::remove_dir_all(&corpus).map_err(|e| PipelineError::io(&corpus, e))?;
            }
            gen_benchmark(spec, &corpus)?;
        }
        let sign = spec
            .sign_languages
            .first()
            .ok_or_else(|| PipelineError::Config("benchmark has no sign language".into()))?;
        let zero_target = spec
            .eval_langs
            .iter()
            .find(|l| spec.sign_languages.iter().all(|s| !s.train_langs().contains(l)))
            .ok_or_else(|| PipelineError::Config("benchmark has no zero-shot language".into()))?;
        Ok(Lab {
            root: root.to_path_buf(),
            base,
            seeds,
            source: Direction::new(&sign.code, &sign.caption_lang),
            zero_shot: Direction::new(&sign.code, zero_target),
            slt_budget: 32_000,
            max_steps: 20_000,
            p_mt_sweep: vec![0.3, 0.5, 0.7, 0.9],
            zero_shot_p_mt: 0.5,
            sizes: vec!["tiny".into(), "small".into()],
            arms: BTreeMap::new(),
            finetuned: BTreeMap::new(),
        })
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join(CORPUS_DIR)
    }

    pub fn run_dir(&self, arm: &str, seed: u64) -> PathBuf {
        self.root.join("runs").join(arm).join(format!("seed-{seed}"))
    }

    /// Lab defaults (SLT budget, step cap), base keys, then arm overrides;
    /// corpus, output, seed and the selection direction are fixed by the lab.
    pub fn config(&self, arm: &Arm, seed: u64) -> Result<RunConfig, PipelineError> {
        let mut v = json!({"slt_example_budget": self.slt_budget, "train": {"max_steps": self.max_steps}});
        super::merge_json(&mut v, &self.base);
        super::merge_json(&mut v, &arm.overrides);
        super::merge_json(
            &mut v,
            &json!({
                "corpus": self.corpus(),
                "out": self.run_dir(&arm.name, seed),
                "seed": seed,
                "select_direction": self.source.to_string(),
            }),
        );
        RunConfig::from_json(&v)
    }

    fn eval_request(&self, cfg: &RunConfig, checkpoint: PathBuf, benchmark: &str, dirs: Vec<Direction>) -> EvalRequest {
        EvalRequest {
            checkpoint,
            corpus: self.corpus(),
            split: Split::Test,
            directions: dirs,
            decode: cfg.decode.clone(),
            stride: cfg.clips.frame_stride,
            benchmark: Some(benchmark.to_string()),
            cascade_pivot: None,
            limit: None,
            out_csv: Some(self.root.join(REPORTS_DIR).join(format!("{benchmark}.csv"))),
        }
    }

    /// Pretrains an arm for one seed (once per lab) and scores its selected
    /// checkpoint on the test split in both directions.
    pub fn arm(&mut self, arm: &Arm, seed: u64) -> Result<&ArmResult, PipelineError> {
        let key = (arm.name.clone(), seed);
        if !self.arms.contains_key(&key) {
            let cfg = self.config(arm, seed)?;
            log::info!("training arm {} seed {seed}", arm.name);
            let pretrain = cmd_pretrain(&cfg)?;
            let req = self.eval_request(
                &cfg,
                pretrain.best_path.clone(),
                &arm.name,
                vec![self.source.clone(), self.zero_shot.clone()],
            );
            let report = cmd_eval(&req)?;
            let test = report.rows.into_iter().map(|r| (r.direction.clone(), r)).collect();
            self.arms.insert(key.clone(), ArmResult { config: cfg, pretrain, test });
        }
        Ok(&self.arms[&key])
    }

    /// Finetunes the arm's selected checkpoint on the zero-shot direction and
    /// returns the finetuned test row for that direction.
    pub fn finetune_zero_shot(&mut self, arm: &Arm, seed: u64) -> Result<EvalRow, PipelineError> {
        let key = (arm.name.clone(), seed);
        if let Some(row) = self.finetuned.get(&key) {
            return Ok(row.clone());
        }
        let base_ckpt = self.arm(arm, seed)?.pretrain.best_path.clone();
        let mut cfg = self.config(arm, seed)?;
        cfg.finetune.direction = Some(self.zero_shot.clone());
        let run = cmd_finetune(&cfg, &base_ckpt)?;
        let req = self.eval_request(&cfg, run.path, &arm.name, vec![self.zero_shot.clone()]);
        let row = cmd_eval(&req)?
            .rows
            .pop()
            .ok_or_else(|| PipelineError::Config("finetune evaluation produced no rows".into()))?;
        self.finetuned.insert(key, row.clone());
        Ok(row)
    }

    pub fn zero_shot_arm(&self) -> Arm {
        Arm::with_mt(self.zero_shot_p_mt)
    }

    /// Per seed: (Baseline, Baseline+MT) dev ChrF on the source direction at
    /// the SLT-example budget.
    pub fn mt_transfer(&mut self) -> Result<Vec<(u64, f64, f64)>, PipelineError> {
        let mt = Arm::with_mt(self.zero_shot_p_mt);
        let mut out = Vec::new();
        for seed in self.seeds.clone() {
            let budget = self.slt_budget;
            let base = self.arm(&Arm::baseline(), seed)?.dev_chrf_at(budget);
            let with_mt = self.arm(&mt, seed)?.dev_chrf_at(budget);
            let (Some(base), Some(with_mt)) = (base, with_mt) else {
                return Err(PipelineError::Config(format!(
                    "an arm stopped before {budget} SLT examples; raise train.max_steps"
                )));
            };
            out.push((seed, base, with_mt));
        }
        Ok(out)
    }

    /// Per seed: zero-shot-direction test ChrF of `a` and `b`.
    pub fn compare_zero_shot(&mut self, a: &Arm, b: &Arm) -> Result<Vec<(u64, f64, f64)>, PipelineError> {
        let zs = self.zero_shot.clone();
        let mut out = Vec::new();
        for seed in self.seeds.clone() {
            let x = self.arm(a, seed)?.test_chrf(&zs);
            let y = self.arm(b, seed)?.test_chrf(&zs);
            out.push((seed, x, y));
        }
        Ok(out)
    }

    /// Mean zero-shot test ChrF per swept p_mt, with per-seed values.
    pub fn pmt_sweep(&mut self) -> Result<Vec<(f64, Vec<f64>)>, PipelineError> {
        let zs = self.zero_shot.clone();
        let mut out = Vec::new();
        for p in self.p_mt_sweep.clone() {
            let mut vals = Vec::new();
            for seed in self.seeds.clone() {
                vals.push(self.arm(&Arm::with_mt(p), seed)?.test_chrf(&zs));
            }
            out.push((p, vals));
        }
        Ok(out)
    }

    /// Per seed: zero-shot test ChrF before and after finetuning.
    pub fn finetune_gain(&mut self) -> Result<Vec<(u64, f64, f64)>, PipelineError> {
        let arm = self.zero_shot_arm();
        let zs = self.zero_shot.clone();
        let mut out = Vec::new();
        for seed in self.seeds.clone() {
            let before = self.arm(&arm, seed)?.test_chrf(&zs);
            let after = self.finetune_zero_shot(&arm, seed)?.chrf;
            out.push((seed, before, after));
        }
        Ok(out)
    }

    /// Source-direction test ChrF per model size and seed.
    pub fn size_sweep(&mut self) -> Result<Vec<(String, Vec<f64>)>, PipelineError> {
        let src = self.source.clone();
        let mut out = Vec::new();
        for size in self.sizes.clone() {
            let mut vals = Vec::new();
            for seed in self.seeds.clone() {
                vals.push(self.arm(&Arm::size(&size), seed)?.test_chrf(&src));
            }
            out.push((size, vals));
        }
        Ok(out)
    }

    /// Runs one `exp:*` preset and renders its summary.
    pub fn run_experiment(&mut self, name: &str) -> Result<String, PipelineError> {
        let mut out = format!("{name} seeds={:?}\n", self.seeds);
        let pair_table = |out: &mut String, a: &str, b: &str, rows: &[(u64, f64, f64)]| {
            let _ = writeln!(out, "{:>6} {:>12} {:>12}", "seed", a, b);
            for (s, x, y) in rows {
                let _ = writeln!(out, "{s:>6} {x:>12.2} {y:>12.2}");
            }
            let _ = writeln!(out, "{:>6} {:>12.2} {:>12.2}", "mean", mean(rows.iter().map(|r| r.1)), mean(rows.iter().map(|r| r.2)));
        };
        match name {
            "exp:mt-transfer" => {
                let rows = self.mt_transfer()?;
                let _ = writeln!(out, "dev ChrF {} at {} SLT examples", self.source, self.slt_budget);
                pair_table(&mut out, "baseline", &self.zero_shot_arm().name, &rows);
            }
            "exp:zero-shot" => {
                let rows = self.compare_zero_shot(&Arm::baseline(), &self.zero_shot_arm())?;
                let _ = writeln!(out, "test ChrF {}", self.zero_shot);
                pair_table(&mut out, "baseline", &self.zero_shot_arm().name, &rows);
                let ft = self.finetune_gain()?;
                let _ = writeln!(out, "finetuned on {} segments", self.zero_shot);
                pair_table(&mut out, "pretrained", "finetuned", &ft);
            }
            "exp:augmentation" => {
                let rows = self.compare_zero_shot(&self.zero_shot_arm(), &Arm::augmented())?;
                let _ = writeln!(out, "test ChrF {}", self.zero_shot);
                pair_table(&mut out, &self.zero_shot_arm().name, "aug", &rows);
            }
            "exp:pmt-sweep" => {
                let _ = writeln!(out, "test ChrF {}", self.zero_shot);
                for (p, vals) in self.pmt_sweep()? {
                    let _ = writeln!(out, "p_mt={p:<4} mean={:>7.2} per-seed={vals:.2?}", mean(vals.iter().copied()));
                }
            }
            "exp:size-sweep" => {
                let _ = writeln!(out, "test ChrF {}", self.source);
                for (size, vals) in self.size_sweep()? {
                    let _ = writeln!(out, "{size:<8} mean={:>7.2} per-seed={vals:.2?}", mean(vals.iter().copied()));
                }
            }
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown experiment {other:?}; expected one of {EXPERIMENTS:?}"
                )))
            }
        }
        Ok(out)
    }
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
