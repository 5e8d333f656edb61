//! Resolved run configuration and JSON key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::clips::ClipConfig;
use crate::corpus::Split;
use crate::decode::DecodeConfig;
use crate::mixture::MixtureConfig;
use crate::model::{ModelConfig, TrainConfig};
use crate::tasks::Direction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSettings {
    /// Sign-to-text direction to finetune; defaults to the run's selection direction.
    pub direction: Option<Direction>,
    /// Segments taken from the tune split, in corpus order.
    pub max_segments: usize,
    pub eval_every: u64,
    pub train: TrainConfig,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self { direction: None, max_segments: 50, eval_every: 50, train: TrainConfig::finetune() }
    }
}

/// Everything a command needs. `seed` drives model init, data sampling and
/// dropout; it is copied into `train.seed` on resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Where `eval` writes report CSVs; defaults to `<out>/reports`.
    pub report_dir: Option<PathBuf>,
    pub seed: u64,
    /// Mixture preset the `mixture` section starts from.
    pub preset: String,
    pub mixture: MixtureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub clips: ClipConfig,
    /// Decoding for reported evaluation.
    pub decode: DecodeConfig,
    /// Decoding for dev-set checkpoint selection.
    pub dev_decode: DecodeConfig,
    pub eval_every: u64,
    pub eval_split: Split,
    /// Dev direction used for checkpoint selection; defaults to the first
    /// train sign language and its caption language.
    pub select_direction: Option<Direction>,
    /// Cap on dev segments used for selection.
    pub dev_limit: Option<usize>,
    /// Stop pretraining once this many video-bearing examples were consumed.
    pub slt_example_budget: Option<u64>,
    /// Stop pretraining at the first dev evaluation reaching this ChrF.
    pub target_dev_chrf: Option<f64>,
    pub finetune: FinetuneSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("runs/default"),
            report_dir: None,
            seed: 0,
            preset: "baseline".into(),
            mixture: MixtureConfig::preset("baseline").expect("preset exists"),
            model: ModelConfig::preset("tiny").expect("preset exists"),
            train: TrainConfig { batch_size: 16, max_steps: 2000, ..TrainConfig::pretrain() },
            clips: ClipConfig::default(),
            decode: DecodeConfig { beam_size: 5, max_len: 64, length_penalty: 0.0 },
            dev_decode: DecodeConfig { beam_size: 1, max_len: 64, length_penalty: 0.0 },
            eval_every: 250,
            eval_split: Split::Test,
            select_direction: None,
            dev_limit: None,
            slt_example_budget: None,
            target_dev_chrf: None,
            finetune: FinetuneSettings::default(),
        }
    }
}

/// Recursively overlays `top` onto `base`; objects merge key by key.
pub fn merge_json(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// Sets a dotted key such as `train.max_steps`, creating objects on the way.
pub fn set_json_path(root: &mut Value, key: &str, value: Value) -> Result<(), PipelineError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(PipelineError::Config(format!("bad key `{key}`")));
        }
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().expect("made an object above");
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*part).to_string()).or_insert(Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses `value` as JSON when possible, falling back to a plain string.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Resolves a partial JSON config: presets named by `preset` and
    /// `model.preset` supply defaults, explicit keys win.
    pub fn from_json(user: &Value) -> Result<Self, PipelineError> {
        let cfg_err = |e: String| PipelineError::Config(e);
        let mut base = RunConfig::default();
        if let Some(p) = user.get("preset").and_then(Value::as_str) {
            base.preset = p.to_string();
            base.mixture = MixtureConfig::preset(p).map_err(|e| cfg_err(e.to_string()))?;
        }
        if let Some(p) = user.pointer("/model/preset").and_then(Value::as_str) {
            base.model = ModelConfig::preset(p).map_err(|e| cfg_err(e.to_string()))?;
        }
        let mut merged = serde_json::to_value(&base).map_err(|e| cfg_err(e.to_string()))?;
        merge_json(&mut merged, user);
        let mut cfg: RunConfig =
            serde_json::from_value(merged).map_err(|e| cfg_err(format!("invalid config: {e}")))?;
        cfg.train.seed = cfg.seed;
        cfg.finetune.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Value, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("config {} is not JSON: {e}", path.display())))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.report_dir.clone().unwrap_or_else(|| self.out.join("reports"))
    }

    /// Checks knob ranges and that the corpus directory exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        self.mixture.validate().map_err(|e| cfg(e.to_string()))?;
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.finetune.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.clips.validate().map_err(|e| cfg(e.to_string()))?;
        self.decode.validate().map_err(|e| cfg(e.to_string()))?;
        self.dev_decode.validate().map_err(|e| cfg(e.to_string()))?;
        if self.eval_every == 0 {
            return Err(cfg("eval_every must be >= 1".into()));
        }
        if !self.corpus.is_dir() {
            return Err(cfg(format!("corpus directory {} does not exist", self.corpus.display())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_then_keys() {
        let cfg = RunConfig::from_json(&json!({
            "preset": "baseline+mt",
            "seed": 7,
            "mixture": {"p_mt": 0.5},
            "model": {"preset": "small", "dropout": 0.0}
        }))
        .unwrap();
        assert_eq!(cfg.mixture.p_mt, 0.5);
        assert_eq!(cfg.mixture.align_weight, 0.04);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.dropout, 0.0);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(&json!({"sede": 1})).is_err());
        assert!(RunConfig::from_json(&json!({"preset": "nope"})).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let mut v = json!({"train": {"batch_size": 4}});
        set_json_path(&mut v, "train.max_steps", parse_override_value("12")).unwrap();
        set_json_path(&mut v, "out", parse_override_value("runs/x")).unwrap();
        let cfg = RunConfig::from_json(&v).unwrap();
        assert_eq!(cfg.train.max_steps, 12);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.out, PathBuf::from("runs/x"));
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
