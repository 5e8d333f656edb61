//! Pipeline commands: generate, pretrain, finetune, translate, eval, report,
//! plus the experiment lab behind the `exp:*` presets.

mod commands;
mod config;
pub mod experiments;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::metrics::MetricError;
use crate::mixture::MixtureError;
use crate::model::ModelError;
use crate::synth::SynthError;

pub use commands::{
    cmd_eval, cmd_finetune, cmd_gen, cmd_pretrain, cmd_report, cmd_translate, dev_segments,
    direction_segments, DevPoint, EvalRequest, FinetuneRun, PretrainOutcome, ReportOutcome,
    LOG_FILE, BEST_CKPT, LAST_CKPT, FINETUNE_CKPT,
};
pub use config::{merge_json, parse_override_value, set_json_path, FinetuneSettings, RunConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("corpus has no {split} references for direction {direction}")]
    MissingDirection { direction: String, split: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Mixture(MixtureError::InvalidConfig(_) | MixtureError::UnknownPreset(_)) => 1,
            PipelineError::Model(ModelError::InvalidConfig(_) | ModelError::UnknownPreset(_)) => 1,
            PipelineError::Synth(SynthError::InvalidSpec(_)) => 1,
            PipelineError::Model(ModelError::NaNLoss { .. }) => 3,
            _ => 2,
        }
    }
}
