//! Encoder-decoder transformer over byte tokens and projected landmark frames.
//!
//! Parameters live in one flat `f32` buffer described by a [`ParamLayout`].
//! Forward and backward passes run in `f64` over a converted copy.

mod checkpoint;
mod kernels;
mod network;
mod optim;
pub mod tokenizer;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::FRAME_DIM;
use crate::tasks::TaskKind;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use network::{DecoderState, EncodedInput, EncoderInput, Net};
pub use optim::{Optimizer, OptimizerKind};
pub use tokenizer::{ByteTokenizer, BOS, EOS, PAD, VOCAB_SIZE};
pub use train::{
    finetune, loss_and_grads, Batch, FinetuneConfig, FinetuneOutcome, LossReport, TrainConfig,
    Trainer,
};

pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what} length {len} exceeds cap {cap}")]
    LengthExceeded { what: &'static str, len: usize, cap: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NaNLoss { step: u64, detail: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown size preset `{0}`")]
    UnknownPreset(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub preset: String,
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_text_in: usize,
    pub max_frames_in: usize,
    pub max_text_out: usize,
    pub dropout: f64,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset("tiny").expect("tiny preset exists")
    }
}

pub const SIZE_PRESETS: [&str; 3] = ["tiny", "small", "base-toy"];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self, ModelError> {
        let (d_model, layers, n_heads, d_ff) = match name {
            "tiny" => (16, 1, 2, 64),
            "small" => (32, 2, 4, 128),
            "base-toy" => (64, 3, 4, 256),
            other => return Err(ModelError::UnknownPreset(other.to_string())),
        };
        Ok(Self {
            preset: name.to_string(),
            d_model,
            n_layers_enc: layers,
            n_layers_dec: layers,
            n_heads,
            d_ff,
            max_text_in: DEFAULT_MAX_LEN,
            max_frames_in: DEFAULT_MAX_LEN,
            max_text_out: DEFAULT_MAX_LEN,
            dropout: 0.1,
            init_scale: 0.05,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_text_in == 0 || self.max_text_out == 0 {
            return bad("length caps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale {} must be positive", self.init_scale));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    ///
    /// With `d = d_model`, `f = d_ff`, `V = 259`, `F = 255`:
    ///
    /// ```text
    /// V·d                              token embedding (tied with the output)
    /// + F·d + d                        frame projection
    /// + (max_text_in + max_frames_in)·d + max_text_out·d   positions
    /// + L_enc·(4(d²+d) + 4d + 2df + f + d)
    /// + L_dec·(8(d²+d) + 6d + 2df + f + d)
    /// + 4d                             final encoder and decoder norms
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let attn = 4 * (d * d + d);
        let ffn = 2 * d * f + f + d;
        VOCAB_SIZE * d
            + FRAME_DIM * d
            + d
            + (self.max_text_in + self.max_frames_in) * d
            + self.max_text_out * d
            + self.n_layers_enc * (attn + 2 * 2 * d + ffn)
            + self.n_layers_dec * (2 * attn + 3 * 2 * d + ffn)
            + 4 * d
    }
}

/// A row-major `rows × cols` block inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearSpan {
    pub w: Span,
    pub b: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormSpan {
    pub gain: Span,
    pub bias: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSpan {
    pub q: LinearSpan,
    pub k: LinearSpan,
    pub v: LinearSpan,
    pub o: LinearSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnSpan {
    pub up: LinearSpan,
    pub down: LinearSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncLayerSpan {
    pub ln_attn: NormSpan,
    pub attn: AttnSpan,
    pub ln_ffn: NormSpan,
    pub ffn: FfnSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecLayerSpan {
    pub ln_self: NormSpan,
    pub self_attn: AttnSpan,
    pub ln_cross: NormSpan,
    pub cross_attn: AttnSpan,
    pub ln_ffn: NormSpan,
    pub ffn: FfnSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Embedding,
    FanIn,
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub span: Span,
    init: Init,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub tok_emb: Span,
    pub frame_proj: LinearSpan,
    pub enc_pos: Span,
    pub dec_pos: Span,
    pub enc: Vec<EncLayerSpan>,
    pub enc_norm: NormSpan,
    pub dec: Vec<DecLayerSpan>,
    pub dec_norm: NormSpan,
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    next: usize,
}

impl LayoutBuilder {
    fn span(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Span {
        let span = Span { offset: self.next, rows, cols };
        self.next += span.len();
        self.entries.push(ParamEntry { name, span, init });
        span
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, w_init: Init) -> LinearSpan {
        LinearSpan {
            w: self.span(format!("{name}.weight"), d_in, d_out, w_init),
            b: self.span(format!("{name}.bias"), 1, d_out, Init::Zero),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormSpan {
        NormSpan {
            gain: self.span(format!("{name}.gain"), 1, d, Init::One),
            bias: self.span(format!("{name}.bias"), 1, d, Init::Zero),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnSpan {
        AttnSpan {
            q: self.linear(&format!("{name}.q"), d, d, Init::FanIn),
            k: self.linear(&format!("{name}.k"), d, d, Init::FanIn),
            v: self.linear(&format!("{name}.v"), d, d, Init::FanIn),
            o: self.linear(&format!("{name}.o"), d, d, Init::FanIn),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FfnSpan {
        FfnSpan {
            up: self.linear(&format!("{name}.up"), d, f, Init::FanIn),
            down: self.linear(&format!("{name}.down"), f, d, Init::FanIn),
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = LayoutBuilder { entries: Vec::new(), next: 0 };
        let tok_emb = b.span("tok_emb".into(), VOCAB_SIZE, d, Init::Embedding);
        let frame_proj = b.linear("frame_proj", FRAME_DIM, d, Init::Embedding);
        let enc_pos =
            b.span("enc_pos".into(), cfg.max_text_in + cfg.max_frames_in, d, Init::Embedding);
        let dec_pos = b.span("dec_pos".into(), cfg.max_text_out, d, Init::Embedding);
        let enc = (0..cfg.n_layers_enc)
            .map(|i| {
                let p = format!("enc.{i}");
                EncLayerSpan {
                    ln_attn: b.norm(&format!("{p}.ln_attn"), d),
                    attn: b.attn(&format!("{p}.attn"), d),
                    ln_ffn: b.norm(&format!("{p}.ln_ffn"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ff),
                }
            })
            .collect();
        let enc_norm = b.norm("enc_norm", d);
        let dec = (0..cfg.n_layers_dec)
            .map(|i| {
                let p = format!("dec.{i}");
                DecLayerSpan {
                    ln_self: b.norm(&format!("{p}.ln_self"), d),
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    ln_cross: b.norm(&format!("{p}.ln_cross"), d),
                    cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                    ln_ffn: b.norm(&format!("{p}.ln_ffn"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ff),
                }
            })
            .collect();
        let dec_norm = b.norm("dec_norm", d);
        Self {
            tok_emb,
            frame_proj,
            enc_pos,
            dec_pos,
            enc,
            enc_norm,
            dec,
            dec_norm,
            total: b.next,
            entries: b.entries,
        }
    }

    /// Shape of every parameter tensor, `(rows, cols)` keyed by name.
    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        self.entries.iter().map(|e| (e.name.clone(), e.span.rows, e.span.cols)).collect()
    }

    /// Tensor name owning flat index `i`.
    pub fn name_of(&self, i: usize) -> Option<&str> {
        self.entries.iter().find(|e| e.span.range().contains(&i)).map(|e| e.name.as_str())
    }
}

/// Draws from N(0, std²) truncated at two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f32>,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0f32; layout.total];
        for e in &layout.entries {
            let slot = &mut params[e.span.range()];
            match e.init {
                Init::Zero => {}
                Init::One => slot.fill(1.0),
                Init::Embedding => {
                    for p in slot.iter_mut() {
                        *p = truncated_normal(&mut rng, config.init_scale) as f32;
                    }
                }
                Init::FanIn => {
                    let std = 1.0 / (e.span.rows as f64).sqrt();
                    for p in slot.iter_mut() {
                        *p = truncated_normal(&mut rng, std) as f32;
                    }
                }
            }
        }
        Ok(Self { config, layout, params })
    }

    /// Rebuilds a model from raw parameters, checking the buffer size and finiteness.
    pub fn from_params(config: ModelConfig, params: Vec<f32>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "non-finite parameter in {}",
                layout.name_of(i).unwrap_or("?")
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&p| p as f64).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Read-only compute view with parameters widened to `f64`.
    pub fn net(&self) -> OwnedNet {
        OwnedNet { config: self.config.clone(), layout: self.layout.clone(), w: self.params_f64() }
    }
}

/// Parameters widened to `f64` once, shared across many forward passes.
#[derive(Debug, Clone)]
pub struct OwnedNet {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub w: Vec<f64>,
}

impl OwnedNet {
    pub fn view(&self) -> Net<'_> {
        Net { cfg: &self.config, lay: &self.layout, w: &self.w }
    }
}

/// Per-task sums accumulated by a loss evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskLoss {
    pub nll: f64,
    pub tokens: usize,
    pub examples: usize,
}

pub(crate) fn task_slot(kind: TaskKind) -> usize {
    TaskKind::ALL.iter().position(|&k| k == kind).expect("kind listed in ALL")
}
