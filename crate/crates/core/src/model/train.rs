//! Token-level maximum likelihood training and segment finetuning.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{EncoderInput, Net};
use super::optim::{Optimizer, OptimizerKind};
use super::tokenizer::{ByteTokenizer, BOS, EOS, PAD};
use super::{task_slot, ModelConfig, ModelError, Seq2SeqModel, TaskLoss};
use crate::decode::{translate_segments, DecodeConfig};
use crate::metrics::chrf;
use crate::tasks::{segment_example, Segment, TaskExample, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            max_steps: 1000,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            max_grad_norm: 1.0,
        }
    }

    pub fn finetune() -> Self {
        Self { batch_size: 32, learning_rate: 5e-4, max_steps: 300, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.max_grad_norm < 0.0 {
            return Err(ModelError::InvalidConfig("max_grad_norm must be >= 0".into()));
        }
        Ok(())
    }
}

/// Tokenized examples. Targets end with EOS and are right-padded with PAD to
/// a common width; `lengths` counts the real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<EncoderInput>,
    pub targets: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    pub kinds: Vec<TaskKind>,
}

impl Batch {
    pub fn from_examples(
        examples: &[TaskExample],
        tok: &ByteTokenizer,
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let mut inputs = Vec::with_capacity(examples.len());
        let mut targets = Vec::with_capacity(examples.len());
        let mut kinds = Vec::with_capacity(examples.len());
        for ex in examples {
            inputs.push(EncoderInput::from_example(ex, tok, cfg)?);
            let mut t = tok.encode(&ex.target_text);
            t.push(EOS);
            if t.len() > cfg.max_text_out {
                return Err(ModelError::LengthExceeded {
                    what: "target",
                    len: t.len(),
                    cap: cfg.max_text_out,
                });
            }
            targets.push(t);
            kinds.push(ex.kind);
        }
        let lengths: Vec<usize> = targets.iter().map(Vec::len).collect();
        let width = lengths.iter().copied().max().unwrap_or(0);
        for t in targets.iter_mut() {
            t.resize(width, PAD);
        }
        Ok(Self { inputs, targets, lengths, kinds })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Mean negative log-likelihood per non-PAD target token.
    pub loss: f64,
    pub grads: Vec<f64>,
    /// Sums per task, indexed like [`TaskKind::ALL`].
    pub per_task: [TaskLoss; 4],
    pub tokens: usize,
}

impl LossReport {
    pub fn task(&self, kind: TaskKind) -> &TaskLoss {
        &self.per_task[task_slot(kind)]
    }
}

/// Mean token cross-entropy over the batch and its gradient. Dropout is on
/// only when `rng` is given. Rows are processed in order, so the result is
/// deterministic.
pub fn loss_and_grads(
    net: &Net<'_>,
    batch: &Batch,
    mut rng: Option<&mut ChaCha8Rng>,
    with_grads: bool,
) -> LossReport {
    let total = batch.token_count();
    let mut grads = if with_grads { vec![0.0; net.w.len()] } else { Vec::new() };
    let mut per_task: [TaskLoss; 4] = Default::default();
    let mut sum = 0.0;
    let scale = if total == 0 { 0.0 } else { 1.0 / total as f64 };
    for i in 0..batch.len() {
        let len = batch.lengths[i];
        let targets = &batch.targets[i][..len];
        let mut dec_in = Vec::with_capacity(len);
        dec_in.push(BOS);
        dec_in.extend_from_slice(&targets[..len - 1]);
        let fwd = net.forward(&batch.inputs[i], &dec_in, rng.as_deref_mut());
        let nll = Net::nll(&fwd, targets);
        sum += nll;
        let slot = &mut per_task[task_slot(batch.kinds[i])];
        slot.nll += nll;
        slot.tokens += len;
        slot.examples += 1;
        if with_grads {
            net.backward(&batch.inputs[i], &dec_in, targets, &fwd, scale, &mut grads);
        }
    }
    LossReport { loss: sum * scale, grads, per_task, tokens: total }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub per_task: [TaskLoss; 4],
}

/// Model, optimizer state and dropout stream for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Seq2SeqModel,
    pub cfg: TrainConfig,
    pub opt: Optimizer,
    rng: ChaCha8Rng,
    tok: ByteTokenizer,
}

impl Trainer {
    pub fn new(model: Seq2SeqModel, cfg: TrainConfig) -> Self {
        let opt = Optimizer::new(cfg.optimizer, &model.layout);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d40f);
        Self { model, cfg, opt, rng, tok: ByteTokenizer }
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn train_step(&mut self, examples: &[TaskExample]) -> Result<StepReport, ModelError> {
        let batch = Batch::from_examples(examples, &self.tok, &self.model.config)?;
        let w = self.model.params_f64();
        let net = Net { cfg: &self.model.config, lay: &self.model.layout, w: &w };
        let mut rep = loss_and_grads(&net, &batch, Some(&mut self.rng), true);
        let step = self.opt.step + 1;
        let grad_norm = rep.grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !rep.loss.is_finite() || !grad_norm.is_finite() {
            let kinds: Vec<&str> = batch.kinds.iter().map(|k| k.as_str()).collect();
            return Err(ModelError::NaNLoss {
                step,
                detail: format!(
                    "loss={} grad_norm={} batch_size={} tasks={:?}",
                    rep.loss,
                    grad_norm,
                    batch.len(),
                    kinds
                ),
            });
        }
        if self.cfg.max_grad_norm > 0.0 && grad_norm > self.cfg.max_grad_norm {
            let s = self.cfg.max_grad_norm / grad_norm;
            rep.grads.iter_mut().for_each(|g| *g *= s);
        }
        self.opt.update(&mut self.model.params, &rep.grads, self.cfg.learning_rate);
        if let Some(i) = self.model.params.iter().position(|p| !p.is_finite()) {
            return Err(ModelError::NaNLoss {
                step,
                detail: format!(
                    "parameter {} became non-finite after update (loss={})",
                    self.model.layout.name_of(i).unwrap_or("?"),
                    rep.loss
                ),
            });
        }
        Ok(StepReport { step, loss: rep.loss, grad_norm, per_task: rep.per_task })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// Dev evaluation interval in steps.
    pub eval_every: u64,
    pub decode: DecodeConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { train: TrainConfig::finetune(), eval_every: 50, decode: DecodeConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Seq2SeqModel,
    pub best_step: u64,
    /// Dev ChrF of the returned model; `None` without a dev set.
    pub best_dev_chrf: Option<f64>,
    /// `(step, loss)` per step.
    pub losses: Vec<(u64, f64)>,
    /// `(step, dev ChrF)` per evaluation, starting at step 0.
    pub dev_history: Vec<(u64, f64)>,
}

pub fn dev_chrf(model: &Seq2SeqModel, dev: &[Segment], cfg: &DecodeConfig) -> Result<f64, ModelError> {
    let hyps = translate_segments(model, dev, cfg)?;
    let refs: Vec<&str> = dev.iter().map(|s| s.target_text.as_str()).collect();
    Ok(chrf(&hyps, &refs)?)
}

/// SLT-only training on aligned segments, keeping the checkpoint with the
/// best dev ChrF (the starting model included). Without segments the model
/// is returned unchanged.
pub fn finetune(
    model: &Seq2SeqModel,
    segments: &[Segment],
    dev: &[Segment],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome, ModelError> {
    let mut out = FinetuneOutcome {
        model: model.clone(),
        best_step: 0,
        best_dev_chrf: None,
        losses: Vec::new(),
        dev_history: Vec::new(),
    };
    if !dev.is_empty() {
        let score = dev_chrf(model, dev, &cfg.decode)?;
        out.best_dev_chrf = Some(score);
        out.dev_history.push((0, score));
        info!("finetune step 0 dev chrF {score:.2}");
    }
    if segments.is_empty() {
        return Ok(out);
    }
    let examples: Vec<TaskExample> = segments.iter().map(segment_example).collect();
    let mut trainer = Trainer::new(model.clone(), cfg.train.clone());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut order: Vec<usize> = Vec::new();
    let bs = cfg.train.batch_size.min(examples.len());
    for _ in 0..cfg.train.max_steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut order_rng);
            }
            batch.push(examples[order.pop().expect("refilled above")].clone());
        }
        let rep = trainer.train_step(&batch)?;
        out.losses.push((rep.step, rep.loss));
        debug!("finetune step {} loss {:.4}", rep.step, rep.loss);
        let last = rep.step == cfg.train.max_steps;
        if !dev.is_empty() && (rep.step % cfg.eval_every.max(1) == 0 || last) {
            let score = dev_chrf(&trainer.model, dev, &cfg.decode)?;
            out.dev_history.push((rep.step, score));
            info!("finetune step {} loss {:.4} dev chrF {score:.2}", rep.step, rep.loss);
            if out.best_dev_chrf.is_none_or(|b| score > b) {
                out.best_dev_chrf = Some(score);
                out.best_step = rep.step;
                out.model = trainer.model.clone();
            }
        }
    }
    if dev.is_empty() {
        out.best_step = trainer.step();
        out.model = trainer.model;
    }
    Ok(out)
}
