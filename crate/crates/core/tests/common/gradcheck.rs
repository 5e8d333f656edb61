//! Central finite differences against the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slt_core::corpus::{Frame, FRAME_DIM};
use slt_core::model::{loss_and_grads, Batch, ByteTokenizer, ModelConfig, Net, Seq2SeqModel};
use slt_core::tasks::{mt_prompt, slt_prompt, Direction, TaskExample, TaskKind};

const ROUND_OFF: f64 = 1e-10;

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

fn frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<Frame> {
    (0..n)
        .map(|_| {
            let mut f = [0f32; FRAME_DIM];
            for v in f.iter_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
            f
        })
        .collect()
}

pub fn fixed_batch(seed: u64) -> Vec<TaskExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        TaskExample {
            prompt_text: slt_prompt("sl0", "en", false),
            frames: Some(frames(&mut rng, 7)),
            target_text: "w0 w3".into(),
            kind: TaskKind::Slt,
            direction: Direction::new("sl0", "en"),
        },
        TaskExample {
            prompt_text: mt_prompt("en", "xa", "w1 w2"),
            frames: None,
            target_text: "x2 x1".into(),
            kind: TaskKind::Mt,
            direction: Direction::new("en", "xa"),
        },
    ]
}

fn loss(model: &Seq2SeqModel, batch: &Batch, params: &[f32]) -> f64 {
    let w: Vec<f64> = params.iter().map(|&p| p as f64).collect();
    let net = Net { cfg: &model.config, lay: &model.layout, w: &w };
    loss_and_grads(&net, batch, None, false).loss
}

/// Checks `samples` parameters drawn uniformly from those whose analytic
/// gradient is above round-off level. Some gradients vanish identically (key
/// biases under softmax shift invariance, unused embedding rows) and are
/// skipped. Relative error is `|a − n| / max(|a|, |n|)`.
pub fn run(samples: usize, h: f32, seed: u64) -> GradCheck {
    let mut cfg = ModelConfig::preset("tiny").unwrap();
    cfg.dropout = 0.0;
    let model = Seq2SeqModel::new(cfg, seed).unwrap();
    let batch = Batch::from_examples(&fixed_batch(seed), &ByteTokenizer, &model.config).unwrap();
    let w = model.params_f64();
    let net = Net { cfg: &model.config, lay: &model.layout, w: &w };
    let analytic = loss_and_grads(&net, &batch, None, true).grads;
    let live: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i].abs() > ROUND_OFF).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut out = GradCheck { checked: 0, max_rel_err: 0.0, worst: String::new() };
    let mut params = model.params.clone();
    for _ in 0..samples {
        let i = live[rng.random_range(0..live.len())];
        let p0 = params[i];
        let (up, down) = (p0 + h, p0 - h);
        params[i] = up;
        let lu = loss(&model, &batch, &params);
        params[i] = down;
        let ld = loss(&model, &batch, &params);
        params[i] = p0;
        let numeric = (lu - ld) / (up as f64 - down as f64);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst = format!(
                "{}[{i}] analytic={a:.6e} numeric={numeric:.6e}",
                model.layout.name_of(i).unwrap_or("?")
            );
        }
        out.checked += 1;
    }
    out
}
