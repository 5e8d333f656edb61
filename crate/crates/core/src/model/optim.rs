//! Adam and a factored-second-moment Adafactor variant.

use serde::{Deserialize, Serialize};

use super::ParamLayout;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const ADAFACTOR_EPS: f64 = 1e-30;
const ADAFACTOR_DECAY: f64 = 0.8;
const ADAFACTOR_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Adafactor,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Self::Adam),
            "adafactor" => Ok(Self::Adafactor),
            other => Err(format!("unknown optimizer `{other}` (expected adam or adafactor)")),
        }
    }
}

#[derive(Debug, Clone)]
struct Factored {
    offset: usize,
    rows: usize,
    cols: usize,
    row: Vec<f64>,
    col: Vec<f64>,
}

#[derive(Debug, Clone)]
enum State {
    Adam { m: Vec<f64>, v: Vec<f64> },
    Adafactor { factored: Vec<Factored>, full: Vec<(usize, Vec<f64>)> },
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    state: State,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, layout: &ParamLayout) -> Self {
        let state = match kind {
            OptimizerKind::Adam => {
                State::Adam { m: vec![0.0; layout.total], v: vec![0.0; layout.total] }
            }
            OptimizerKind::Adafactor => {
                let mut factored = Vec::new();
                let mut full = Vec::new();
                for e in &layout.entries {
                    let s = e.span;
                    if s.rows > 1 && s.cols > 1 {
                        factored.push(Factored {
                            offset: s.offset,
                            rows: s.rows,
                            cols: s.cols,
                            row: vec![0.0; s.rows],
                            col: vec![0.0; s.cols],
                        });
                    } else {
                        full.push((s.offset, vec![0.0; s.len()]));
                    }
                }
                State::Adafactor { factored, full }
            }
        };
        Self { kind, step: 0, state }
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, params: &mut [f32], grads: &[f64], lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        match &mut self.state {
            State::Adam { m, v } => {
                let c1 = 1.0 - ADAM_BETA1.powf(t);
                let c2 = 1.0 - ADAM_BETA2.powf(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    params[i] = (params[i] as f64 - step) as f32;
                }
            }
            State::Adafactor { factored, full } => {
                let beta2 = 1.0 - t.powf(-ADAFACTOR_DECAY);
                for f in factored.iter_mut() {
                    let (r, c) = (f.rows, f.cols);
                    let g = &grads[f.offset..f.offset + r * c];
                    let mut row_mean = vec![0.0; r];
                    let mut col_mean = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            let sq = g[i * c + j] * g[i * c + j] + ADAFACTOR_EPS;
                            row_mean[i] += sq / c as f64;
                            col_mean[j] += sq / r as f64;
                        }
                    }
                    for (acc, m) in f.row.iter_mut().zip(&row_mean) {
                        *acc = beta2 * *acc + (1.0 - beta2) * m;
                    }
                    for (acc, m) in f.col.iter_mut().zip(&col_mean) {
                        *acc = beta2 * *acc + (1.0 - beta2) * m;
                    }
                    let row_total: f64 = f.row.iter().sum::<f64>() / r as f64;
                    let mut u = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let vhat = f.row[i] * f.col[j] / row_total;
                            u[i * c + j] = g[i * c + j] / vhat.sqrt();
                        }
                    }
                    apply_clipped(&mut params[f.offset..f.offset + r * c], &mut u, lr);
                }
                for (offset, acc) in full.iter_mut() {
                    let n = acc.len();
                    let g = &grads[*offset..*offset + n];
                    let mut u = vec![0.0; n];
                    for i in 0..n {
                        acc[i] = beta2 * acc[i] + (1.0 - beta2) * (g[i] * g[i] + ADAFACTOR_EPS);
                        u[i] = g[i] / acc[i].sqrt();
                    }
                    apply_clipped(&mut params[*offset..*offset + n], &mut u, lr);
                }
            }
        }
    }
}

fn apply_clipped(params: &mut [f32], u: &mut [f64], lr: f64) {
    let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt();
    let denom = (rms / ADAFACTOR_CLIP).max(1.0);
    for (p, x) in params.iter_mut().zip(u.iter()) {
        *p = (*p as f64 - lr * x / denom) as f32;
    }
}
