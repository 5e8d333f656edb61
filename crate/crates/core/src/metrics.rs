//! Corpus BLEU, ChrF and Spearman rank correlation, plus the evaluation
//! report rows they feed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("report parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

pub const BLEU_MAX_ORDER: usize = 4;
/// Numerator substituted for an n-gram order with no matches.
pub const BLEU_SMOOTH_EPS: f64 = 0.1;
pub const CHRF_MAX_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

fn check_lengths(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<(), MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches, hypothesis n-gram total and reference n-gram total.
fn overlap<T: Eq + std::hash::Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (
        matches,
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

/// Corpus-level 4-gram BLEU over whitespace tokens, on a 0-100 scale.
///
/// Orders with hypothesis n-grams but no matches use precision
/// `BLEU_SMOOTH_EPS / total`; orders with no hypothesis n-grams at all are
/// left out of the geometric mean.
pub fn bleu(hypotheses: &[impl AsRef<str>], references: &[impl AsRef<str>]) -> Result<f64, MetricError> {
    check_lengths(hypotheses, references)?;
    let mut matches = [0usize; BLEU_MAX_ORDER];
    let mut totals = [0usize; BLEU_MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_MAX_ORDER {
            let (m, t, _) = overlap(&h, &r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if hyp_len == 0 {
        return Ok(if ref_len == 0 { 100.0 } else { 0.0 });
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..BLEU_MAX_ORDER {
        if totals[n] == 0 {
            continue;
        }
        orders += 1;
        let p = if matches[n] == 0 {
            BLEU_SMOOTH_EPS / totals[n] as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Collapses whitespace runs to one space and trims the ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Corpus-level character n-gram F-score (orders 1..=6, beta 2), 0-100.
///
/// Statistics are summed over the corpus per order; the score is the mean
/// F-beta over orders where either side has n-grams. Spaces count as
/// characters after whitespace normalization.
pub fn chrf(hypotheses: &[impl AsRef<str>], references: &[impl AsRef<str>]) -> Result<f64, MetricError> {
    check_lengths(hypotheses, references)?;
    let mut stats = [(0usize, 0usize, 0usize); CHRF_MAX_ORDER];
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<char> = normalize_whitespace(h.as_ref()).chars().collect();
        let r: Vec<char> = normalize_whitespace(r.as_ref()).chars().collect();
        for n in 1..=CHRF_MAX_ORDER {
            let (m, ht, rt) = overlap(&h, &r, n);
            let s = &mut stats[n - 1];
            s.0 += m;
            s.1 += ht;
            s.2 += rt;
        }
    }
    Ok(chrf_from_stats(&stats))
}

fn chrf_from_stats(stats: &[(usize, usize, usize)]) -> f64 {
    let beta2 = CHRF_BETA * CHRF_BETA;
    let mut total = 0.0;
    let mut orders = 0;
    for &(m, h, r) in stats {
        if h == 0 && r == 0 {
            continue;
        }
        orders += 1;
        if m == 0 {
            continue;
        }
        let p = m as f64 / h as f64;
        let rec = m as f64 / r as f64;
        total += (1.0 + beta2) * p * rec / (beta2 * p + rec);
    }
    if orders == 0 {
        // Both sides empty everywhere.
        return 100.0;
    }
    100.0 * total / orders as f64
}

/// Sentence-level ChrF, for per-segment diagnostics.
pub fn sentence_chrf(hyp: &str, reference: &str) -> f64 {
    chrf(&[hyp], &[reference]).expect("single pair is never empty")
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch {
            hyps: x.len(),
            refs: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(MetricError::DegenerateInput(format!("need at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::DegenerateInput("non-finite value".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| MetricError::DegenerateInput("constant input has no rank correlation".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub benchmark: String,
    pub direction: String,
    pub stage: Stage,
    pub seed: u64,
    pub bleu: f64,
    pub chrf: f64,
}

pub const REPORT_HEADER: &str = "benchmark,direction,stage,seed,bleu,chrf";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{:.4}",
                r.benchmark,
                r.direction,
                r.stage.as_str(),
                r.seed,
                r.bleu,
                r.chrf
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, MetricError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == REPORT_HEADER => {}
            _ => {
                return Err(MetricError::Parse {
                    line: 1,
                    reason: format!("expected header {REPORT_HEADER:?}"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| MetricError::Parse { line: i + 1, reason };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(err(format!("expected 6 columns, found {}", cols.len())));
            }
            rows.push(EvalRow {
                benchmark: cols[0].to_string(),
                direction: cols[1].to_string(),
                stage: cols[2].parse().map_err(err)?,
                seed: cols[3].parse().map_err(|e| err(format!("seed: {e}")))?,
                bleu: cols[4].parse().map_err(|e| err(format!("bleu: {e}")))?,
                chrf: cols[5].parse().map_err(|e| err(format!("chrf: {e}")))?,
            });
        }
        Ok(EvalReport {
            checkpoint: String::new(),
            rows,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricError> {
        fs::write(path, self.to_csv()).map_err(|e| MetricError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read_csv(path: &Path) -> Result<Self, MetricError> {
        let text = fs::read_to_string(path).map_err(|e| MetricError::Io(format!("{}: {e}", path.display())))?;
        let mut report = Self::from_csv(&text)?;
        report.checkpoint = path.display().to_string();
        Ok(report)
    }

    /// Plain-text table with one line per row; the learned-metric column is
    /// always reported as unavailable.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<10} {:<9} {:>6} {:>8} {:>8}  {}\n",
            "benchmark", "direction", "stage", "seed", "BLEU", "ChrF", "learned-metric"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:<10} {:<9} {:>6} {:>8.2} {:>8.2}  unavailable",
                r.benchmark,
                r.direction,
                r.stage.as_str(),
                r.seed,
                r.bleu,
                r.chrf
            );
        }
        out
    }
}
