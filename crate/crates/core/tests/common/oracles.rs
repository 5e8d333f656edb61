//! Brute-force reference implementations and random instance checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slt_core::clips::covered_captions;
use slt_core::corpus::Caption;
use slt_core::metrics;

fn windows<T: Clone>(xs: &[T], n: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= xs.len() {
        out.push(xs[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn occurrences<T: PartialEq>(list: &[Vec<T>], g: &[T]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

/// Clipped matches, hypothesis total, reference total, by linear scans.
fn clipped<T: PartialEq + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = windows(hyp, n);
    let r = windows(reference, n);
    let mut seen: Vec<Vec<T>> = Vec::new();
    let mut matches = 0;
    for g in &h {
        if seen.iter().any(|s| s == g) {
            continue;
        }
        seen.push(g.clone());
        matches += occurrences(&h, g).min(occurrences(&r, g));
    }
    (matches, h.len(), r.len())
}

pub fn bleu(hyps: &[String], refs: &[String]) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let mut hl = 0;
    let mut rl = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<String> = h.split_whitespace().map(str::to_string).collect();
        let r: Vec<String> = r.split_whitespace().map(str::to_string).collect();
        hl += h.len();
        rl += r.len();
        for n in 1..=4 {
            let (a, b, _) = clipped(&h, &r, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
    }
    if hl == 0 {
        return if rl == 0 { 100.0 } else { 0.0 };
    }
    let mut product = 1.0f64;
    let mut k = 0;
    for n in 0..4 {
        if t[n] > 0 {
            let p = if m[n] > 0 { m[n] as f64 / t[n] as f64 } else { 0.1 / t[n] as f64 };
            product *= p;
            k += 1;
        }
    }
    let bp = if hl >= rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
    100.0 * bp * product.powf(1.0 / k as f64)
}

fn collapse(s: &str) -> Vec<char> {
    let mut out = Vec::new();
    let mut pending = false;
    for c in s.chars() {
        if c.is_whitespace() {
            pending = !out.is_empty();
        } else {
            if pending {
                out.push(' ');
                pending = false;
            }
            out.push(c);
        }
    }
    out
}

pub fn chrf(hyps: &[String], refs: &[String]) -> f64 {
    let mut sum = 0.0;
    let mut orders = 0;
    for n in 1..=6 {
        let (mut m, mut h, mut r) = (0, 0, 0);
        for (a, b) in hyps.iter().zip(refs) {
            let (x, y, z) = clipped(&collapse(a), &collapse(b), n);
            m += x;
            h += y;
            r += z;
        }
        if h + r == 0 {
            continue;
        }
        orders += 1;
        if m > 0 {
            let p = m as f64 / h as f64;
            let rc = m as f64 / r as f64;
            sum += 5.0 * p * rc / (4.0 * p + rc);
        }
    }
    if orders == 0 {
        100.0
    } else {
        100.0 * sum / orders as f64
    }
}

/// Rank by counting smaller and equal values; Pearson from raw sums.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let sx: f64 = rx.iter().sum();
    let sy: f64 = ry.iter().sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|a| a * a).sum();
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let cov = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 1e-12 || vy <= 1e-12 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

pub fn covered(caps: &[Caption], s: f64, e: f64) -> Vec<Caption> {
    caps.iter().filter(|c| s <= c.start_s && c.end_s <= e).cloned().collect()
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let words = ["a", "b", "ab", "ba", "c"];
    let n = rng.random_range(0..7);
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push_str(if rng.random_bool(0.2) { "  " } else { " " });
        }
        s.push_str(words[rng.random_range(0..words.len())]);
    }
    s
}

/// `n` random small corpora; a few sentences drawn from a tiny vocabulary.
pub fn random_corpora(n: usize, seed: u64) -> Vec<(Vec<String>, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(1..5);
            let refs: Vec<String> = (0..k).map(|_| sentence(&mut rng)).collect();
            let hyps: Vec<String> = refs
                .iter()
                .map(|r| if rng.random_bool(0.25) { r.clone() } else { sentence(&mut rng) })
                .collect();
            (hyps, refs)
        })
        .collect()
}

pub struct OracleCheck {
    pub instances: usize,
    pub max_err: f64,
}

pub fn check_bleu(n: usize, seed: u64) -> OracleCheck {
    let max_err = random_corpora(n, seed)
        .iter()
        .map(|(h, r)| (metrics::bleu(h, r).unwrap() - bleu(h, r)).abs())
        .fold(0.0, f64::max);
    OracleCheck { instances: n, max_err }
}

pub fn check_chrf(n: usize, seed: u64) -> OracleCheck {
    let max_err = random_corpora(n, seed)
        .iter()
        .map(|(h, r)| (metrics::chrf(h, r).unwrap() - chrf(h, r)).abs())
        .fold(0.0, f64::max);
    OracleCheck { instances: n, max_err }
}

/// Random lists with frequent ties; constant inputs must be rejected by both.
pub fn check_spearman(n: usize, seed: u64) -> OracleCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..n {
        let len = rng.random_range(3..9);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(0..5) as f64).collect();
        let y: Vec<f64> = (0..len).map(|_| rng.random_range(0..5) as f64 * 0.5).collect();
        match (metrics::spearman(&x, &y), spearman(&x, &y)) {
            (Ok(a), Some(b)) => max_err = max_err.max((a - b).abs()),
            (Err(_), None) => {}
            _ => max_err = f64::INFINITY,
        }
    }
    OracleCheck { instances: n, max_err }
}

/// Number of instances where coverage differs from the filter oracle.
pub fn check_coverage(n: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..n {
        let k = rng.random_range(0..10);
        let mut caps: Vec<Caption> = (0..k)
            .map(|_| {
                let a = rng.random_range(0..120) as f64 / 4.0;
                let l = rng.random_range(1..30) as f64 / 4.0;
                Caption::new(a, a + l, "t", "en")
            })
            .collect();
        caps.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let s = rng.random_range(0..120) as f64 / 4.0;
        let e = s + rng.random_range(0..80) as f64 / 4.0;
        if covered_captions(&caps, s, e) != covered(&caps, s, e) {
            mismatches += 1;
        }
    }
    (n, mismatches)
}
