//! Greedy and beam-search decoding, segment translation and the cascade
//! baseline.

use serde::{Deserialize, Serialize};

use crate::corpus::Frame;
use crate::model::{
    ByteTokenizer, DecoderState, EncoderInput, ModelError, Net, Seq2SeqModel, BOS, EOS, PAD,
    VOCAB_SIZE,
};
use crate::tasks::{slt_prompt, MtOracle, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum output tokens, EOS included.
    pub max_len: usize,
    /// Exponent `α` in `score = logprob / len^α`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 5, max_len: 512, length_penalty: 0.0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.beam_size == 0 {
            return Err(ModelError::InvalidConfig("beam_size must be >= 1".into()));
        }
        if self.max_len == 0 || self.max_len > crate::model::DEFAULT_MAX_LEN {
            return Err(ModelError::InvalidConfig(format!(
                "max_len must be in 1..=512, got {}",
                self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output tokens, without BOS and without the final EOS.
    pub tokens: Vec<u32>,
    /// Total log-probability, EOS included when finished.
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Scored length: output tokens plus EOS when finished.
    pub fn len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn score(logprob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logprob
    } else {
        logprob / (len.max(1) as f64).powf(alpha)
    }
}

fn emittable(v: usize) -> bool {
    v as u32 != PAD && v as u32 != BOS
}

struct Live {
    tokens: Vec<u32>,
    logprob: f64,
    state: DecoderState,
    next: Vec<f64>,
}

/// Step-wise argmax, ties to the lower token id.
pub fn greedy(net: &Net<'_>, input: &EncoderInput, max_len: usize) -> Result<Hypothesis, ModelError> {
    let enc = net.encode(input);
    let mut state = net.start_decoder(&enc);
    let mut next = state.step(net, BOS)?;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    for t in 0..max_len {
        let mut best = usize::MAX;
        for v in (0..VOCAB_SIZE).filter(|&v| emittable(v)) {
            if best == usize::MAX || next[v] > next[best] {
                best = v;
            }
        }
        logprob += next[best];
        if best as u32 == EOS {
            return Ok(Hypothesis { tokens, logprob, score: logprob, finished: true });
        }
        tokens.push(best as u32);
        if t + 1 < max_len {
            next = state.step(net, best as u32)?;
        }
    }
    Ok(Hypothesis { tokens, logprob, score: logprob, finished: false })
}

/// Beam search over the full byte vocabulary.
///
/// Each step ranks all `(beam, token)` extensions by accumulated log-prob
/// (ties: lower token id, then earlier beam) and walks the ranking: EOS
/// extensions become finished hypotheses, others fill the next beam until it
/// holds `beam_size` entries. With `α = 0` the search stops as soon as the
/// best finished score is at least the best live score, which no extension
/// can beat; otherwise it stops once `beam_size` hypotheses have finished.
pub fn beam_search(net: &Net<'_>, input: &EncoderInput, cfg: &DecodeConfig) -> Result<Hypothesis, ModelError> {
    cfg.validate()?;
    let alpha = cfg.length_penalty;
    let k = cfg.beam_size;
    let enc = net.encode(input);
    let mut state = net.start_decoder(&enc);
    let next = state.step(net, BOS)?;
    let mut live = vec![Live { tokens: Vec::new(), logprob: 0.0, state, next }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for t in 0..cfg.max_len {
        let mut cands: Vec<(f64, u32, usize)> = Vec::with_capacity(live.len() * VOCAB_SIZE);
        for (bi, beam) in live.iter().enumerate() {
            for v in (0..VOCAB_SIZE).filter(|&v| emittable(v)) {
                cands.push((beam.logprob + beam.next[v], v as u32, bi));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let last_step = t + 1 == cfg.max_len;
        let mut next_live = Vec::with_capacity(k);
        for &(lp, v, bi) in &cands {
            if next_live.len() == k {
                break;
            }
            let parent = &live[bi];
            if v == EOS {
                let len = parent.tokens.len() + 1;
                finished.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    logprob: lp,
                    score: score(lp, len, alpha),
                    finished: true,
                });
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(v);
            let mut state = parent.state.clone();
            let next = if last_step { Vec::new() } else { state.step(net, v)? };
            next_live.push(Live { tokens, logprob: lp, state, next });
        }
        live = next_live;
        let best_finished = best_of(&finished);
        if live.is_empty() {
            break;
        }
        if alpha == 0.0 {
            let best_live = live.iter().map(|l| l.logprob).fold(f64::NEG_INFINITY, f64::max);
            if best_finished.is_some_and(|h| h.score >= best_live) {
                break;
            }
        } else if finished.len() >= k {
            break;
        }
    }

    if let Some(h) = best_of(&finished) {
        let unfinished_better = alpha == 0.0
            && live.iter().any(|l| l.logprob > h.score);
        if !unfinished_better {
            return Ok(h.clone());
        }
    }
    let mut best: Option<Hypothesis> = None;
    for l in &live {
        let s = score(l.logprob, l.tokens.len(), alpha);
        if best.as_ref().is_none_or(|b| s > b.score) {
            best = Some(Hypothesis { tokens: l.tokens.clone(), logprob: l.logprob, score: s, finished: false });
        }
    }
    let finished_best = best_of(&finished).cloned();
    Ok(match (best, finished_best) {
        (Some(b), Some(f)) => if f.score >= b.score { f } else { b },
        (Some(b), None) => b,
        (None, Some(f)) => f,
        (None, None) => unreachable!("the search keeps at least one hypothesis"),
    })
}

/// Highest score; the earliest wins ties.
fn best_of(hyps: &[Hypothesis]) -> Option<&Hypothesis> {
    let mut best: Option<&Hypothesis> = None;
    for h in hyps {
        if best.is_none_or(|b| h.score > b.score) {
            best = Some(h);
        }
    }
    best
}

/// Decodes with the genuine SLT prompt for `sign_lang → tgt_lang`.
pub fn translate_segment(
    net: &Net<'_>,
    frames: &[Frame],
    sign_lang: &str,
    tgt_lang: &str,
    cfg: &DecodeConfig,
) -> Result<String, ModelError> {
    let tok = ByteTokenizer;
    let prompt = tok.encode(&slt_prompt(sign_lang, tgt_lang, false));
    let input = EncoderInput::new(prompt, frames.to_vec(), net.cfg)?;
    let hyp = if cfg.beam_size == 1 {
        greedy(net, &input, cfg.max_len)?
    } else {
        beam_search(net, &input, cfg)?
    };
    Ok(tok.decode(&hyp.tokens))
}

/// Translates every segment into its own target language.
pub fn translate_segments(
    model: &Seq2SeqModel,
    segments: &[Segment],
    cfg: &DecodeConfig,
) -> Result<Vec<String>, ModelError> {
    let owned = model.net();
    let net = owned.view();
    segments
        .iter()
        .map(|s| translate_segment(&net, &s.frames, &s.sign_lang, &s.tgt_lang, cfg))
        .collect()
}

/// Translates into `pivot_lang`, then maps the text to `tgt_lang` with the oracle.
pub fn cascade_translate(
    net: &Net<'_>,
    frames: &[Frame],
    sign_lang: &str,
    pivot_lang: &str,
    tgt_lang: &str,
    oracle: &dyn MtOracle,
    cfg: &DecodeConfig,
) -> Result<String, ModelError> {
    let pivot = translate_segment(net, frames, sign_lang, pivot_lang, cfg)?;
    Ok(oracle.translate(&pivot, pivot_lang, tgt_lang)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FRAME_DIM;
    use crate::model::{ModelConfig, OwnedNet, Seq2SeqModel};
    use crate::synth::{ToyLanguage, ToyMt, WordOrder};
    use crate::tasks::IdentityOracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> EncoderInput {
        let n_tok = rng.random_range(1..12);
        let tokens = (0..n_tok).map(|_| rng.random_range(3..259)).collect();
        let n_frames = rng.random_range(0..8);
        let frames = (0..n_frames)
            .map(|_| {
                let mut f = [0f32; FRAME_DIM];
                for v in f.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                f
            })
            .collect();
        EncoderInput::new(tokens, frames, cfg).unwrap()
    }

    /// A random model with sharper output distributions so decodes terminate.
    fn peaked_model(seed: u64) -> OwnedNet {
        let mut model = Seq2SeqModel::new(ModelConfig::preset("tiny").unwrap(), seed).unwrap();
        let emb = model.layout.tok_emb;
        for p in &mut model.params[emb.range()] {
            *p *= 60.0;
        }
        model.net()
    }

    /// Forces BOS → 'a' → EOS: the decoder position embedding at step `t`
    /// points strongly along the embedding of the token to emit.
    fn forcing_model() -> OwnedNet {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.dropout = 0.0;
        let mut model = Seq2SeqModel::new(cfg, 0).unwrap();
        let lay = model.layout.clone();
        let d = model.config.d_model;
        let p = &mut model.params;
        for e in &lay.entries {
            if e.name.starts_with("dec.") && (e.name.ends_with(".weight") || e.name.contains(".ln_")) {
                p[e.span.range()].fill(0.0);
            }
        }
        for i in lay.tok_emb.range() {
            p[i] = 0.0;
        }
        let a = b'a' as usize + 3;
        let eos = EOS as usize;
        // token embeddings: one-hot directions for 'a' and EOS, balanced around zero
        for j in 0..d {
            p[lay.tok_emb.offset + a * d + j] = if j == 0 { 1.0 } else if j == 1 { -1.0 } else { 0.0 };
            p[lay.tok_emb.offset + eos * d + j] = if j == 2 { 1.0 } else if j == 3 { -1.0 } else { 0.0 };
        }
        for i in lay.dec_pos.range() {
            p[i] = 0.0;
        }
        let pos = |t: usize, j: usize| lay.dec_pos.offset + t * d + j;
        for t in 0..lay.dec_pos.rows {
            let (hi, lo) = if t == 0 { (0, 1) } else { (2, 3) };
            p[pos(t, hi)] = 50.0;
            p[pos(t, lo)] = -50.0;
        }
        model.params.iter_mut().for_each(|v| assert!(v.is_finite()));
        model.net()
    }

    #[test]
    fn forced_sequence_decodes_to_a() {
        let owned = forcing_model();
        let net = owned.view();
        let cfg_m = owned.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_input(&mut rng, &cfg_m);
        let tok = ByteTokenizer;
        for beam in [1, 2, 5] {
            let cfg = DecodeConfig { beam_size: beam, max_len: 20, length_penalty: 0.0 };
            let h = beam_search(&net, &input, &cfg).unwrap();
            assert_eq!(tok.decode(&h.tokens), "a", "beam {beam}");
            assert!(h.finished);
        }
        assert_eq!(tok.decode(&greedy(&net, &input, 20).unwrap().tokens), "a");
    }

    #[test]
    fn beam_one_is_greedy() {
        let owned = peaked_model(3);
        let net = owned.view();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let input = random_input(&mut rng, &owned.config);
            let g = greedy(&net, &input, 24).unwrap();
            let b = beam_search(&net, &input, &DecodeConfig { beam_size: 1, max_len: 24, length_penalty: 0.0 })
                .unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert_eq!(g.finished, b.finished);
            assert!((g.logprob - b.logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn never_emits_pad_or_bos() {
        let owned = peaked_model(4);
        let net = owned.view();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let input = random_input(&mut rng, &owned.config);
            let h = beam_search(&net, &input, &DecodeConfig { beam_size: 3, max_len: 16, length_penalty: 0.5 })
                .unwrap();
            assert!(h.tokens.iter().all(|&t| t != PAD && t != BOS && t != EOS));
            assert!(h.len() <= 16);
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let owned = peaked_model(5);
        let net = owned.view();
        let frames = vec![[0.1f32; FRAME_DIM]; 4];
        let cfg = DecodeConfig { beam_size: 3, max_len: 16, length_penalty: 0.0 };
        let a = translate_segment(&net, &frames, "sl0", "en", &cfg).unwrap();
        let b = translate_segment(&net, &frames, "sl0", "en", &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_frames_still_decode() {
        let owned = peaked_model(6);
        let net = owned.view();
        let cfg = DecodeConfig { beam_size: 2, max_len: 8, length_penalty: 0.0 };
        assert!(translate_segment(&net, &[], "sl0", "en", &cfg).is_ok());
    }

    #[test]
    fn cascade_with_identity_oracle_matches_direct() {
        let owned = peaked_model(7);
        let net = owned.view();
        let frames = vec![[0.2f32; FRAME_DIM]; 3];
        let cfg = DecodeConfig { beam_size: 2, max_len: 12, length_penalty: 0.0 };
        let direct = translate_segment(&net, &frames, "sl0", "en", &cfg).unwrap();
        let cascade = cascade_translate(&net, &frames, "sl0", "en", "xa", &IdentityOracle, &cfg).unwrap();
        assert_eq!(direct, cascade);
    }

    #[test]
    fn cascade_applies_toy_oracle() {
        let owned = forcing_model();
        let net = owned.view();
        let en = ToyLanguage::with_words("en", WordOrder::Identity, vec!["a".into(), "b".into()]);
        let xa = ToyLanguage::with_words("xa", WordOrder::Reversed, vec!["x1".into(), "x0".into()]);
        let oracle = ToyMt::new([en, xa]);
        let cfg = DecodeConfig { beam_size: 2, max_len: 8, length_penalty: 0.0 };
        let out = cascade_translate(&net, &[], "sl0", "en", "xa", &oracle, &cfg).unwrap();
        assert_eq!(out, "x1");
        let err = cascade_translate(&net, &[], "sl0", "en", "zz", &oracle, &cfg).unwrap_err();
        assert!(err.to_string().contains("zz"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig { beam_size: 0, ..Default::default() }.validate().is_err());
        assert!(DecodeConfig { max_len: 513, ..Default::default() }.validate().is_err());
        assert!(DecodeConfig::default().validate().is_ok());
    }
}
