//! Synthetic signed-language testbed.
//!
//! A toy sign language is a set of `G` gestures, each rendered as a seeded
//! unit-norm 255-d direction modulated by a half-sine over `k` frames. Toy
//! spoken languages map gestures to words bijectively, optionally reversing
//! word order, so translation between any two of them is exact and invertible.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    self, Caption, CaptionedVideo, CorpusError, CorpusManifest, Frame, LandmarkStream, MtPair, MtShard, Split,
    VideoEntry, FRAME_DIM,
};
use crate::tasks::{augment_video, MtOracle, TaskError};

/// Frame rate of rendered streams.
pub const SYNTH_FPS: f32 = 10.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("gesture id {0} is outside the lexicon")]
    UnknownGesture(usize),
    #[error("word {0:?} is not in the language's vocabulary")]
    UnknownWord(String),
    #[error("unknown toy language {0:?}")]
    UnknownLanguage(String),
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ToyLexicon {
    pub gesture_count: usize,
    pub frames_per_gesture: usize,
    pub noise_sigma: f64,
    pub basis: Vec<Frame>,
}

impl ToyLexicon {
    /// Draws `gesture_count` Gaussian directions from `seed` and normalizes them.
    pub fn new(gesture_count: usize, frames_per_gesture: usize, noise_sigma: f64, seed: u64) -> Self {
        assert!(frames_per_gesture >= 2, "need at least two frames per gesture");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let basis = (0..gesture_count)
            .map(|_| {
                let v: Vec<f64> = (0..FRAME_DIM).map(|_| normal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut frame = [0f32; FRAME_DIM];
                for (f, x) in frame.iter_mut().zip(&v) {
                    *f = (x / norm) as f32;
                }
                frame
            })
            .collect();
        ToyLexicon {
            gesture_count,
            frames_per_gesture,
            noise_sigma,
            basis,
        }
    }

    pub fn gesture_seconds(&self) -> f64 {
        self.frames_per_gesture as f64 / SYNTH_FPS as f64
    }
}

/// Renders each gesture as `k` frames of `basis[g] * sin(pi t / k)` plus
/// i.i.d. Gaussian noise.
pub fn render_sentence<R: Rng + ?Sized>(
    gestures: &[usize],
    lex: &ToyLexicon,
    rng: &mut R,
) -> Result<LandmarkStream, SynthError> {
    let k = lex.frames_per_gesture;
    let noise = (lex.noise_sigma > 0.0).then(|| Normal::new(0.0f64, lex.noise_sigma).unwrap());
    let mut frames = Vec::with_capacity(gestures.len() * k);
    for &g in gestures {
        let basis = lex.basis.get(g).ok_or(SynthError::UnknownGesture(g))?;
        for t in 0..k {
            let amp = (std::f64::consts::PI * t as f64 / k as f64).sin();
            let mut frame = [0f32; FRAME_DIM];
            for (f, b) in frame.iter_mut().zip(basis) {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                *f = (*b as f64 * amp + n) as f32;
            }
            frames.push(frame);
        }
    }
    Ok(LandmarkStream::new(SYNTH_FPS, frames))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordOrder {
    Identity,
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLanguageSpec {
    pub code: String,
    /// Single-character word prefix; words are `prefix` + hex id.
    pub prefix: char,
    pub order: WordOrder,
    /// Seed of the gesture-to-word permutation; `None` keeps ids in place.
    pub permutation_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyLanguage {
    pub code: String,
    pub order: WordOrder,
    /// Gesture id to word.
    pub word_map: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl ToyLanguage {
    pub fn from_spec(spec: &ToyLanguageSpec, gesture_count: usize) -> Self {
        let mut perm: Vec<usize> = (0..gesture_count).collect();
        if let Some(seed) = spec.permutation_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..perm.len()).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
        }
        let words = perm.iter().map(|p| format!("{}{:x}", spec.prefix, p)).collect();
        ToyLanguage::with_words(&spec.code, spec.order, words)
    }

    pub fn with_words(code: &str, order: WordOrder, word_map: Vec<String>) -> Self {
        let index: BTreeMap<String, usize> = word_map.iter().enumerate().map(|(g, w)| (w.clone(), g)).collect();
        assert_eq!(index.len(), word_map.len(), "word map must be injective");
        assert!(word_map.iter().all(|w| !w.is_empty() && !w.contains(char::is_whitespace)));
        ToyLanguage {
            code: code.to_string(),
            order,
            word_map,
            index,
        }
    }

    /// Sentence text for a gesture sequence, in this language's word order.
    pub fn render_text(&self, gestures: &[usize]) -> Result<String, SynthError> {
        let mut words = gestures
            .iter()
            .map(|&g| self.word_map.get(g).map(String::as_str).ok_or(SynthError::UnknownGesture(g)))
            .collect::<Result<Vec<_>, _>>()?;
        if self.order == WordOrder::Reversed {
            words.reverse();
        }
        Ok(words.join(" "))
    }

    /// Inverse of [`render_text`](Self::render_text).
    pub fn parse(&self, text: &str) -> Result<Vec<usize>, SynthError> {
        let mut ids = text
            .split_whitespace()
            .map(|w| self.index.get(w).copied().ok_or_else(|| SynthError::UnknownWord(w.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if self.order == WordOrder::Reversed {
            ids.reverse();
        }
        Ok(ids)
    }
}

/// Exact translation between toy languages: map words through the gesture
/// ids, reversing word order iff the two orders differ.
pub fn toy_mt(text: &str, src: &ToyLanguage, tgt: &ToyLanguage) -> Result<String, SynthError> {
    map_words(text, src, tgt, false)
}

/// Like [`toy_mt`], but words outside the source vocabulary pass through
/// unchanged.
pub fn toy_mt_lenient(text: &str, src: &ToyLanguage, tgt: &ToyLanguage) -> String {
    map_words(text, src, tgt, true).expect("lenient mapping never fails")
}

fn map_words(text: &str, src: &ToyLanguage, tgt: &ToyLanguage, keep_unknown: bool) -> Result<String, SynthError> {
    let mut words = text
        .split_whitespace()
        .map(|w| match src.index.get(w) {
            Some(&g) => Ok(tgt.word_map[g].as_str()),
            None if keep_unknown => Ok(w),
            None => Err(SynthError::UnknownWord(w.to_string())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if src.order != tgt.order {
        words.reverse();
    }
    Ok(words.join(" "))
}

/// [`MtOracle`] over a family of toy languages.
#[derive(Debug, Clone, Default)]
pub struct ToyMt {
    langs: BTreeMap<String, ToyLanguage>,
    lenient: bool,
}

impl ToyMt {
    pub fn new(langs: impl IntoIterator<Item = ToyLanguage>) -> Self {
        ToyMt {
            langs: langs.into_iter().map(|l| (l.code.clone(), l)).collect(),
            lenient: false,
        }
    }

    /// Passes unknown words through instead of failing; for model output.
    pub fn lenient(mut self) -> Self {
        self.lenient = true;
        self
    }

    pub fn language(&self, code: &str) -> Option<&ToyLanguage> {
        self.langs.get(code)
    }
}

impl MtOracle for ToyMt {
    fn translate(&self, text: &str, src_lang: &str, tgt_lang: &str) -> Result<String, TaskError> {
        let undefined = || TaskError::OracleUndefined(src_lang.to_string(), tgt_lang.to_string());
        let src = self.langs.get(src_lang).ok_or_else(undefined)?;
        let tgt = self.langs.get(tgt_lang).ok_or_else(undefined)?;
        if self.lenient {
            return Ok(toy_mt_lenient(text, src, tgt));
        }
        toy_mt(text, src, tgt).map_err(|e| TaskError::OracleFailed {
            text: text.to_string(),
            reason: e.to_string(),
        })
    }
}

/// Renders sentences back to back into one video with one genuine caption per
/// sentence and caption language.
pub fn gen_video<R: Rng + ?Sized>(
    video_id: &str,
    sign_lang: &str,
    sentences: &[Vec<usize>],
    lex: &ToyLexicon,
    langs: &[&ToyLanguage],
    rng: &mut R,
) -> Result<CaptionedVideo, SynthError> {
    let mut frames = Vec::new();
    let mut captions = Vec::new();
    let mut offset = 0usize;
    for sentence in sentences {
        let stream = render_sentence(sentence, lex, rng)?;
        let start = offset as f64 / SYNTH_FPS as f64;
        offset += stream.len();
        let end = offset as f64 / SYNTH_FPS as f64;
        frames.extend(stream.frames);
        for lang in langs {
            captions.push(Caption::new(start, end, lang.render_text(sentence)?, &lang.code));
        }
    }
    Ok(CaptionedVideo::new(
        video_id,
        sign_lang,
        LandmarkStream::new(SYNTH_FPS, frames),
        captions,
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignLanguageSpec {
    pub code: String,
    pub lexicon_seed: u64,
    /// Language of the genuine training captions.
    pub caption_lang: String,
    /// Further genuine caption languages of the train videos.
    #[serde(default)]
    pub extra_caption_langs: Vec<String>,
    pub train_videos: usize,
    pub dev_videos: usize,
    pub test_videos: usize,
    pub tune_videos: usize,
}

impl SignLanguageSpec {
    /// Genuine train caption languages, primary first.
    pub fn train_langs(&self) -> Vec<&String> {
        std::iter::once(&self.caption_lang).chain(&self.extra_caption_langs).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MtPairSpec {
    pub src: String,
    pub tgt: String,
    pub count: usize,
}

/// Every knob of a generated corpus; written next to it as `spec.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub gesture_count: usize,
    pub frames_per_gesture: usize,
    pub noise_sigma: f64,
    pub sentences_per_video: (usize, usize),
    pub gestures_per_sentence: (usize, usize),
    pub languages: Vec<ToyLanguageSpec>,
    pub sign_languages: Vec<SignLanguageSpec>,
    /// Extra genuine reference languages on dev/test/tune videos. A language
    /// listed here but never used as a `caption_lang` is a zero-shot target.
    pub eval_langs: Vec<String>,
    /// Languages added to train videos as augmented (machine-translated) captions.
    pub augment_langs: Vec<String>,
    pub mt_pairs: Vec<MtPairSpec>,
}

fn lang_spec(code: &str, prefix: char, order: WordOrder, permutation_seed: Option<u64>) -> ToyLanguageSpec {
    ToyLanguageSpec {
        code: code.into(),
        prefix,
        order,
        permutation_seed,
    }
}

impl Default for BenchmarkSpec {
    /// Two sign languages, three spoken languages, `xb` held out as the
    /// zero-shot target of `sl0`.
    fn default() -> Self {
        BenchmarkSpec {
            seed: 0,
            gesture_count: 16,
            frames_per_gesture: 10,
            noise_sigma: 0.02,
            sentences_per_video: (1, 3),
            gestures_per_sentence: (2, 4),
            languages: vec![
                lang_spec("en", 'w', WordOrder::Identity, None),
                lang_spec("xa", 'x', WordOrder::Reversed, Some(11)),
                lang_spec("xb", 'v', WordOrder::Identity, Some(12)),
            ],
            sign_languages: vec![
                SignLanguageSpec {
                    code: "sl0".into(),
                    lexicon_seed: 100,
                    caption_lang: "en".into(),
                    extra_caption_langs: Vec::new(),
                    train_videos: 200,
                    dev_videos: 20,
                    test_videos: 20,
                    tune_videos: 30,
                },
                SignLanguageSpec {
                    code: "sl1".into(),
                    lexicon_seed: 101,
                    caption_lang: "xa".into(),
                    extra_caption_langs: Vec::new(),
                    train_videos: 100,
                    dev_videos: 10,
                    test_videos: 10,
                    tune_videos: 0,
                },
            ],
            eval_langs: vec!["en".into(), "xb".into()],
            augment_langs: vec!["xb".into()],
            mt_pairs: vec![
                MtPairSpec { src: "en".into(), tgt: "xb".into(), count: 2000 },
                MtPairSpec { src: "en".into(), tgt: "xa".into(), count: 1000 },
            ],
        }
    }
}

impl BenchmarkSpec {
    /// Single sign language `sl0` with English captions; `xb` is reachable
    /// only through MT or augmented captions.
    pub fn transfer() -> Self {
        let mut spec = BenchmarkSpec::default();
        spec.sign_languages.truncate(1);
        spec
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.gesture_count == 0 {
            return bad("gesture_count must be positive".into());
        }
        if self.frames_per_gesture < 2 {
            return bad("frames_per_gesture must be >= 2".into());
        }
        let (a, b) = self.sentences_per_video;
        let (c, d) = self.gestures_per_sentence;
        if a == 0 || a > b || c == 0 || c > d {
            return bad("sentence and gesture ranges must be non-empty and positive".into());
        }
        let known = |code: &String| self.languages.iter().any(|l| &l.code == code);
        for code in self
            .sign_languages
            .iter()
            .flat_map(|s| s.train_langs())
            .chain(&self.eval_langs)
            .chain(&self.augment_langs)
            .chain(self.mt_pairs.iter().flat_map(|p| [&p.src, &p.tgt]))
        {
            if !known(code) {
                return bad(format!("language {code} is not defined"));
            }
        }
        for pair in &self.mt_pairs {
            if pair.src == pair.tgt {
                return bad(format!("MT pair {}-{} is not a translation", pair.src, pair.tgt));
            }
        }
        Ok(())
    }

    pub fn languages(&self) -> Vec<ToyLanguage> {
        self.languages
            .iter()
            .map(|l| ToyLanguage::from_spec(l, self.gesture_count))
            .collect()
    }

    pub fn oracle(&self) -> ToyMt {
        ToyMt::new(self.languages())
    }
}

fn random_sentence<R: Rng + ?Sized>(spec: &BenchmarkSpec, rng: &mut R) -> Vec<usize> {
    let (lo, hi) = spec.gestures_per_sentence;
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| rng.random_range(0..spec.gesture_count)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub videos: BTreeMap<String, BTreeMap<String, usize>>,
    pub mt_pairs: BTreeMap<String, usize>,
}

pub const SPEC_FILE: &str = "spec.json";

/// Writes a complete corpus under `out`: videos for every split and sign
/// language, MT shards, `manifest.json` and `spec.json`.
pub fn gen_benchmark(spec: &BenchmarkSpec, out: &Path) -> Result<BenchmarkSummary, SynthError> {
    spec.validate()?;
    fs::create_dir_all(out.join(corpus::VIDEO_DIR))?;
    fs::create_dir_all(out.join(corpus::MT_DIR))?;
    let oracle = spec.oracle();
    let lang = |code: &str| {
        oracle
            .language(code)
            .ok_or_else(|| SynthError::UnknownLanguage(code.to_string()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::new();
    let mut summary = BenchmarkSummary {
        videos: BTreeMap::new(),
        mt_pairs: BTreeMap::new(),
    };

    for sl in &spec.sign_languages {
        let lex = ToyLexicon::new(spec.gesture_count, spec.frames_per_gesture, spec.noise_sigma, sl.lexicon_seed);
        let train_codes = sl.train_langs();
        let train_langs = train_codes.iter().map(|c| lang(c)).collect::<Result<Vec<_>, _>>()?;
        let mut eval_langs = train_langs.clone();
        for code in spec.eval_langs.iter().filter(|c| !train_codes.contains(c)) {
            eval_langs.push(lang(code)?);
        }
        let augment: Vec<String> = spec
            .augment_langs
            .iter()
            .filter(|c| !train_codes.contains(c))
            .cloned()
            .collect();
        for (split, count) in [
            (Split::Train, sl.train_videos),
            (Split::Dev, sl.dev_videos),
            (Split::Test, sl.test_videos),
            (Split::Tune, sl.tune_videos),
        ] {
            for i in 0..count {
                let (lo, hi) = spec.sentences_per_video;
                let n = rng.random_range(lo..=hi);
                let sentences: Vec<Vec<usize>> = (0..n).map(|_| random_sentence(spec, &mut rng)).collect();
                let id = format!("{}-{}-{:04}", sl.code, split.as_str(), i);
                let video = if split == Split::Train {
                    let v = gen_video(&id, &sl.code, &sentences, &lex, &train_langs, &mut rng)?;
                    augment_video(&v, &oracle, &augment)?
                } else {
                    gen_video(&id, &sl.code, &sentences, &lex, &eval_langs, &mut rng)?
                };
                corpus::write_video(out, &video)?;
                entries.push(VideoEntry {
                    video_id: id,
                    sign_lang: sl.code.clone(),
                    split,
                    duration_s: video.duration_s,
                });
            }
            *summary
                .videos
                .entry(sl.code.clone())
                .or_default()
                .entry(split.as_str().to_string())
                .or_default() += count;
        }
    }

    let mut shards = Vec::new();
    for pair in &spec.mt_pairs {
        let (src, tgt) = (lang(&pair.src)?, lang(&pair.tgt)?);
        let mut pairs = Vec::with_capacity(pair.count);
        for _ in 0..pair.count {
            let sentence = random_sentence(spec, &mut rng);
            pairs.push(MtPair {
                src_text: src.render_text(&sentence)?,
                tgt_text: tgt.render_text(&sentence)?,
                src_lang: src.code.clone(),
                tgt_lang: tgt.code.clone(),
            });
        }
        let rel = format!("{}/{}", corpus::MT_DIR, corpus::mt_file_name(&src.code, &tgt.code));
        corpus::write_mt_corpus(&out.join(&rel), &pairs)?;
        summary.mt_pairs.insert(format!("{}-{}", src.code, tgt.code), pair.count);
        shards.push(MtShard {
            src_lang: src.code.clone(),
            tgt_lang: tgt.code.clone(),
            path: rel,
            count: pair.count,
        });
    }

    CorpusManifest::new(entries, shards).write(&out.join(corpus::MANIFEST_FILE))?;
    fs::write(
        out.join(SPEC_FILE),
        serde_json::to_string_pretty(spec).expect("spec serializes"),
    )?;
    Ok(summary)
}

pub fn load_spec(corpus_dir: &Path) -> Result<BenchmarkSpec, SynthError> {
    let text = fs::read_to_string(corpus_dir.join(SPEC_FILE))?;
    serde_json::from_str(&text).map_err(|e| SynthError::InvalidSpec(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;
    use proptest::prelude::*;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn lang(code: &str, prefix: char, order: WordOrder, perm: Option<u64>) -> ToyLanguage {
        ToyLanguage::from_spec(&lang_spec(code, prefix, order, perm), 16)
    }

    #[test]
    fn noiseless_rendering_is_closed_form() {
        let lex = ToyLexicon::new(16, 10, 0.0, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = render_sentence(&[3], &lex, &mut rng).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.fps, 10.0);
        for (t, frame) in s.frames.iter().enumerate() {
            let amp = (std::f64::consts::PI * t as f64 / 10.0).sin();
            for (v, b) in frame.iter().zip(&lex.basis[3]) {
                assert!((*v as f64 - *b as f64 * amp).abs() < 1e-6);
            }
        }
        assert!(render_sentence(&[], &lex, &mut rng).unwrap().is_empty());
        assert!(matches!(render_sentence(&[16], &lex, &mut rng), Err(SynthError::UnknownGesture(16))));
    }

    #[test]
    fn rendered_gestures_point_at_their_basis() {
        let lex = ToyLexicon::new(16, 10, 0.02, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (a, b) in [(0usize, 1usize), (5, 9), (15, 2)] {
            let s = render_sentence(&[a], &lex, &mut rng).unwrap();
            // Peak frame of the half-sine.
            let peak = &s.frames[5];
            assert!(cosine(peak, &lex.basis[a]) > cosine(peak, &lex.basis[b]));
        }
    }

    #[test]
    fn basis_vectors_are_unit_and_distinct() {
        let lex = ToyLexicon::new(16, 10, 0.02, 3);
        for (i, v) in lex.basis.iter().enumerate() {
            let n: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
            for w in &lex.basis[..i] {
                assert_ne!(v, w);
            }
        }
    }

    #[test]
    fn video_layout() {
        let lex = ToyLexicon::new(16, 10, 0.02, 3);
        let en = lang("en", 'w', WordOrder::Identity, None);
        let xr = lang("xr", 'x', WordOrder::Reversed, None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = gen_video("v", "sl0", &[vec![1, 2, 3], vec![4, 5, 6]], &lex, &[&en], &mut rng).unwrap();
        assert_eq!(v.duration_s, 6.0);
        let spans: Vec<_> = v.captions.iter().map(|c| (c.start_s, c.end_s)).collect();
        assert_eq!(spans, vec![(0.0, 3.0), (3.0, 6.0)]);
        assert_eq!(v.captions[0].text, "w1 w2 w3");

        let v = gen_video("v", "sl0", &[vec![1, 2, 3]], &lex, &[&xr], &mut rng).unwrap();
        assert_eq!(v.captions[0].text, "x3 x2 x1");
    }

    #[test]
    fn toy_mt_examples() {
        let a = lang("a", 'w', WordOrder::Identity, None);
        let b = lang("b", 'v', WordOrder::Reversed, None);
        assert_eq!(toy_mt("w1 w2", &a, &a).unwrap(), "w1 w2");
        assert_eq!(toy_mt("w1 w2", &a, &b).unwrap(), "v2 v1");
        assert_eq!(toy_mt("v2 v1", &b, &a).unwrap(), "w1 w2");
        assert!(matches!(toy_mt("w1 zz", &a, &b), Err(SynthError::UnknownWord(w)) if w == "zz"));
        assert_eq!(toy_mt_lenient("w1 zz", &a, &b), "zz v1");
        let oracle = ToyMt::new([a.clone(), b.clone()]);
        assert!(matches!(oracle.translate("zz", "a", "b"), Err(TaskError::OracleFailed { .. })));
        assert_eq!(oracle.lenient().translate("w2 zz", "a", "b").unwrap(), "zz v2");
    }

    #[test]
    fn extra_caption_langs_are_genuine_on_train() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = BenchmarkSpec::transfer();
        let sl = &mut spec.sign_languages[0];
        (sl.train_videos, sl.dev_videos, sl.test_videos, sl.tune_videos) = (3, 1, 1, 1);
        sl.extra_caption_langs = vec!["xa".into()];
        spec.mt_pairs.iter_mut().for_each(|p| p.count = 2);
        gen_benchmark(&spec, dir.path()).unwrap();
        let corpus = Corpus::load(dir.path()).unwrap();
        for v in corpus.split(Split::Train) {
            assert!(v.captions.iter().any(|c| c.lang == "xa" && !c.augmented));
            assert!(v.captions.iter().all(|c| c.lang != "xb" || c.augmented));
        }
        spec.sign_languages[0].extra_caption_langs = vec!["zz".into()];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn permuted_language_uses_published_map() {
        let en = lang("en", 'w', WordOrder::Identity, None);
        let xa = lang("xa", 'x', WordOrder::Reversed, Some(11));
        let expected = format!("{} {}", xa.word_map[1], xa.word_map[3]);
        assert_eq!(toy_mt("w3 w1", &en, &xa).unwrap(), expected);
        // The permutation is a bijection over hex ids.
        let mut ids: Vec<_> = xa.word_map.iter().map(|w| usize::from_str_radix(&w[1..], 16).unwrap()).collect();
        ids.sort();
        assert_eq!(ids, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn benchmark_bookkeeping() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = BenchmarkSpec::transfer();
        spec.mt_pairs[0].count = 30;
        spec.mt_pairs[1].count = 10;
        let summary = gen_benchmark(&spec, dir.path()).unwrap();
        assert_eq!(summary.videos["sl0"]["train"], 200);
        assert_eq!(summary.videos["sl0"]["dev"], 20);
        assert_eq!(summary.videos["sl0"]["test"], 20);

        let corpus = Corpus::load(dir.path()).unwrap();
        assert_eq!(corpus.split(Split::Train).len(), 200);
        assert_eq!(corpus.mt[&("en".to_string(), "xb".to_string())].len(), 30);
        assert_eq!(corpus.mt[&("en".to_string(), "xa".to_string())].len(), 10);

        // The held-out language never appears as genuine training data.
        for v in corpus.split(Split::Train) {
            assert!(v.captions.iter().all(|c| c.lang != "xb" || c.augmented));
            assert!(v.captions.iter().any(|c| c.lang == "xb" && c.augmented));
        }
        assert!(corpus
            .split(Split::Test)
            .iter()
            .all(|v| v.captions.iter().any(|c| c.lang == "xb" && !c.augmented)));
        assert_eq!(load_spec(dir.path()).unwrap(), spec);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut spec = BenchmarkSpec::default();
        for sl in &mut spec.sign_languages {
            sl.train_videos = 3;
            sl.dev_videos = 1;
            sl.test_videos = 1;
            sl.tune_videos = 1;
        }
        spec.mt_pairs[0].count = 5;
        gen_benchmark(&spec, a.path()).unwrap();
        gen_benchmark(&spec, b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn toy_mt_round_trips(sentence in prop::collection::vec(0usize..16, 0..10)) {
            let langs = BenchmarkSpec::default().languages();
            for a in &langs {
                for b in &langs {
                    let text = a.render_text(&sentence).unwrap();
                    let there = toy_mt(&text, a, b).unwrap();
                    prop_assert_eq!(b.parse(&there).unwrap(), sentence.clone());
                    prop_assert_eq!(toy_mt(&there, b, a).unwrap(), text.clone());
                }
            }
        }

        #[test]
        fn noiseless_rendering_is_injective(
            a in prop::collection::vec(0usize..16, 0..6),
            b in prop::collection::vec(0usize..16, 0..6),
        ) {
            let lex = ToyLexicon::new(16, 10, 0.0, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let sa = render_sentence(&a, &lex, &mut rng).unwrap();
            let sb = render_sentence(&b, &lex, &mut rng).unwrap();
            prop_assert_eq!(a == b, sa == sb);
            prop_assert!(sa.frames.iter().flatten().all(|v| v.is_finite()));
        }
    }
}
