//! Training-task construction: SLT, caption alignment, MT and augmented SLT
//! examples, each marked by a textual control token at the head of the prompt.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clips::{window_frames, Clip, MAX_CLIP_FRAMES};
use crate::corpus::{Caption, CaptionedVideo, Frame, MtPair};

pub const SLT_TOKEN: &str = "<slt>";
pub const ALIGN_TOKEN: &str = "<align>";
pub const MT_TOKEN: &str = "<mt>";
pub const AUG_TOKEN: &str = "<aug>";

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("caption language {found:?} (augmented={augmented}) does not match requested {expected:?} (augmented={expected_augmented})")]
    MixedLanguage {
        expected: String,
        expected_augmented: bool,
        found: String,
        augmented: bool,
    },
    #[error("no MT oracle for {0} -> {1}")]
    OracleUndefined(String, String),
    #[error("oracle failed on {text:?}: {reason}")]
    OracleFailed { text: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "slt")]
    Slt,
    #[serde(rename = "align")]
    Align,
    #[serde(rename = "mt")]
    Mt,
    #[serde(rename = "aug_slt")]
    AugSlt,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Slt, TaskKind::Align, TaskKind::Mt, TaskKind::AugSlt];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Slt => "slt",
            TaskKind::Align => "align",
            TaskKind::Mt => "mt",
            TaskKind::AugSlt => "aug_slt",
        }
    }

    pub fn uses_frames(self) -> bool {
        !matches!(self, TaskKind::Mt)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Source tag (a sign or spoken language) and target spoken language.
/// Serialized as `"src-tgt"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Direction {
    pub source: String,
    pub target: String,
}

impl Direction {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Direction {
            source: source.into(),
            target: target.into(),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.source, self.target)
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('-') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok(Direction::new(a, b)),
            _ => Err(format!("direction must look like src-tgt, got {s:?}")),
        }
    }
}

impl TryFrom<String> for Direction {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Direction> for String {
    fn from(d: Direction) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub prompt_text: String,
    /// Present for every task except MT.
    pub frames: Option<Vec<Frame>>,
    pub target_text: String,
    pub kind: TaskKind,
    pub direction: Direction,
}

/// Text-to-text translation used to synthesize captions in other languages.
pub trait MtOracle {
    fn translate(&self, text: &str, src_lang: &str, tgt_lang: &str) -> Result<String, TaskError>;
}

/// Oracle that returns its input unchanged, for any language pair.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityOracle;

impl MtOracle for IdentityOracle {
    fn translate(&self, text: &str, _src: &str, _tgt: &str) -> Result<String, TaskError> {
        Ok(text.to_string())
    }
}

pub fn slt_prompt(sign_lang: &str, tgt_lang: &str, augmented: bool) -> String {
    if augmented {
        format!("{SLT_TOKEN} {AUG_TOKEN} translate {sign_lang} to {tgt_lang}:")
    } else {
        format!("{SLT_TOKEN} translate {sign_lang} to {tgt_lang}:")
    }
}

pub fn align_prompt(sign_lang: &str, tgt_lang: &str) -> String {
    format!("{ALIGN_TOKEN} align {sign_lang} captions in {tgt_lang}:")
}

pub fn mt_prompt(src_lang: &str, tgt_lang: &str, src_text: &str) -> String {
    format!("{MT_TOKEN} translate {src_lang} to {tgt_lang}: {src_text}")
}

fn check_captions(captions: &[Caption], tgt_lang: &str, augmented: bool) -> Result<(), TaskError> {
    match captions
        .iter()
        .find(|c| c.lang != tgt_lang || c.augmented != augmented)
    {
        Some(c) => Err(TaskError::MixedLanguage {
            expected: tgt_lang.to_string(),
            expected_augmented: augmented,
            found: c.lang.clone(),
            augmented: c.augmented,
        }),
        None => Ok(()),
    }
}

/// Space-joined caption texts in start order.
pub fn join_captions(captions: &[Caption]) -> String {
    captions
        .iter()
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn build_slt(clip: &Clip, sign_lang: &str, tgt_lang: &str, augmented: bool) -> Result<TaskExample, TaskError> {
    check_captions(&clip.covered, tgt_lang, augmented)?;
    Ok(TaskExample {
        prompt_text: slt_prompt(sign_lang, tgt_lang, augmented),
        frames: Some(clip.frames.clone()),
        target_text: join_captions(&clip.covered),
        kind: if augmented { TaskKind::AugSlt } else { TaskKind::Slt },
        direction: Direction::new(sign_lang, tgt_lang),
    })
}

/// One line per covered caption: `"{start:.2} {end:.2} {text}"`, times
/// relative to the clip start.
pub fn serialize_alignment_target(clip: &Clip) -> String {
    clip.covered
        .iter()
        .map(|c| {
            format!(
                "{:.2} {:.2} {}",
                c.start_s - clip.clip_start_s,
                c.end_s - clip.clip_start_s,
                c.text
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_alignment(clip: &Clip, sign_lang: &str, tgt_lang: &str) -> Result<TaskExample, TaskError> {
    check_captions(&clip.covered, tgt_lang, false)?;
    Ok(TaskExample {
        prompt_text: align_prompt(sign_lang, tgt_lang),
        frames: Some(clip.frames.clone()),
        target_text: serialize_alignment_target(clip),
        kind: TaskKind::Align,
        direction: Direction::new(sign_lang, tgt_lang),
    })
}

pub fn build_mt(pair: &MtPair) -> TaskExample {
    TaskExample {
        prompt_text: mt_prompt(&pair.src_lang, &pair.tgt_lang, &pair.src_text),
        frames: None,
        target_text: pair.tgt_text.clone(),
        kind: TaskKind::Mt,
        direction: Direction::new(&pair.src_lang, &pair.tgt_lang),
    }
}

/// A pre-aligned (frames, reference) pair used for finetuning and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub video_id: String,
    pub frames: Vec<Frame>,
    pub target_text: String,
    pub sign_lang: String,
    pub tgt_lang: String,
}

/// One segment per genuine `lang` caption, holding the post-stride frames
/// inside the caption span.
pub fn caption_segments(video: &CaptionedVideo, lang: &str, stride: usize) -> Vec<Segment> {
    video
        .captions
        .iter()
        .filter(|c| c.lang == lang && !c.augmented)
        .map(|c| {
            let mut frames = window_frames(&video.stream, stride, c.start_s, c.end_s);
            frames.truncate(MAX_CLIP_FRAMES);
            Segment {
                video_id: video.video_id.clone(),
                frames,
                target_text: c.text.clone(),
                sign_lang: video.sign_lang.clone(),
                tgt_lang: lang.to_string(),
            }
        })
        .collect()
}

/// SLT example for a segment, always with the genuine prompt.
pub fn segment_example(seg: &Segment) -> TaskExample {
    TaskExample {
        prompt_text: slt_prompt(&seg.sign_lang, &seg.tgt_lang, false),
        frames: Some(seg.frames.clone()),
        target_text: seg.target_text.clone(),
        kind: TaskKind::Slt,
        direction: Direction::new(&seg.sign_lang, &seg.tgt_lang),
    }
}

/// Adds one augmented caption per (original caption, target language), with
/// the original timestamps and the oracle's per-caption translation.
///
/// Only genuine captions are translated; target languages equal to a
/// caption's own language are skipped.
pub fn augment_video(
    video: &CaptionedVideo,
    oracle: &dyn MtOracle,
    tgt_langs: &[String],
) -> Result<CaptionedVideo, TaskError> {
    let mut out = video.clone();
    for caption in video.captions.iter().filter(|c| !c.augmented) {
        for tgt in tgt_langs.iter().filter(|t| **t != caption.lang) {
            let text = oracle.translate(&caption.text, &caption.lang, tgt)?;
            out.captions.push(Caption {
                start_s: caption.start_s,
                end_s: caption.end_s,
                text,
                lang: tgt.clone(),
                augmented: true,
            });
        }
    }
    // Stable sort keeps originals ahead of their translations at equal starts.
    out.captions.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LandmarkStream, FRAME_DIM};
    use proptest::prelude::*;

    fn clip(start: f64, covered: Vec<Caption>) -> Clip {
        Clip {
            video_id: "v".into(),
            clip_start_s: start,
            clip_end_s: start + 34.0,
            frames: vec![[0.0; FRAME_DIM]; 3],
            covered,
        }
    }

    fn aug(mut c: Caption) -> Caption {
        c.augmented = true;
        c
    }

    #[test]
    fn slt_genuine() {
        let c = clip(0.0, vec![Caption::new(1.0, 2.0, "hello", "en"), Caption::new(3.0, 4.0, "world", "en")]);
        let ex = build_slt(&c, "asl", "en", false).unwrap();
        assert_eq!(ex.prompt_text, "<slt> translate asl to en:");
        assert_eq!(ex.target_text, "hello world");
        assert_eq!(ex.kind, TaskKind::Slt);
        assert_eq!(ex.frames.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn slt_augmented() {
        let c = clip(
            0.0,
            vec![aug(Caption::new(1.0, 2.0, "hallo", "de")), aug(Caption::new(3.0, 4.0, "welt", "de"))],
        );
        let ex = build_slt(&c, "asl", "de", true).unwrap();
        assert_eq!(ex.prompt_text, "<slt> <aug> translate asl to de:");
        assert_eq!(ex.target_text, "hallo welt");
        assert_eq!(ex.kind, TaskKind::AugSlt);
    }

    #[test]
    fn slt_empty_clip() {
        let ex = build_slt(&clip(0.0, vec![]), "asl", "en", false).unwrap();
        assert_eq!(ex.target_text, "");
    }

    #[test]
    fn slt_rejects_mixed_languages() {
        let c = clip(0.0, vec![Caption::new(1.0, 2.0, "hello", "en"), Caption::new(3.0, 4.0, "welt", "de")]);
        assert!(matches!(build_slt(&c, "asl", "en", false), Err(TaskError::MixedLanguage { .. })));
        let c = clip(0.0, vec![aug(Caption::new(1.0, 2.0, "hello", "en"))]);
        assert!(matches!(build_slt(&c, "asl", "en", false), Err(TaskError::MixedLanguage { .. })));
    }

    #[test]
    fn alignment_targets() {
        let c = clip(10.0, vec![Caption::new(12.0, 15.0, "hi", "en")]);
        let ex = build_alignment(&c, "asl", "en").unwrap();
        assert_eq!(ex.prompt_text, "<align> align asl captions in en:");
        assert_eq!(ex.target_text, "2.00 5.00 hi");

        let c = clip(0.0, vec![Caption::new(0.0, 1.5, "a", "en"), Caption::new(2.0, 3.25, "b c", "en")]);
        assert_eq!(serialize_alignment_target(&c), "0.00 1.50 a\n2.00 3.25 b c");

        let c = clip(0.0, vec![Caption::new(33.999, 34.0, "z", "en")]);
        assert_eq!(serialize_alignment_target(&c), "34.00 34.00 z");

        assert_eq!(serialize_alignment_target(&clip(0.0, vec![])), "");
        assert_eq!(build_alignment(&clip(3.0, vec![]), "asl", "en").unwrap().target_text, "");
    }

    #[test]
    fn mt_both_directions() {
        let pair = MtPair {
            src_text: "hallo".into(),
            tgt_text: "hello".into(),
            src_lang: "de".into(),
            tgt_lang: "en".into(),
        };
        let ex = build_mt(&pair);
        assert_eq!(ex.prompt_text, "<mt> translate de to en: hallo");
        assert_eq!(ex.target_text, "hello");
        assert!(ex.frames.is_none());
        let ex = build_mt(&pair.reversed());
        assert_eq!(ex.prompt_text, "<mt> translate en to de: hello");
        assert_eq!(ex.target_text, "hallo");
    }

    struct Upper;
    impl MtOracle for Upper {
        fn translate(&self, text: &str, src: &str, tgt: &str) -> Result<String, TaskError> {
            if tgt == "zz" {
                return Err(TaskError::OracleUndefined(src.into(), tgt.into()));
            }
            Ok(format!("{tgt}:{}", text.to_uppercase()))
        }
    }

    fn one_caption_video() -> CaptionedVideo {
        CaptionedVideo::new(
            "v",
            "asl",
            LandmarkStream::new(10.0, vec![[0.0; FRAME_DIM]; 50]),
            vec![Caption::new(1.0, 2.0, "hi", "en")],
        )
        .unwrap()
    }

    #[test]
    fn augmentation_adds_per_caption_translations() {
        let v = one_caption_video();
        let out = augment_video(&v, &Upper, &["de".into(), "fr".into()]).unwrap();
        assert_eq!(out.captions.len(), 3);
        let added: Vec<_> = out.captions.iter().filter(|c| c.augmented).collect();
        assert_eq!(added.len(), 2);
        for c in added {
            assert_eq!((c.start_s, c.end_s), (1.0, 2.0));
        }
        assert!(out.captions.iter().any(|c| c.text == "de:HI" && c.lang == "de"));

        assert_eq!(augment_video(&v, &Upper, &[]).unwrap(), v);
        assert!(matches!(
            augment_video(&v, &Upper, &["zz".into()]),
            Err(TaskError::OracleUndefined(..))
        ));
    }

    fn brute_join(texts: &[String]) -> String {
        let mut out = String::new();
        for (i, t) in texts.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out += t;
        }
        out
    }

    proptest! {
        #[test]
        fn slt_target_is_space_join(texts in prop::collection::vec("[a-z]{1,6}", 0..8)) {
            let covered: Vec<Caption> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| Caption::new(i as f64, i as f64 + 0.5, t.clone(), "en"))
                .collect();
            let ex = build_slt(&clip(0.0, covered), "sl0", "en", false).unwrap();
            prop_assert_eq!(ex.target_text, brute_join(&texts));
            prop_assert!(ex.prompt_text.starts_with(SLT_TOKEN));
            prop_assert!(!ex.prompt_text.contains(AUG_TOKEN));
        }

        #[test]
        fn alignment_lines_monotone_and_bounded(
            starts in prop::collection::vec(0u32..3300, 0..8),
            clip_start in 0u32..1000,
        ) {
            let mut starts = starts;
            starts.sort();
            let cs = clip_start as f64 / 100.0;
            let covered: Vec<Caption> = starts
                .iter()
                .map(|&s| Caption::new(cs + s as f64 / 100.0, cs + s as f64 / 100.0 + 1.0, "w", "en"))
                .collect();
            let text = serialize_alignment_target(&clip(cs, covered));
            let mut prev = f64::NEG_INFINITY;
            for line in text.lines() {
                let mut parts = line.split(' ');
                let a: f64 = parts.next().unwrap().parse().unwrap();
                let b: f64 = parts.next().unwrap().parse().unwrap();
                prop_assert!(a >= prev);
                prop_assert!((0.0..=34.0).contains(&a) && (0.0..=34.0).contains(&b));
                prev = a;
            }
        }
    }
}
