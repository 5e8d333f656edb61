//! On-disk data sources: captioned landmark videos, parallel MT text and the
//! corpus manifest that ties them together.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of one landmark frame vector.
pub const FRAME_DIM: usize = 255;

/// One landmark frame.
pub type Frame = [f32; FRAME_DIM];

const LANDMARK_MAGIC: &[u8; 4] = b"SLMK";
const LANDMARK_VERSION: u32 = 1;
const LANDMARK_HEADER_LEN: usize = 20;

/// Slack allowed between the manifest's declared duration and the duration
/// implied by the landmark header.
pub const DURATION_TOLERANCE_S: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: io error: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line_no}: malformed line: {reason}")]
    MalformedLine {
        path: String,
        line_no: usize,
        reason: String,
    },
    #[error("{path}:{line_no}: caption interval [{start_s}, {end_s}] is empty or inverted")]
    IntervalError {
        path: String,
        line_no: usize,
        start_s: f64,
        end_s: f64,
    },
    #[error("{path}: bad magic, not a landmark file")]
    BadMagic { path: String },
    #[error("{path}: unsupported landmark file version {version}")]
    UnsupportedVersion { path: String, version: u32 },
    #[error("landmark dim mismatch: found {0}, expected 255")]
    DimMismatch(u32),
    #[error("{path}: truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: non-finite value in frame {frame}")]
    NonFinite { path: String, frame: usize },
    #[error("{path}: fps must be positive and finite, got {fps}")]
    BadFps { path: String, fps: f32 },
    #[error("video {video_id}: {reason}")]
    InvalidVideo { video_id: String, reason: String },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl CorpusError {
    fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub lang: String,
    /// Produced by an MT system rather than read from source captions.
    #[serde(default)]
    pub augmented: bool,
}

impl Caption {
    pub fn new(start_s: f64, end_s: f64, text: impl Into<String>, lang: impl Into<String>) -> Self {
        Caption {
            start_s,
            end_s,
            text: text.into(),
            lang: lang.into(),
            augmented: false,
        }
    }
}

/// A sequence of fixed-width landmark frames sampled at `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkStream {
    pub fps: f32,
    pub frames: Vec<Frame>,
}

impl LandmarkStream {
    pub fn new(fps: f32, frames: Vec<Frame>) -> Self {
        LandmarkStream { fps, frames }
    }

    pub fn dim(&self) -> usize {
        FRAME_DIM
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.fps as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedVideo {
    pub video_id: String,
    pub sign_lang: String,
    pub stream: LandmarkStream,
    /// Sorted ascending by `start_s`.
    pub captions: Vec<Caption>,
    pub duration_s: f64,
}

impl CaptionedVideo {
    /// Builds a video, sorting captions and deriving the duration from the stream.
    pub fn new(
        video_id: impl Into<String>,
        sign_lang: impl Into<String>,
        stream: LandmarkStream,
        mut captions: Vec<Caption>,
    ) -> Result<Self> {
        sort_captions(&mut captions);
        let video = CaptionedVideo {
            video_id: video_id.into(),
            sign_lang: sign_lang.into(),
            duration_s: stream.duration_s(),
            stream,
            captions,
        };
        video.validate()?;
        Ok(video)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| CorpusError::InvalidVideo {
            video_id: self.video_id.clone(),
            reason,
        };
        if !self
            .captions
            .windows(2)
            .all(|w| w[0].start_s <= w[1].start_s)
        {
            return Err(invalid("captions are not sorted by start time".into()));
        }
        // Frame timestamps are f32-derived; allow a hair of slack at the end.
        let limit = self.duration_s + 1e-6;
        for c in &self.captions {
            if c.start_s < 0.0 || c.end_s > limit {
                return Err(invalid(format!(
                    "caption [{}, {}] outside [0, {}]",
                    c.start_s, c.end_s, self.duration_s
                )));
            }
            if c.start_s >= c.end_s {
                return Err(invalid(format!("empty caption interval [{}, {}]", c.start_s, c.end_s)));
            }
        }
        Ok(())
    }

    /// Caption languages present on this video, with their augmented flag.
    pub fn caption_langs(&self) -> BTreeMap<String, bool> {
        let mut out = BTreeMap::new();
        for c in &self.captions {
            out.entry(c.lang.clone()).or_insert(c.augmented);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MtPair {
    pub src_text: String,
    pub tgt_text: String,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl MtPair {
    /// The same pair read in the opposite direction.
    pub fn reversed(&self) -> MtPair {
        MtPair {
            src_text: self.tgt_text.clone(),
            tgt_text: self.src_text.clone(),
            src_lang: self.tgt_lang.clone(),
            tgt_lang: self.src_lang.clone(),
        }
    }
}

fn sort_captions(captions: &mut [Caption]) {
    captions.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
}

pub fn captions_file_name(video_id: &str) -> String {
    format!("{video_id}.captions.jsonl")
}

pub fn landmarks_file_name(video_id: &str) -> String {
    format!("{video_id}.lmk")
}

pub fn mt_file_name(src_lang: &str, tgt_lang: &str) -> String {
    format!("{src_lang}-{tgt_lang}.tsv")
}

/// Reads a JSON-lines caption file, returning captions sorted by start time.
pub fn load_captions(path: &Path) -> Result<Vec<Caption>> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut captions = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CorpusError::MalformedLine {
            path: path.display().to_string(),
            line_no,
            reason,
        };
        let caption: Caption =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if !caption.start_s.is_finite() || !caption.end_s.is_finite() || caption.start_s < 0.0 {
            return Err(malformed("timestamps must be finite and non-negative".into()));
        }
        if caption.start_s >= caption.end_s {
            return Err(CorpusError::IntervalError {
                path: path.display().to_string(),
                line_no,
                start_s: caption.start_s,
                end_s: caption.end_s,
            });
        }
        if caption.text.trim().is_empty() {
            return Err(malformed("caption text is empty".into()));
        }
        if caption.lang.is_empty() {
            return Err(malformed("caption lang is empty".into()));
        }
        captions.push(caption);
    }
    sort_captions(&mut captions);
    Ok(captions)
}

pub fn write_captions(path: &Path, captions: &[Caption]) -> Result<()> {
    let mut out = String::new();
    for c in captions {
        // Serializing a plain struct of strings and floats cannot fail.
        out.push_str(&serde_json::to_string(c).expect("caption serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CorpusError::io(path, e))
}

/// Decodes a little-endian `SLMK` landmark file.
pub fn load_landmarks(path: &Path) -> Result<LandmarkStream> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    decode_landmarks(path, &bytes)
}

fn decode_landmarks(path: &Path, bytes: &[u8]) -> Result<LandmarkStream> {
    if bytes.len() < LANDMARK_HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != LANDMARK_MAGIC {
            return Err(CorpusError::BadMagic { path: path.display().to_string() });
        }
        return Err(CorpusError::TruncatedFile {
            path: path.display().to_string(),
            expected: LANDMARK_HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != LANDMARK_MAGIC {
        return Err(CorpusError::BadMagic { path: path.display().to_string() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != LANDMARK_VERSION {
        return Err(CorpusError::UnsupportedVersion {
            path: path.display().to_string(),
            version,
        });
    }
    let fps = f32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let dim = u32_at(12);
    let n_frames = u32_at(16) as usize;
    if dim as usize != FRAME_DIM {
        return Err(CorpusError::DimMismatch(dim));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(CorpusError::BadFps {
            path: path.display().to_string(),
            fps,
        });
    }
    let expected = LANDMARK_HEADER_LEN + n_frames * FRAME_DIM * 4;
    if bytes.len() != expected {
        return Err(CorpusError::TruncatedFile {
            path: path.display().to_string(),
            expected,
            found: bytes.len(),
        });
    }
    let mut frames = Vec::with_capacity(n_frames);
    for (i, chunk) in bytes[LANDMARK_HEADER_LEN..]
        .chunks_exact(FRAME_DIM * 4)
        .enumerate()
    {
        let mut frame = [0f32; FRAME_DIM];
        for (v, b) in frame.iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
        if !frame.iter().all(|v| v.is_finite()) {
            return Err(CorpusError::NonFinite {
                path: path.display().to_string(),
                frame: i,
            });
        }
        frames.push(frame);
    }
    Ok(LandmarkStream { fps, frames })
}

pub fn encode_landmarks(stream: &LandmarkStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(LANDMARK_HEADER_LEN + stream.len() * FRAME_DIM * 4);
    out.extend_from_slice(LANDMARK_MAGIC);
    out.extend_from_slice(&LANDMARK_VERSION.to_le_bytes());
    out.extend_from_slice(&stream.fps.to_le_bytes());
    out.extend_from_slice(&(FRAME_DIM as u32).to_le_bytes());
    out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
    for frame in &stream.frames {
        for v in frame {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_landmarks(path: &Path, stream: &LandmarkStream) -> Result<()> {
    fs::write(path, encode_landmarks(stream)).map_err(|e| CorpusError::io(path, e))
}

/// Reads a two-column `src<TAB>tgt` file into pairs tagged with the given languages.
pub fn load_mt_corpus(path: &Path, src_lang: &str, tgt_lang: &str) -> Result<Vec<MtPair>> {
    if src_lang == tgt_lang {
        return Err(CorpusError::Manifest(format!(
            "MT corpus {} has identical source and target language {src_lang}",
            path.display()
        )));
    }
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        let malformed = |reason: String| CorpusError::MalformedLine {
            path: path.display().to_string(),
            line_no: idx + 1,
            reason,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(malformed(format!("expected 2 tab-separated columns, found {}", cols.len())));
        }
        if cols[0].trim().is_empty() || cols[1].trim().is_empty() {
            return Err(malformed("empty side in MT pair".into()));
        }
        pairs.push(MtPair {
            src_text: cols[0].to_string(),
            tgt_text: cols[1].to_string(),
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
        });
    }
    Ok(pairs)
}

pub fn write_mt_corpus(path: &Path, pairs: &[MtPair]) -> Result<()> {
    let mut file = io::BufWriter::new(fs::File::create(path).map_err(|e| CorpusError::io(path, e))?);
    for p in pairs {
        writeln!(file, "{}\t{}", p.src_text, p.tgt_text).map_err(|e| CorpusError::io(path, e))?;
    }
    file.flush().map_err(|e| CorpusError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    /// Pre-aligned segments reserved for finetuning.
    Tune,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Dev, Split::Test, Split::Tune];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Tune => "tune",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            "tune" => Ok(Split::Tune),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub sign_lang: String,
    pub split: Split,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtShard {
    pub src_lang: String,
    pub tgt_lang: String,
    /// Relative to the corpus root.
    pub path: String,
    pub count: usize,
}

/// Index of a corpus directory.
///
/// `slt_durations` holds the per-sign-language total duration of the train
/// split in seconds; the mixer samples sign languages in proportion to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub videos: Vec<VideoEntry>,
    pub mt_shards: Vec<MtShard>,
    pub slt_durations: BTreeMap<String, f64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VIDEO_DIR: &str = "videos";
pub const MT_DIR: &str = "mt";

impl CorpusManifest {
    /// Builds a manifest with videos sorted by id and train durations summed.
    pub fn new(mut videos: Vec<VideoEntry>, mut mt_shards: Vec<MtShard>) -> Self {
        videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        mt_shards.sort_by(|a, b| (&a.src_lang, &a.tgt_lang).cmp(&(&b.src_lang, &b.tgt_lang)));
        let slt_durations = Self::sum_durations(&videos);
        CorpusManifest {
            videos,
            mt_shards,
            slt_durations,
        }
    }

    fn sum_durations(videos: &[VideoEntry]) -> BTreeMap<String, f64> {
        let mut totals = BTreeMap::new();
        for v in videos.iter().filter(|v| v.split == Split::Train) {
            *totals.entry(v.sign_lang.clone()).or_insert(0.0) += v.duration_s;
        }
        totals
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.videos {
            if !seen.insert(&v.video_id) {
                return Err(CorpusError::Manifest(format!("duplicate video id {}", v.video_id)));
            }
        }
        let sums = Self::sum_durations(&self.videos);
        for (lang, total) in &self.slt_durations {
            let sum = sums.get(lang).copied().unwrap_or(0.0);
            if (sum - total).abs() > 1e-6 {
                return Err(CorpusError::Manifest(format!(
                    "duration total for {lang} is {total} but member videos sum to {sum}"
                )));
            }
        }
        if let Some(lang) = sums.keys().find(|l| !self.slt_durations.contains_key(*l)) {
            return Err(CorpusError::Manifest(format!("missing duration total for {lang}")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let manifest: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| CorpusError::io(path, e))
    }
}

/// A fully loaded corpus directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    /// Sorted by video id within each split.
    pub videos: BTreeMap<Split, Vec<CaptionedVideo>>,
    /// Keyed by the shard's (src, tgt) as written on disk.
    pub mt: BTreeMap<(String, String), Vec<MtPair>>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(&root.join(MANIFEST_FILE))?;
        let mut videos: BTreeMap<Split, Vec<CaptionedVideo>> = BTreeMap::new();
        for entry in &manifest.videos {
            let video = load_video(root, entry)?;
            videos.entry(entry.split).or_default().push(video);
        }
        let mut mt = BTreeMap::new();
        for shard in &manifest.mt_shards {
            let pairs = load_mt_corpus(&root.join(&shard.path), &shard.src_lang, &shard.tgt_lang)?;
            if pairs.len() != shard.count {
                return Err(CorpusError::Manifest(format!(
                    "shard {} declares {} pairs but holds {}",
                    shard.path,
                    shard.count,
                    pairs.len()
                )));
            }
            mt.insert((shard.src_lang.clone(), shard.tgt_lang.clone()), pairs);
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            manifest,
            videos,
            mt,
        })
    }

    pub fn split(&self, split: Split) -> &[CaptionedVideo] {
        self.videos.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Loads one video's landmark and caption files and checks them against its
/// manifest entry.
pub fn load_video(root: &Path, entry: &VideoEntry) -> Result<CaptionedVideo> {
    let dir = root.join(VIDEO_DIR);
    let stream = load_landmarks(&dir.join(landmarks_file_name(&entry.video_id)))?;
    let captions = load_captions(&dir.join(captions_file_name(&entry.video_id)))?;
    let video = CaptionedVideo::new(entry.video_id.clone(), entry.sign_lang.clone(), stream, captions)?;
    if (video.duration_s - entry.duration_s).abs() > DURATION_TOLERANCE_S {
        return Err(CorpusError::InvalidVideo {
            video_id: entry.video_id.clone(),
            reason: format!(
                "declared duration {} s disagrees with landmark duration {} s",
                entry.duration_s, video.duration_s
            ),
        });
    }
    Ok(video)
}

pub fn write_video(root: &Path, video: &CaptionedVideo) -> Result<()> {
    let dir = root.join(VIDEO_DIR);
    fs::create_dir_all(&dir).map_err(|e| CorpusError::io(&dir, e))?;
    write_landmarks(&dir.join(landmarks_file_name(&video.video_id)), &video.stream)?;
    write_captions(&dir.join(captions_file_name(&video.video_id)), &video.captions)
}
