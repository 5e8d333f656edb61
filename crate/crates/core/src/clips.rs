//! Clip-level view of a captioned video: frame striding, random fixed-length
//! windows and the captions they fully cover.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Caption, CaptionedVideo, Frame, LandmarkStream};

/// Hard cap on landmark frames fed to the encoder.
pub const MAX_CLIP_FRAMES: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum ClipError {
    #[error("video {0} has no frames")]
    EmptyVideo(String),
    #[error("invalid clip config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub clip_seconds: f64,
    pub frame_stride: usize,
    pub max_resample: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            clip_seconds: 34.0,
            frame_stride: 2,
            max_resample: 10,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<(), ClipError> {
        if !(self.clip_seconds > 0.0 && self.clip_seconds.is_finite()) {
            return Err(ClipError::InvalidConfig(format!(
                "clip_seconds must be positive, got {}",
                self.clip_seconds
            )));
        }
        if self.frame_stride == 0 {
            return Err(ClipError::InvalidConfig("frame_stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub video_id: String,
    pub clip_start_s: f64,
    pub clip_end_s: f64,
    /// Post-stride frames, at most [`MAX_CLIP_FRAMES`].
    pub frames: Vec<Frame>,
    /// Captions lying entirely inside the clip, sorted by start.
    pub covered: Vec<Caption>,
}

/// Keeps frames `0, stride, 2*stride, ...`; the frame rate drops accordingly.
pub fn downsample_frames(stream: &LandmarkStream, stride: usize) -> LandmarkStream {
    assert!(stride >= 1, "stride must be >= 1");
    LandmarkStream {
        fps: stream.fps / stride as f32,
        frames: stream.frames.iter().step_by(stride).copied().collect(),
    }
}

/// Captions `c` with `clip_start_s <= c.start_s` and `c.end_s <= clip_end_s`.
///
/// Both ends are closed, so a caption touching the clip boundary is covered.
/// `captions` must be sorted by start time.
pub fn covered_captions(captions: &[Caption], clip_start_s: f64, clip_end_s: f64) -> Vec<Caption> {
    let first = captions.partition_point(|c| c.start_s < clip_start_s);
    captions[first..]
        .iter()
        .take_while(|c| c.start_s <= clip_end_s)
        .filter(|c| c.end_s <= clip_end_s)
        .cloned()
        .collect()
}

/// Post-stride frames whose timestamps fall in `[start_s, end_s)`.
///
/// Striding is done by index on the source stream so frame times stay on the
/// global grid `k * stride / fps`, independent of the window.
pub fn window_frames(stream: &LandmarkStream, stride: usize, start_s: f64, end_s: f64) -> Vec<Frame> {
    let step_s = stride as f64 / stream.fps as f64;
    let n_strided = stream.len().div_ceil(stride);
    // Small slack keeps frames sitting exactly on a boundary from being lost to rounding.
    let eps = 1e-9;
    let first = ((start_s - eps) / step_s).ceil().max(0.0) as usize;
    let mut frames = Vec::new();
    for k in first..n_strided {
        if k as f64 * step_s >= end_s - eps {
            break;
        }
        frames.push(stream.frames[k * stride]);
    }
    frames
}

/// The clip `[start_s, start_s + N)` (or the whole video when it is shorter
/// than N), with frames truncated to the encoder cap.
pub fn clip_at(video: &CaptionedVideo, cfg: &ClipConfig, start_s: f64) -> Clip {
    let (start, end) = if video.duration_s <= cfg.clip_seconds {
        (0.0, video.duration_s)
    } else {
        (start_s, start_s + cfg.clip_seconds)
    };
    let mut frames = window_frames(&video.stream, cfg.frame_stride, start, end);
    frames.truncate(MAX_CLIP_FRAMES);
    Clip {
        video_id: video.video_id.clone(),
        clip_start_s: start,
        clip_end_s: end,
        frames,
        covered: covered_captions(&video.captions, start, end),
    }
}

/// Draws a random clip; retries up to `max_resample` times when the clip
/// covers no caption and then gives up, returning the last (empty) clip.
pub fn sample_clip<R: Rng + ?Sized>(
    video: &CaptionedVideo,
    cfg: &ClipConfig,
    rng: &mut R,
) -> Result<Clip, ClipError> {
    if video.stream.is_empty() {
        return Err(ClipError::EmptyVideo(video.video_id.clone()));
    }
    let slack = (video.duration_s - cfg.clip_seconds).max(0.0);
    let mut attempts = 0;
    loop {
        let start = if slack > 0.0 { rng.random::<f64>() * slack } else { 0.0 };
        let clip = clip_at(video, cfg, start);
        if !clip.covered.is_empty() || attempts >= cfg.max_resample {
            if clip.covered.is_empty() {
                log::debug!(
                    "clip of {} at {:.2}s covers no caption after {} resamples",
                    video.video_id,
                    start,
                    attempts
                );
            }
            return Ok(clip);
        }
        attempts += 1;
    }
}
