//! Multi-task sign language translation pretraining at desk scale.
//!
//! The crate covers the whole pipeline: corpus formats, clip sampling,
//! task construction, data mixtures, a small byte-level encoder-decoder with
//! hand-written gradients, beam search, translation metrics and a synthetic
//! signed-language benchmark with exact ground truth.

pub mod clips;
pub mod corpus;
pub mod synth;
pub mod tasks;
pub mod mixture;
pub mod metrics;
pub mod model;
pub mod decode;
pub mod pipeline;
