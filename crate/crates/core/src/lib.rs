//! Concurrent speaker detection toolkit.
//!
//! Multichannel audio is turned into log-spectrum segments, each segment is
//! classified as noise only, a single speaker, or concurrent speakers by a
//! transformer with a multichannel patch embedding, and the classifier is
//! trained, calibrated and scored by the modules below.

pub mod calibmetrics;
pub mod featext;
pub mod labelgen;
pub mod model;
pub mod numcore;
pub mod trainloss;
pub mod pipeline;
