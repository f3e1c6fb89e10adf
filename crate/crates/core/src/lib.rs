//! Dual-path classification pipeline for desk-scale chest-radiograph
//! experiments: a from-scratch f64 autodiff engine, miniature
//! densely-connected classifiers and an encoder-decoder segmenter, lung
//! bounding-box extraction, feature fusion with class activation maps,
//! a synthetic phantom corpus, and a complete evaluation harness.

pub mod error;
pub mod fusion;
pub mod image;
pub mod labels;
pub mod io;
pub mod lrg;
pub mod metrics;
pub mod networks;
pub mod par;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
