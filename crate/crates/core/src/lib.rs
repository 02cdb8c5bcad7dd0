//! Relative speech quality assessment against non-matching references.
//!
//! A two-input network compares a test recording with an arbitrary clean
//! reference of different content. It is trained without human labels on
//! synthetic pairs whose SNR and SI-SDR are known, and reports how much worse
//! (or better) the test input is, in SI-SDR decibels.
//!
//! Modules follow the pipeline:
//!
//! ```text
//! audio_io -> dsp -> degrade -> labels -> model -> train -> score -> eval
//! ```

pub mod audio_io;
pub mod cli;
pub mod degrade;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod labels;
pub mod model;
pub mod score;
pub mod synth;
pub mod train;

pub use audio_io::Waveform;
pub use error::{Error, Result};
