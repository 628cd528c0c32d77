//! Class-sensitive subject-to-subject semantic style transfer for RSVP-EEG
//! target detection.
//!
//! A golden subject's classifier is reused for a poorly performing target
//! subject by training a generator that maps the target's time-frequency
//! features into the golden subject's feature distribution, one class at a
//! time. Predictions of both classifiers are combined by soft voting.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod eeg_io;
pub mod error;
pub mod evaluate;
pub mod models;
pub mod preprocess;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
