//! Online video instance segmentation by query propagation, with a
//! local-to-global query aligner and mask-derived positional embeddings,
//! built from scratch on a small reverse-mode autodiff core.
//!
//! The crate runs end to end at desk scale: [`synth`] generates moving
//! shape videos, [`train`] fits a [`model::Model`] clip by clip,
//! [`tracker`] runs it online frame by frame and [`eval`] scores the
//! resulting tracks.

pub mod aligner;
pub mod assign;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod mask;
pub mod model;
pub mod nn;
pub mod numcore;
pub mod posembed;
pub mod segmenter;
pub mod synth;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
