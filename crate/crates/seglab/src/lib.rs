//! Segmentation training laboratory for partially annotated label sets.
//!
//! The crate trains one pixel classifier across several datasets even when
//! each dataset annotates only some of the classes. The key device is a
//! per-sample presence record: classes a sample's source actually
//! annotated. Losses consult it two ways, masking whole classes out of
//! dice-style aggregates and masking individual pixels out of
//! crossentropy-style sums, so unannotated structures stop being treated
//! as background.
//!
//! Modules, bottom to top:
//!
//! * [`ndgrad`]: tape-based reverse-mode autodiff over `f64` tensors.
//! * [`labelcore`]: rasters, one-hot encoding, resampling, cropping, and
//!   hard dice scoring.
//! * [`masking`]: presence records, label remapping, and the pixel mask
//!   construction rules.
//! * [`losses`]: presence-masked training objectives.
//! * [`dataset`]: synthetic corpus generation, partial-annotation
//!   simulation, dataset merging, splits, shrinks, stratified batches, and
//!   the on-disk corpus format.
//! * [`model`]: a miniature two-level encoder-decoder, Adam, and the
//!   training loop.
//! * [`harness`]: corpus/train/eval/experiment commands behind the CLI and
//!   the examples.
//!
//! Runnable walkthroughs live in `examples/`; start with
//! `cargo run --release --example autodiff_tour`.

pub mod dataset;
pub mod error;
pub mod harness;
pub mod labelcore;
pub mod losses;
pub mod masking;
pub mod model;
pub mod ndgrad;

pub use error::{Error, Result};
