//! Tooling for pre-labelling wearable-camera timelapse images with
//! physical-activity intensity classes.
//!
//! The crate is organised as a batch pipeline:
//!
//! - [`dataset`] ingests participant-organised annotation CSVs, persists them
//!   as JSONL, and splits participants into train/val/test.
//! - [`taxonomy`] parses compendium-style labels, maps them onto intensity
//!   classes, and builds the clean-label taxonomy from a dendrogram review.
//! - [`audit`] computes dataset-quality diagnostics.
//! - [`gateway`] talks to embedding and captioning backends (a deterministic
//!   stub, or a remote service) through a content-addressed cache.
//! - [`zeroshot`] classifies images by nearest-label retrieval.
//! - [`evaluation`] computes agreement metrics per participant and pooled.
//! - [`sweep`] runs random hyperparameter searches over zero-shot pipelines.
//! - [`review`] tracks human corrections and serves the review HTTP API.

pub mod audit;
pub mod dataset;
pub mod evaluation;
pub mod gateway;
pub mod intensity;
pub mod review;
pub mod stats;
pub mod sweep;
pub mod taxonomy;
pub mod zeroshot;

mod fsutil;

pub use intensity::IntensityClass;
