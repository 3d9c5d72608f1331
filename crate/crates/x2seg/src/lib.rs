//! Prompt-conditioned image and video segmentation with a FIFO mask memory,
//! trained and evaluated entirely at desk scale on synthetic data.
//!
//! The crate is organized around the processing pipeline:
//! prompt rendering ([`prompt`], [`tokenizer`]) -> toy backbones
//! ([`backbones`]) with region sampling ([`region`]) -> mask decoding
//! ([`decoder`]) with temporal memory ([`memory`]) -> losses ([`losses`]) and
//! the two-phase training pipeline ([`train`], [`sampler`], [`optim`]).
//! Synthetic data generation lives in [`data`], the metric suite in
//! [`metrics`], and the operator surface in the `x2seg` binary.

pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mask;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prompt;
pub mod region;
pub mod sampler;
pub mod tokenizer;
pub mod train;

pub use error::{Result, X2Error};
