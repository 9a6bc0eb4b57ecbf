//! Range-aware mixed 2/4-bit weight quantization with second-order scale
//! compression, sparse outliers and a tile-aligned packed layout.
//!
//! `no_std` with `alloc`. File formats, threading and the command line live
//! in the `qweight` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bitpack;
pub mod engine;
pub mod error;
pub mod layer;
pub mod matrix;
pub mod metrics;
pub mod outliers;
pub mod plan;
pub mod quant;

pub use bitpack::{LayerConfig, PackedLayer};
pub use engine::{matvec_oracle, reconstruct_dense, Accumulation};
pub use error::{Error, Result};
pub use layer::{quantize_layer, QuantConfig};
pub use matrix::{CalibrationVector, WeightMatrix};
pub use plan::ChannelPlan;
