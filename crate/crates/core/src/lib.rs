//! Multi-organ segmentation of abdominal scans with a hybrid LeViT encoder and
//! nested (UNet++) decoder, built on a small float64 autodiff core.
//!
//! The crate is organised bottom-up: [`tensor`] provides the tape, [`data`]
//! turns metadata and scans into samples, [`model`] builds the network,
//! [`train`] runs cross-validated training, and [`metrics`], [`eda`] and
//! [`synth`] cover scoring, dataset statistics and fixture generation.
//! [`cli`] wires everything into the `segkit` executable.

// Kernels index several parallel buffers by channel; iterator chains read worse.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod eda;
pub mod metrics;
pub mod model;
pub mod svg;
pub mod synth;
pub mod tensor;
pub mod train;
