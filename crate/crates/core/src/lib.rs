//! Allocation-only CNN engine for patch classification and class activation
//! mapping.
//!
//! Everything here is a pure function of its inputs and an explicit [`Rng`]
//! state. File formats, the command line and other IO live in the `patchcam`
//! companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod cam;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod math;
pub mod network;
mod rng;
pub mod synth;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use layers::{Layer, LayerKind};
pub use network::{Dataset, ForwardTrace, InputSpec, Network, Preset, Sample};
pub use rng::{box_muller, stream_seed, Rng, Stream};
pub use tensor::Tensor;
