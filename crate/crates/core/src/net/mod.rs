//! Multi-level encoder-decoder networks.
//!
//! A network is a generator ed block at full resolution followed by up to
//! two enhancer blocks, each fed the area-downsampled output of the level
//! before it. Every level ends in a sigmoid head, so a three-level network
//! yields outputs at full, half and quarter resolution.
//!
//! Inter-level links join a stage of level `l` to the encoder stage of
//! level `l + 1` that runs at the same resolution; links with no such
//! partner are dropped.

mod network;
mod spec;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use network::{Forward, LinkCounts, MedNetwork, Tap, BN_EPS, KERNEL, LEAKY_SLOPE};
pub use spec::{
    classify, config_count, from_name, EdSpec, MedSpec, SkipMode, DEFAULT_BASE_CHANNELS,
    VARIANT_NAMES,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network spec, {field}: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("skip mode {0:?} has no variant name")]
    Unclassified(SkipMode),
    #[error("input {height}x{width} is not divisible by {divisor}")]
    Indivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("bad network input: {0}")]
    Input(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
