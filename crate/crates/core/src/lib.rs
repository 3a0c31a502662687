//! Gamified weakly-supervised segmentation.
//!
//! Two agents take turns selecting and erasing patches of an image. Each
//! selection is scored by an object-presence detector that was trained only on
//! image-level labels, and the agents are trained with policy-gradient
//! self-play against historic copies of themselves. At test time a single
//! agent picks patches until it decides the object is exhausted, and the
//! chosen patches (optionally fused over shifted grids) form the mask.
//!
//! This crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! experiment orchestration live in the `segplay` crate.

#![no_std]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod detector;
pub mod env;
mod error;
pub mod grid;
pub mod image;
pub mod inference;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod selfplay;
pub mod synth;

pub use detector::{Detector, DetectorArch, Head, DetectorTrainConfig, OracleDetector, PatchScorer};
pub use env::{Action, Agent, EnvConfig, GameState, Opponent, RewardBreakdown};
pub use error::{Error, Result};
pub use grid::{Fit, PatchGrid};
pub use image::{Image, Mask, Rect};
pub use policy::{Policy, PolicyArch, Trajectory};
pub use selfplay::{CompetitorMode, SelfPlayConfig, SnapshotStore};
