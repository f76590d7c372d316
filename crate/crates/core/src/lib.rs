//! Multichannel continuous speech separation.
//!
//! Turns a streaming microphone-array signal into two time-synchronous
//! output streams. Each utterance is emitted from exactly one output channel,
//! and the idle channel carries silence while at most one talker is active.
//!
//! The signal path is:
//!
//! 1. optional WPE dereverberation ([`dereverb`]),
//! 2. STFT analysis ([`stft`]) and spectral/spatial features ([`features`]),
//! 3. per-window speech/speech/noise masks from a pluggable [`masks::MaskProvider`],
//! 4. sum-to-one normalization and DOA-based head merging ([`masks`]),
//! 5. cross-window permutation alignment ([`stitcher`]),
//! 6. masking or MVDR beamforming with gain adjustment ([`beamformer`]).
//!
//! [`simulator`] renders reverberant, noisy test scenes with ground truth and
//! [`metrics`] scores the separated streams against it.

pub mod beamformer;
pub mod dereverb;
mod error;
pub mod features;
pub mod linalg;
pub mod masks;
pub mod metrics;
pub mod pit;
pub mod signal_io;
pub mod simulator;
pub mod stft;
pub mod stitcher;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Speed of sound in air, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

pub use num_complex::Complex64;
