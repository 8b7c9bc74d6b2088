//! Bone-conduction speech enhancement toolkit.
//!
//! Enhances noisy microphone audio using the speech-correlated skull
//! vibration picked up by a head-worn accelerometer. The crate covers the
//! full pipeline at desk scale:
//!
//! - [`signal`] — STFT/iSTFT, zero-phase IIR filtering, band-limited
//!   resampling, tri-axial vibration intensity extraction, WAV I/O.
//! - [`bcf`] — bone-conduction transfer function estimation from paired
//!   recordings (Welch PSD ratio), per-bin Gaussian modeling, and synthetic
//!   vibration generation for data augmentation.
//! - [`mixer`] — SNR-exact noise mixing, synthetic room reverberation, and
//!   manifest-driven dataset construction.
//! - [`model`] — the causal two-branch mask-estimation network with
//!   per-depth output taps, in offline and frame-streaming forms.
//! - [`training`] — SI-SNR and multi-level losses, reverse-mode gradients
//!   with finite-difference verification, and a seeded training loop.
//! - [`adapt`] — multi-modal SNR estimation, continual-learning curation
//!   with teacher remixing, adaptive-depth inference, and vibration VAD.
//! - [`metrics`] — SNR, log-spectral distance, spectrogram similarity.
//!
//! All randomness is seeded and all operations are deterministic: the same
//! inputs and seeds produce bit-identical outputs.

pub mod ad;
pub mod adapt;
pub mod bcf;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod params;
pub mod signal;
pub mod synth;
pub mod training;

use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
