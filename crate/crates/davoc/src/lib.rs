//! Channel-robust pathological voice detection.
//!
//! The crate covers the full experiment pipeline:
//!
//! - [`dsp`] — acoustic front end: WAV input, 26-dim MFCCs and 40-dim log mel
//!   filter banks with half-window frame shift, per-utterance time
//!   normalization, and 11-frame context stacking.
//! - [`net`] — small reverse-mode differentiable building blocks (dense,
//!   LSTM, gradient reversal, softmax cross-entropy, Adam) with a
//!   finite-difference gradient verifier.
//! - [`models`] — the BLSTM detector, the per-frame MLP detector, and the
//!   device classifier that sits behind the gradient reversal layer.
//! - [`adapt`] — training regimes: source-only, target-only, frozen-encoder
//!   fine-tuning, and domain-adversarial training in supervised and
//!   unsupervised modes.
//! - [`eval`] — precision-recall curves, PR-AUC, seed aggregation, and
//!   Welch's t-test.
//! - [`corpus`] — a deterministic synthetic two-device vowel corpus with a
//!   controllable channel mismatch, used in place of clinical recordings.
//!
//! Everything is 64-bit and deterministic: a run is a pure function of its
//! configuration and seed.

pub mod adapt;
pub mod corpus;
pub mod dsp;
pub mod eval;
pub mod models;
pub mod net;
pub mod rng;

pub use dsp::{Device, FeatureConfig, FeatureKind, FeatureMatrix, Label, Utterance};
pub use eval::{PrCurve, SeedSummary};
