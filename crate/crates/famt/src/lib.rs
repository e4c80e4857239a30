//! Frequency & attention driven masking and throwing (FAMT) for masked image
//! modeling, built on a small 64-bit tensor engine with reverse-mode autodiff.
//!
//! The crate is organised around the pipeline it implements:
//!
//! - [`numerics`] — dense f64 tensors and a define-by-run gradient tape
//! - [`spectral`] — 1-D FFT/IFFT and the Gaussian low-pass filter
//! - [`vit`] — patch tokenization, transformer blocks, CLS-attention extraction
//! - [`weights`] — per-token frequency scores γ and sampling weights P_A
//! - [`sampler`] — weighted ordering and the mask/throw/visible partition
//! - [`trainer`] — MAE-style pretraining with strategy-driven masking/throwing
//! - [`probe`] — frozen-feature linear probing and supervised fine-tuning
//! - [`data`] — CIFAR-10 binary loading, synthetic datasets, PGM/PPM emission
//! - [`checkpoint`] — binary checkpoint save/load
//! - [`bench`] — the strategy/cost comparison harness
//!
//! Data-parallel loops (weight refresh, feature extraction, per-sample batch
//! gradients) run on rayon when the `parallel` feature is enabled and a
//! worker count above one is requested; otherwise they take an equivalent
//! sequential path that produces bit-identical results.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod numerics;
pub mod parallel;
pub mod probe;
pub mod rng;
pub mod sampler;
pub mod spectral;
pub mod trainer;
pub mod vit;
pub mod weights;

pub use error::{Error, Result};
