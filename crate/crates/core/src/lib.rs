//! Core library for weakly-supervised cross-domain lesion segmentation.
//!
//! Everything is CPU-only, `f64` internally, and deterministic given a seed.
//! The building blocks, roughly bottom-up:
//!
//! * [`tensor`] — dense tensors plus a define-by-run autodiff graph whose
//!   backward pass emits ordinary graph nodes (so gradients are themselves
//!   differentiable).
//! * [`params`] — named parameter storage, gradients, checkpoints.
//! * [`networks`], [`attention`], [`gate`] — the model: shared backbone,
//!   dual attention, image/pixel heads, domain critic, confidence gate.
//! * [`pseudo`], [`superpixel`] — self-paced pseudo-labeling with
//!   class-balanced thresholds and superpixel-guided refinement.
//! * [`centroid`] — exponentially-averaged class centroid banks and the
//!   centroid alignment penalty.
//! * [`losses`], [`optim`], [`trainer`] — training objectives, Adam with
//!   decay and clipping, and the full training loop with ablation variants.
//! * [`synth`], [`dataset`] — the two-domain synthetic dataset and its
//!   on-disk layout.
//! * [`evalreport`] — IoU evaluation and report files.

pub mod attention;
pub mod centroid;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalreport;
pub mod gate;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod pseudo;
pub mod rngutil;
pub mod superpixel;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, TensorRef};
