//! Myocardial pathology segmentation from multi-sequence cardiac MR.
//!
//! The crate is organised bottom-up:
//!
//! - [`study_io`]: aligned multi-sequence slice stacks, the nested five-class
//!   label encoding, NIfTI/manifest storage, normalization, cropping and
//!   augmentation.
//! - [`phantom`]: a seeded synthetic generator of annulus-shaped myocardium
//!   with nested edema and scar sectors.
//! - [`nn`]: a small deterministic tape autodiff engine (conv, instance norm,
//!   pooling, bilinear upsampling, elementwise max, softmax).
//! - [`model`]: the anatomy prior network, per-sequence encoders, cross-modal
//!   max fusion and the configurable scar/edema decoder sets.
//! - [`losses`]: Dice + weighted cross entropy, myocardium cosine consistency
//!   and the pathology-inclusiveness losses, each with analytic gradients.
//! - [`metrics`]: Dice, Hausdorff distance, accuracy/sensitivity/specificity.
//! - [`trainer`]: Adam, cosine-annealed schedule, semi-supervised batch
//!   interleaving, checkpoint selection and majority-vote ensembles.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod study_io;
pub mod trainer;

pub use error::{Error, Result};
