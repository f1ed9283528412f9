//! Temporally informed non-contrastive self-supervised learning (TINC) for
//! longitudinal imaging cohorts.
//!
//! The crate is organised around the pipeline stages:
//!
//! * [`losses`]: VICReg terms, the TINC margin term, Barlow Twins and the
//!   time-difference head loss, each with analytic gradients and a
//!   finite-difference checker.
//! * [`cohort`]: the longitudinal manifest, time-gap scaling, conversion
//!   labels, stratified splits and the two-visit pair sampler.
//! * [`synth`]: a synthetic cohort generator that renders pseudo B-scans.
//! * [`augment`]: flattening, resizing and the SSL / supervised augmentation
//!   policies.
//! * [`nn`], [`optim`], [`trainer`]: a small CPU network stack, AdamW with a
//!   warmup-cosine schedule, and the pretraining loop with checkpoints.
//! * [`eval`]: AUROC / average precision, probes, fine-tuning and collapse
//!   diagnostics.

pub mod augment;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Result, TincError};
pub use linalg::Matrix;
