//! Adversarial full-face makeup against a white-box face classifier.
//!
//! An unpaired translation network (makeup generator `G` and reconstruction
//! generator `G_R`, each with a discriminator) is trained jointly with a
//! logit-margin objective against a frozen victim classifier. The
//! generator's output is passed through a Gaussian blur before it reaches
//! the victim so the perturbation survives imprecise manual application.
//!
//! Module map:
//!
//! - [`dataset`]: directory-per-class corpora, manifests and seeded batching.
//! - [`facepipe`]: face detection interface and cropping.
//! - [`models`]: generators, discriminators, the victim classifier and checkpoints.
//! - [`objectives`]: every loss term plus the blur operator.
//! - [`training`]: victim training and joint attack training.
//! - [`evaluation`]: frame-based per-class percentages and reports.
//! - [`config`]: run configs, digests and seed derivation.
//! - [`synth`]: a procedural face-like corpus for desk-scale experiments.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod facepipe;
pub mod image;
pub mod models;
pub mod objectives;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use image::ImageTensor;
