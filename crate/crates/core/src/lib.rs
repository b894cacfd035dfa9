//! Learning classifiers from noisy crowdsourced labels.
//!
//! The central model pairs a softmax classifier with one noise transition
//! matrix per annotator. Each transition matrix is the row-softmax of the
//! annotator's class-level confusion logits plus an instance-dependent
//! adjustment computed from the classifier's hidden features, so an
//! annotator's reliability may vary across the feature space.
//!
//! Modules:
//!
//! * [`numerics`]: matrices, stable softmax, seeded randomness, finite differences
//! * [`datamodel`]: crowdsourced datasets and their CSV formats
//! * [`lfcx`]: model forward pass, likelihood and analytic gradients
//! * [`trainer`]: two-stage SGD training, logs and checkpoints
//! * [`baselines`]: majority vote, Dawid-Skene EM, confusion-only training
//! * [`simgen`]: synthetic annotators with class-level and feature-dependent noise
//! * [`evalharness`]: metrics and multi-seed method comparisons

pub mod baselines;
pub mod datamodel;
pub mod error;
pub mod evalharness;
pub mod lfcx;
pub mod numerics;
pub mod simgen;
pub mod trainer;

pub use error::{Error, Result};
