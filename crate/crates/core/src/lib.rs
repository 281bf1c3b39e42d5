//! Joint uncertainty quantification for V-fold cross-validated risks.
//!
//! The pipeline is: a [`Dataset`](data::Dataset) and a bank of
//! [`LearnerSpec`](data::LearnerSpec)s go through [`cv`] to produce a
//! [`LossMatrix`](data::LossMatrix) of held-out losses. Everything downstream
//! is a function of that matrix: plug-in covariance ([`covariance`]),
//! Gaussian max quantiles ([`gaussian_mc`]), simultaneous bands and model
//! confidence sets ([`inference`]). [`det_variance`] estimates the covariance
//! under deterministic centering by replace-one recomputation, and
//! [`stability`] measures how fitted parameters and losses react to sample
//! replacement.

pub mod covariance;
pub mod cv;
pub mod data;
pub mod det_variance;
pub mod error;
pub mod gaussian_mc;
pub mod inference;
pub mod learners;
pub mod simgen;
pub mod stability;

pub use error::{Error, Result};
