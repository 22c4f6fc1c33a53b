//! Steganalysis-based detection of adversarial examples.
//!
//! The crate covers the whole experimental chain: a synthetic grayscale
//! corpus, a small dense victim classifier, gradient and optimization
//! attacks against it, modification probability maps (MPM), SPAM and
//! rich-model co-occurrence features with their MPM-weighted variants, and
//! an ensemble of Fisher linear discriminants trained as the detector.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`, which is what the pipeline and CLI use.

pub mod attacks;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod mpm;
pub mod num;
pub mod pipeline;
pub mod richmodel;
pub mod seed;
pub mod spam;
pub mod store;
pub mod victim;

pub use corpus::{load_image, save_image, to_grayscale, DatasetManifest, GrayImage};
pub use error::{Error, Result};
pub use grid::Grid;
pub use num::Real;

pub type Victim = victim::VictimModel<f64>;
pub type Features = store::FeatureVector<f64>;
pub type FeatureMatrix = store::FeatureTable<f64>;
pub type ProbMap64 = mpm::ProbMap<f64>;
pub type Ensemble = ensemble::EnsembleModel<f64>;
