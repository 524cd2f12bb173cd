//! Low-rank linear metric learning from triplet constraints, optimized on the
//! Stiefel manifold, with a pairwise kNN matcher for sentence pairs.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod error;
pub mod matcher;
pub mod oracle;
pub mod scalar;
pub mod solver;
pub mod sparse;
pub mod stiefel;
pub mod triplets;
pub mod vectorizer;

pub use error::{FilmError, Result};
pub use matcher::{Calibration, EmbeddedSet, MatchModel, MetricReport, Rule};
pub use scalar::Real;
pub use solver::{fit, fit_minibatch, FitResult, MetricMap, ScaleVector, SolverConfig, SvdFactors, TrainingTrace};
pub use sparse::CscMatrix;
pub use stiefel::StiefelPoint;
pub use triplets::{Triplet, TripletConfig, TripletSet};
pub use vectorizer::{FeatureMatrix, Vocabulary};

pub type FeatureMatrix64 = FeatureMatrix<f64>;
pub type FeatureMatrix32 = FeatureMatrix<f32>;
pub type StiefelPoint64 = StiefelPoint<f64>;
pub type StiefelPoint32 = StiefelPoint<f32>;
pub type MetricMap64 = MetricMap<f64>;
pub type MetricMap32 = MetricMap<f32>;
pub type FitResult64 = FitResult<f64>;
pub type FitResult32 = FitResult<f32>;
pub type MatchModel64 = MatchModel<f64>;
pub type MatchModel32 = MatchModel<f32>;
pub type EmbeddedSet64 = EmbeddedSet<f64>;
pub type EmbeddedSet32 = EmbeddedSet<f32>;
