//! Robust federated-learning aggregation built around two-round density
//! clustering of PCA-projected client gradients.
//!
//! The server projects the round's gradient matrix onto its two highest
//! variance directions, picks the clustering radius from pairwise distances
//! among a small set of known-benign clients, and runs DBSCAN to isolate a
//! benign cluster. A small generator network then places pseudo-gradients
//! near the benign cluster boundary so that a second clustering pass can
//! recover benign outliers before the surviving gradients are averaged in
//! the original high-dimensional space.
//!
//! The crate also ships the poisoning attacks, reference aggregators, and
//! synthetic federated tasks used to exercise the aggregation rule, plus a
//! config/report layer consumed by the `encagg` CLI.

pub mod attacks;
pub mod baselines;
pub mod clustering;
pub mod config;
pub mod error;
pub mod filtering;
pub mod generator;
pub mod pipeline;
pub mod projection;
pub mod report;
pub mod seeding;
pub mod simulation;
pub mod verify;

pub use clustering::{ClusteringResult, Point2, RadiusSelection};
pub use config::{AggregatorKind, AttackKind, ExperimentConfig, TaskKind};
pub use error::{Error, Result};
pub use filtering::FilterOutcome;
pub use generator::{GeneratorHyper, GeneratorLossReport, GeneratorModel, PseudoGradientBatch};
pub use pipeline::{EnCAggParams, PseudoSource, RoundRecord};
pub use projection::{GradientMatrix, ProjectionResult};

/// Library version, surfaced in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
