//! Weakly-supervised domain adaptation with proportion-constrained
//! pseudo-labeling.
//!
//! Given a classifier trained on a labeled source domain and only the class
//! proportions of an unlabeled target domain, each adaptation epoch assigns
//! every target sample a pseudo-label by solving a min-cost transportation
//! problem: samples go to source class centroids so that total squared
//! distance is minimal while the per-class counts match the known
//! proportions exactly. The network is then retrained on source labels plus
//! target pseudo-labels.
//!
//! Modules:
//! - [`types`]: validated domain types and count/centroid helpers.
//! - [`solver`]: the exact constrained assignment solver and its oracles.
//! - [`model`]: MLP classifier, losses, Adam, class-balanced batching.
//! - [`adapt`]: pre-training and the adaptation loop, with baselines.
//! - [`eval`]: accuracy, macro precision/recall/F1, confusion matrices.
//! - [`synth`]: synthetic domain-shift scenarios and proportion noise.
//! - [`io`]: binary feature/checkpoint files and JSON/text inputs.
//! - [`cli`]: the `pcpl` command line.

pub mod adapt;
pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod solver;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    class_counts, compute_centroids, proportions_to_counts, Assignment, Centroids, CountVector,
    FeatureMatrix, LabeledDataset, ProportionSpec, UnlabeledDataset,
};
