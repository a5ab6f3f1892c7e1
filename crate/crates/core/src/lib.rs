//! Merging per-task posterior approximations into fast previews of weighted
//! multitask training.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! the parallel sweep driver live in the `merge-preview` companion crate.
//!
//! Layout:
//! - [`expfam`]: Gaussian, mixture and Beta posteriors, surrogate losses and
//!   natural-parameter conversions.
//! - [`merging`]: simple averaging, task arithmetic, Hessian-weighted merging
//!   (with and without an informative prior), natural-parameter merging and
//!   the EM mode finder for mixture posteriors.
//! - [`vartrain`]: point estimates, variational online Newton (full and
//!   diagonal), squared-gradient Laplace precisions and multi-run mixtures.
//! - [`tasks`]: the 2-D log-sum-exp toy problems and class-split multiclass
//!   logistic regression.
//! - [`preview`]: simplex grids, preview sweeps, the joint-training oracle and
//!   surface metrics.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod expfam;
pub mod linalg;
pub mod merging;
pub mod preview;
pub mod tasks;
pub mod vartrain;

pub(crate) mod math;

pub use error::{Error, Result};
pub use expfam::{
    BetaPosterior, GaussianNatural, GaussianPosterior, Layout, MixtureComponent,
    MixturePosterior, ParamVector, PrecisionMatrix,
};
pub use merging::{EmConfig, EmInit, MergeResult, SimplexWeights};
pub use preview::{PreviewSurface, SimplexGrid, Strategy, SurfaceEntry};
pub use tasks::{Evaluator, TaskHandle};
pub use vartrain::{ArtifactKind, Payload, PosteriorArtifact, TrainMethod, TrainerConfig};
