//! Locally sparse estimation for semi-parametric functional quantile
//! regression with a convolution-smoothed check loss.
//!
//! The pipeline: build a [`basis::SplineBasis`] and its [`basis::GramSet`],
//! assemble the design blocks from a [`design::FunctionalDataset`], then fit
//! with [`solver::fit_sql`] (roughness penalty only) or
//! [`solver::fit_close`] (adds the fSCAD sparsity penalty). Tuning lives in
//! [`tune`], wild-bootstrap inference in [`inference`], and the simulation
//! designs in [`simlab`].

// indexed loops read better than iterator chains in the matrix code
#![allow(clippy::needless_range_loop)]

pub mod basis;
pub mod cli;
pub mod design;
pub mod error;
pub mod inference;
pub mod loss;
pub mod penalty;
pub mod simlab;
pub mod solver;
pub mod tune;

pub use basis::{compute_gram_set, GramSet, SplineBasis};
pub use design::{assemble_design, load_csv, DatasetManifest, DesignMatrices, FunctionalDataset};
pub use error::{FqrError, Result};
pub use loss::{Kernel, SmoothedLossSpec};
pub use penalty::ScadParams;
pub use solver::{fit_close, fit_sql, FitResult, SolverConfig};
