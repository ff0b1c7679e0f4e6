//! Omitted-variable-bias bounds for linear functionals of a regression.
//!
//! The pipeline estimates the short-model quantities `θ_s`, `σ²_s = E(Y−g_s)²`
//! and `ν²_s = E α_s²` by cross-fitted debiased machine learning, then turns
//! them into bounds `θ_s ± |ρ|·S·C_Y·C_D` with `S² = σ²_s·ν²_s`, together with
//! one-sided confidence bounds, robustness values, contour grids and
//! covariate benchmarks.

pub mod data;
pub mod dml;
pub mod error;
pub mod functionals;
pub mod learners;
pub mod riesz;
pub mod seed;
pub mod sensitivity;
pub mod stats;
pub mod synth;

pub use data::{fold_plan_for, load_csv, make_fold_plan, Dataset, FoldPlan, Schema};
pub use error::{Error, Result};
pub use functionals::{EvaluableFunction, Functional, FunctionalSpec};
