//! Regression learners for the outcome regression and auxiliary fits such as
//! the propensity score.

pub mod dictionary;
pub mod forest;
pub mod linear;
pub mod solver;

use std::fmt::Debug;
use std::sync::Arc;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dictionary::{Dictionary, Term};
pub use forest::{fit_tree_ensemble, ForestFit, TreeEnsemble};
pub use linear::{fit_penalized_linear, PenalizedLinear, PenalizedLinearFit};

use crate::data::FoldPlan;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// A fitted regression. Immutable and safe to share between threads.
pub trait RegressionFit: Send + Sync + Debug {
    fn predict(&self, features: ArrayView2<f64>) -> Array1<f64>;
    fn training_r2(&self) -> f64;
}

pub trait RegressionLearner: Send + Sync + Debug {
    fn fit(&self, features: ArrayView2<f64>, targets: ArrayView1<f64>, seed: u64) -> Result<Arc<dyn RegressionFit>>;
    fn name(&self) -> String;
    /// The same learner configured for inputs that have no treatment column.
    fn without_treatment(&self) -> Arc<dyn RegressionLearner>;
}

/// Serializable learner choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LearnerSpec {
    PenalizedLinear(PenalizedLinear),
    TreeEnsemble(TreeEnsemble),
}

impl LearnerSpec {
    pub fn build(&self) -> Arc<dyn RegressionLearner> {
        match self {
            LearnerSpec::PenalizedLinear(l) => Arc::new(l.clone()),
            LearnerSpec::TreeEnsemble(t) => Arc::new(t.clone()),
        }
    }
}

pub(crate) fn r_squared(targets: ArrayView1<f64>, fitted: ArrayView1<f64>) -> f64 {
    let n = targets.len() as f64;
    let mean = targets.sum() / n;
    let sst: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    let sse: f64 = targets.iter().zip(fitted.iter()).map(|(t, f)| (t - f).powi(2)).sum();
    if sst <= 0.0 {
        return if sse <= 1e-24 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - sse / sst
}

/// Per-fold fits (fold `k` trained on the rows outside fold `k`) together
/// with the out-of-fold predictions they produce.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub fits: Vec<Arc<dyn RegressionFit>>,
    pub out_of_fold: Array1<f64>,
}

pub fn cross_fit(
    learner: &dyn RegressionLearner,
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    plan: &FoldPlan,
) -> Result<CrossFit> {
    if features.nrows() != plan.n || targets.len() != plan.n {
        return Err(Error::InvalidInput("fold plan size differs from data".into()));
    }
    let fits: Vec<Arc<dyn RegressionFit>> = (0..plan.num_folds)
        .into_par_iter()
        .map(|k| {
            let train = plan.train_indices(k);
            let x = features.select(Axis(0), &train);
            let y = targets.select(Axis(0), &train);
            learner.fit(x.view(), y.view(), derive_seed(plan.seed, k as u64))
        })
        .collect::<Result<_>>()?;
    let mut out_of_fold = Array1::zeros(plan.n);
    for (k, fit) in fits.iter().enumerate() {
        let rows = plan.fold_indices(k);
        let pred = fit.predict(features.select(Axis(0), &rows).view());
        for (r, &i) in rows.iter().enumerate() {
            out_of_fold[i] = pred[r];
        }
    }
    if !out_of_fold.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("out-of-fold predictions of {}", learner.name())));
    }
    Ok(CrossFit { fits, out_of_fold })
}

/// Outcome of [`select_learner_cv`].
#[derive(Debug, Clone)]
pub struct Selection {
    pub index: usize,
    /// Cross-validated MSE per candidate, or the error that candidate raised.
    pub cv_mse: Vec<std::result::Result<f64, String>>,
}

impl Selection {
    pub fn best_mse(&self) -> f64 {
        self.cv_mse[self.index].clone().unwrap_or(f64::NAN)
    }
}

/// Ties within this tolerance go to the earlier candidate.
pub const CV_TIE_TOL: f64 = 1e-12;

pub fn select_learner_cv(
    candidates: &[Arc<dyn RegressionLearner>],
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    plan: &FoldPlan,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no learner candidates".into()));
    }
    let mut cv_mse = Vec::with_capacity(candidates.len());
    let mut first_err = None;
    for c in candidates {
        match cross_fit(c.as_ref(), features, targets, plan) {
            Ok(cf) => {
                let mse = targets
                    .iter()
                    .zip(cf.out_of_fold.iter())
                    .map(|(t, p)| (t - p).powi(2))
                    .sum::<f64>()
                    / targets.len() as f64;
                cv_mse.push(Ok(mse));
            }
            Err(e) => {
                cv_mse.push(Err(e.to_string()));
                first_err.get_or_insert(e);
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in cv_mse.iter().enumerate() {
        if let Ok(m) = m {
            if best.is_none_or(|(_, b)| *m < b - CV_TIE_TOL) {
                best = Some((i, *m));
            }
        }
    }
    match best {
        Some((index, _)) => Ok(Selection { index, cv_mse }),
        None => Err(first_err.expect("all candidates failed")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_fold_plan;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_data(n: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 3), |_| StandardNormal.sample(&mut rng));
        let y = Array1::from_shape_fn(n, |i| {
            1.5 * x[[i, 0]] - x[[i, 1]] + 0.5 * x[[i, 2]] + 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        (x, y)
    }

    #[test]
    fn single_candidate_selected() {
        let (x, y) = linear_data(100, 1);
        let plan = make_fold_plan(100, 5, 1, None, None).unwrap();
        let c: Vec<Arc<dyn RegressionLearner>> = vec![Arc::new(PenalizedLinear::default())];
        assert_eq!(select_learner_cv(&c, x.view(), y.view(), &plan).unwrap().index, 0);
    }

    #[test]
    fn linear_truth_prefers_linear_learner() {
        let (x, y) = linear_data(600, 2);
        let plan = make_fold_plan(600, 5, 3, None, None).unwrap();
        let trees = TreeEnsemble { num_trees: 30, max_depth: Some(2), ..TreeEnsemble::default() };
        let c: Vec<Arc<dyn RegressionLearner>> = vec![Arc::new(trees), Arc::new(PenalizedLinear::default())];
        let sel = select_learner_cv(&c, x.view(), y.view(), &plan).unwrap();
        assert_eq!(sel.index, 1);
        let mses: Vec<f64> = sel.cv_mse.iter().map(|m| m.clone().unwrap()).collect();
        assert!(mses[1] < mses[0]);
    }

    #[test]
    fn identical_candidates_pick_first() {
        let (x, y) = linear_data(100, 4);
        let plan = make_fold_plan(100, 5, 1, None, None).unwrap();
        let c: Vec<Arc<dyn RegressionLearner>> =
            vec![Arc::new(PenalizedLinear::default()), Arc::new(PenalizedLinear::default())];
        assert_eq!(select_learner_cv(&c, x.view(), y.view(), &plan).unwrap().index, 0);
    }

    #[test]
    fn all_failing_candidates_error() {
        let (x, y) = linear_data(20, 4);
        let plan = make_fold_plan(20, 5, 1, None, None).unwrap();
        let bad = TreeEnsemble { min_leaf: 50, ..TreeEnsemble::default() };
        let c: Vec<Arc<dyn RegressionLearner>> = vec![Arc::new(bad)];
        assert!(select_learner_cv(&c, x.view(), y.view(), &plan).is_err());
    }

    #[test]
    fn learner_spec_json() {
        let spec: LearnerSpec =
            serde_json::from_str(r#"{"type":"tree_ensemble","num_trees":10,"min_leaf":2}"#).unwrap();
        assert_eq!(
            spec,
            LearnerSpec::TreeEnsemble(TreeEnsemble { num_trees: 10, min_leaf: 2, ..TreeEnsemble::default() })
        );
        assert!(serde_json::from_str::<LearnerSpec>(r#"{"type":"penalized_linear","l3":1}"#).is_err());
    }
}
