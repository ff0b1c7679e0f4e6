//! Elastic-net regression on a feature dictionary.
//!
//! Minimizes `(1/2n)·Σ(y − b₀ − βᵀz)² + l1·‖β‖₁ + l2·‖β‖²/2` where `z` are the
//! standardized dictionary columns; the intercept is unpenalized. The
//! coefficients are mapped back to the raw dictionary scale on output.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::dictionary::{prune_columns, transform_terms, Dictionary, Term};
use super::solver::{solve_quadratic, CdSettings};
use super::{r_squared, RegressionFit, RegressionLearner};
use crate::error::{Error, Result};

/// Gram matrices beyond this size are refused.
pub const GRAM_BUDGET_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenalizedLinear {
    pub dictionary: Dictionary,
    pub l1: f64,
    pub l2: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for PenalizedLinear {
    fn default() -> Self {
        PenalizedLinear {
            dictionary: Dictionary::default(),
            l1: 1e-3,
            l2: 0.0,
            tol: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

impl RegressionLearner for PenalizedLinear {
    fn fit(&self, features: ArrayView2<f64>, targets: ArrayView1<f64>, _seed: u64) -> Result<Arc<dyn RegressionFit>> {
        let settings = CdSettings { tol: self.tol, max_sweeps: self.max_sweeps, ..CdSettings::default() };
        let fit = fit_penalized_linear_with(features, targets, &self.dictionary, self.l1, self.l2, settings)?;
        Ok(Arc::new(fit))
    }

    fn name(&self) -> String {
        format!("penalized_linear(l1={}, l2={})", self.l1, self.l2)
    }

    fn without_treatment(&self) -> Arc<dyn RegressionLearner> {
        Arc::new(PenalizedLinear { dictionary: self.dictionary.without_treatment(), ..self.clone() })
    }
}

#[derive(Debug, Clone)]
pub struct PenalizedLinearFit {
    pub terms: Vec<Term>,
    pub intercept: f64,
    /// Coefficients on the raw (unstandardized) dictionary columns.
    pub coef: Array1<f64>,
    /// Coefficients on the standardized columns, as solved.
    pub std_coef: Array1<f64>,
    pub means: Array1<f64>,
    pub sds: Array1<f64>,
    pub sweeps: usize,
    pub kkt_violation: f64,
    training_r2: f64,
}

impl RegressionFit for PenalizedLinearFit {
    fn predict(&self, features: ArrayView2<f64>) -> Array1<f64> {
        let phi = transform_terms(&self.terms, features);
        phi.dot(&self.coef) + self.intercept
    }

    fn training_r2(&self) -> f64 {
        self.training_r2
    }
}

pub fn fit_penalized_linear(
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    dictionary: &Dictionary,
    l1_weight: f64,
    l2_weight: f64,
    _seed: u64,
) -> Result<PenalizedLinearFit> {
    fit_penalized_linear_with(features, targets, dictionary, l1_weight, l2_weight, CdSettings::default())
}

pub fn fit_penalized_linear_with(
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    dictionary: &Dictionary,
    l1_weight: f64,
    l2_weight: f64,
    settings: CdSettings,
) -> Result<PenalizedLinearFit> {
    let n = features.nrows();
    if n < 2 || targets.len() != n {
        return Err(Error::InvalidInput(format!(
            "penalized linear fit needs n >= 2 rows and matching targets (rows {n}, targets {})",
            targets.len()
        )));
    }
    if !(l1_weight >= 0.0 && l2_weight >= 0.0) {
        return Err(Error::InvalidInput("penalty weights must be non-negative".into()));
    }
    if !features.iter().chain(targets.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("regression inputs".into()));
    }
    let all_terms = dictionary.terms(features.ncols());
    let phi_all = transform_terms(&all_terms, features);
    let keep = prune_columns(phi_all.view(), true);
    let terms: Vec<Term> = keep.iter().map(|&k| all_terms[k]).collect();
    let q = terms.len();
    let bytes = q * q * std::mem::size_of::<f64>();
    if bytes > GRAM_BUDGET_BYTES {
        return Err(Error::DictionaryTooLarge { terms: q, bytes, budget: GRAM_BUDGET_BYTES });
    }
    let phi = phi_all.select(Axis(1), &keep);

    let nf = n as f64;
    let y_mean = targets.sum() / nf;
    let yc = targets.mapv(|v| v - y_mean);
    let means = phi.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(q));
    let mut z = phi.clone();
    let mut sds = Array1::zeros(q);
    for j in 0..q {
        let m = means[j];
        let sd = (phi.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nf).sqrt();
        sds[j] = sd;
        z.column_mut(j).mapv_inplace(|v| (v - m) / sd);
    }
    let gram: Array2<f64> = z.t().dot(&z) / nf;
    let linear: Array1<f64> = z.t().dot(&yc) / nf;
    let sol = solve_quadratic(&gram, &linear, &vec![l1_weight; q], &vec![l2_weight; q], settings)?;

    let coef = &sol.coef / &sds;
    let intercept = y_mean - coef.dot(&means);
    let fitted = phi.dot(&coef) + intercept;
    let training_r2 = r_squared(targets, fitted.view());
    Ok(PenalizedLinearFit {
        terms,
        intercept,
        coef,
        std_coef: sol.coef,
        means,
        sds,
        sweeps: sol.sweeps,
        kkt_violation: sol.kkt_violation,
        training_r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_line() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64 * 0.3 - 2.0);
        let y = x.column(0).mapv(|v| 2.0 * v);
        let fit = fit_penalized_linear(x.view(), y.view(), &Dictionary::linear(), 0.0, 0.0, 0).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-8);
        assert!(fit.intercept.abs() < 1e-8);
        assert!((fit.training_r2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heavy_l1_predicts_mean() {
        let x = array![[1.0, 0.0], [2.0, 1.0], [3.0, 0.0], [4.0, 1.0]];
        let y = array![1.0, 3.0, 2.0, 6.0];
        let fit = fit_penalized_linear(x.view(), y.view(), &Dictionary::default(), 1e6, 0.0, 0).unwrap();
        assert!(fit.coef.iter().all(|&c| c == 0.0));
        let pred = fit.predict(x.view());
        assert!(pred.iter().all(|&p| (p - 3.0).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = array![[1.0], [f64::NAN]];
        let y = array![1.0, 2.0];
        assert!(matches!(
            fit_penalized_linear(x.view(), y.view(), &Dictionary::linear(), 0.0, 0.0, 0),
            Err(Error::NonFinite(_))
        ));
        let x = array![[1.0]];
        let y = array![1.0];
        assert!(fit_penalized_linear(x.view(), y.view(), &Dictionary::linear(), 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn row_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]] - 0.5 * x[[i, 1]] * x[[i, 2]] + rng.random::<f64>());
        let perm: Vec<usize> = (0..n).rev().collect();
        let xp = x.select(Axis(0), &perm);
        let yp = y.select(Axis(0), &perm);
        let a = fit_penalized_linear(x.view(), y.view(), &Dictionary::default(), 0.01, 0.1, 0).unwrap();
        let b = fit_penalized_linear(xp.view(), yp.view(), &Dictionary::default(), 0.01, 0.1, 0).unwrap();
        let pa = a.predict(x.view());
        let pb = b.predict(x.view());
        for i in 0..n {
            assert!((pa[i] - pb[i]).abs() < 1e-6);
        }
    }
}
