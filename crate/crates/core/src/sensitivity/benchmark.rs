//! Benchmarking against observed covariates: how much would the analysis
//! change if covariate `j` had been omitted?

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{fold_plan_for, Dataset, FoldPlan};
use crate::dml::{out_of_fold_nuisances, select_outcome_learner, EngineConfig, OutOfFold};
use crate::error::{Error, Result};
use crate::functionals::{Functional, FunctionalSpec};
use crate::learners::{cross_fit, RegressionLearner};
use crate::riesz::covariate_features;
use crate::stats::correlation;

use super::eta::eta_squared;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkValues {
    /// `η²_{Y∼DX} − η²_{Y∼DX₋ⱼ}`.
    pub delta_eta2_y: f64,
    /// `η²_{D∼X} − η²_{D∼X₋ⱼ}`.
    pub delta_eta2_d: f64,
    /// `Cor(ĝ − ĝ₋ⱼ, α̂ − α̂₋ⱼ)`; `NaN` when either difference is constant.
    pub rho: f64,
    /// `θ̂_s − θ̂₋ⱼ`.
    pub delta_theta: f64,
    pub theta_reduced: f64,
    pub eta2_y_full: f64,
    pub eta2_d_full: f64,
}

/// Confounding strength as large as `k` times what covariate `j` explains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImpliedBound {
    pub k: f64,
    pub eta_y2: f64,
    pub eta_d2: f64,
    pub rho_abs: f64,
}

impl BenchmarkValues {
    /// Partial η² values scaled by `k`, each relative to the variation
    /// left unexplained by the full model.
    pub fn implied_bound(&self, k: f64) -> ImpliedBound {
        let eta_y2 = (k * self.delta_eta2_y.max(0.0) / (1.0 - self.eta2_y_full)).clamp(0.0, 1.0);
        let eta_d2 = (k * self.delta_eta2_d.max(0.0) / (1.0 - self.eta2_d_full)).clamp(0.0, 1.0 - 1e-12);
        let rho_abs = if self.rho.is_finite() { self.rho.abs().min(1.0) } else { 1.0 };
        ImpliedBound { k, eta_y2, eta_d2, rho_abs }
    }
}

/// One covariate's benchmark, or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub covariate: String,
    #[serde(flatten)]
    pub values: Option<BenchmarkValues>,
    pub error: Option<String>,
}

struct Fit {
    oof: OutOfFold,
    eta2_y: f64,
    eta2_d: f64,
}

fn fit_side(
    data: &Dataset,
    functional: &Functional,
    outcome: &dyn RegressionLearner,
    treatment: &dyn RegressionLearner,
    config: &EngineConfig,
    plan: &FoldPlan,
) -> Result<Fit> {
    let oof = out_of_fold_nuisances(data, functional, outcome, config, plan)?;
    let eta2_y = eta_squared(data.outcome(), oof.g.view())?;
    let x = covariate_features(data);
    let m = cross_fit(treatment, x.view(), data.treatment(), plan)?;
    let eta2_d = eta_squared(data.treatment(), m.out_of_fold.view())?;
    Ok(Fit { oof, eta2_y, eta2_d })
}

fn diff(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
}

/// Refits the analysis once per named covariate with that covariate
/// removed, reusing the full analysis' fold plan and outcome learner.
pub fn benchmark_covariates(
    data: &Dataset,
    spec: &FunctionalSpec,
    config: &EngineConfig,
    covariates: &[String],
) -> Result<Vec<BenchmarkRow>> {
    config.validate()?;
    let indices = covariates
        .iter()
        .map(|c| data.covariate_index(c).ok_or_else(|| Error::MissingColumn(c.clone())))
        .collect::<Result<Vec<_>>>()?;
    let functional = Functional::bind(spec, data)?;
    let plan = fold_plan_for(data, config.folds, config.seed)?;
    let (outcome, _) = select_outcome_learner(data, &functional, config, &plan)?;
    let treatment = config.riesz.treatment_learner.build().without_treatment();
    let full = fit_side(data, &functional, outcome.as_ref(), treatment.as_ref(), config, &plan)?;

    Ok(indices
        .par_iter()
        .zip(covariates.par_iter())
        .map(|(&j, name)| {
            let reduced = data.drop_covariate(j).and_then(|d| {
                let f = Functional::bind(spec, &d)?;
                fit_side(&d, &f, outcome.as_ref(), treatment.as_ref(), config, &plan)
            });
            match reduced {
                Ok(r) => BenchmarkRow {
                    covariate: name.clone(),
                    values: Some(BenchmarkValues {
                        delta_eta2_y: full.eta2_y - r.eta2_y,
                        delta_eta2_d: full.eta2_d - r.eta2_d,
                        rho: correlation(
                            &diff(full.oof.g.view(), r.oof.g.view()),
                            &diff(full.oof.alpha.view(), r.oof.alpha.view()),
                        ),
                        delta_theta: full.oof.theta.value - r.oof.theta.value,
                        theta_reduced: r.oof.theta.value,
                        eta2_y_full: full.eta2_y,
                        eta2_d_full: full.eta2_d,
                    }),
                    error: None,
                },
                Err(e) => BenchmarkRow { covariate: name.clone(), values: None, error: Some(e.to_string()) },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn data(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((n, 3), |_| StandardNormal.sample(&mut rng));
        let d: Vec<f64> = (0..n)
            .map(|i| 0.8 * x[[i, 0]] + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| d[i] + 1.5 * x[[i, 0]] + 0.2 * x[[i, 1]] + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Dataset::new(y, d, x, vec!["strong".into(), "weak".into(), "noise".into()]).unwrap()
    }

    #[test]
    fn strong_confounder_dominates() {
        let data = data(1500);
        let cfg = EngineConfig::default();
        let names: Vec<String> = ["strong", "weak", "noise"].iter().map(|s| s.to_string()).collect();
        let rows = benchmark_covariates(&data, &FunctionalSpec::PlmCoefficient, &cfg, &names).unwrap();
        let v: Vec<&BenchmarkValues> = rows.iter().map(|r| r.values.as_ref().unwrap()).collect();
        assert!(v[0].delta_eta2_d > 0.2 && v[0].delta_theta.abs() > 0.5);
        assert!(v[0].delta_eta2_d > v[1].delta_eta2_d && v[0].delta_eta2_y > v[2].delta_eta2_y);
        assert!(v[2].delta_theta.abs() < 0.05);
        let b = v[0].implied_bound(0.5);
        assert!((b.eta_d2 - 0.5 * v[0].delta_eta2_d / (1.0 - v[0].eta2_d_full)).abs() < 1e-12);
    }

    #[test]
    fn unknown_covariate_errors() {
        let data = data(100);
        let err = benchmark_covariates(&data, &FunctionalSpec::PlmCoefficient, &EngineConfig::default(), &["zzz".into()]);
        assert_eq!(err.unwrap_err().kind(), "missing_column");
    }

    #[test]
    fn implied_bound_clamps_negative_gains() {
        let v = BenchmarkValues {
            delta_eta2_y: -0.01,
            delta_eta2_d: 0.1,
            rho: f64::NAN,
            delta_theta: 0.0,
            theta_reduced: 0.0,
            eta2_y_full: 0.5,
            eta2_d_full: 0.2,
        };
        let b = v.implied_bound(1.0);
        assert_eq!(b.eta_y2, 0.0);
        assert!((b.eta_d2 - 0.125).abs() < 1e-12);
        assert_eq!(b.rho_abs, 1.0);
    }
}
