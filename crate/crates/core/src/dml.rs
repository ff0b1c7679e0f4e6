//! Cross-fitted debiased estimation of `θ_s`, `σ²_s` and `ν²_s`.
//!
//! The three scores
//!
//! ```text
//! ψ_θ  = m(W, g) + (Y − g(W))·α(W) − θ
//! ψ_σ² = (Y − g(W))² − σ²
//! ψ_ν² = 2·m(W, α) − α(W)² − ν²
//! ```
//!
//! are linear in their parameter with slope −1, so each root is the sample
//! mean of the remaining terms and the influence values are the centered
//! per-row terms.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fold_plan_for, Dataset, FoldPlan, DEFAULT_FOLDS};
use crate::error::{Error, Result};
use crate::functionals::{m_out_of_fold, out_of_fold, EvaluableFunction, Fitted, Functional, FunctionalSpec, LinearCombination};
use crate::learners::{cross_fit, select_learner_cv, LearnerSpec, PenalizedLinear, RegressionLearner};
use crate::riesz::{covariate_features, fit_riesz, RieszConfig, RieszDiagnostics, RieszFit, RieszMethod};
use crate::seed::derive_seed;
use crate::stats::median;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Theta,
    Sigma2,
    Nu2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmlEstimate {
    pub score: Score,
    pub value: f64,
    /// Centered per-row scores at the solution.
    pub influence: Array1<f64>,
    pub std_error: f64,
    pub folds: usize,
}

impl DmlEstimate {
    /// Solves the linear score whose non-parameter part is `terms`.
    pub fn from_terms(score: Score, terms: Array1<f64>, folds: usize) -> Result<DmlEstimate> {
        let n = terms.len();
        if n == 0 {
            return Err(Error::EmptyData);
        }
        if !terms.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{score:?} score terms")));
        }
        let value = terms.sum() / n as f64;
        let influence = terms.mapv(|t| t - value);
        let std_error = influence.mapv(|v| v * v).sum().sqrt() / n as f64;
        Ok(DmlEstimate { score, value, influence, std_error, folds })
    }

    pub fn n(&self) -> usize {
        self.influence.len()
    }

    pub fn t_value(&self) -> f64 {
        self.value / self.std_error
    }
}

/// Per-fold regression and representer functions under one fold plan.
#[derive(Clone)]
pub struct NuisanceFit {
    pub g: Vec<Arc<dyn EvaluableFunction>>,
    pub riesz: RieszFit,
    pub plan: FoldPlan,
}

/// Out-of-fold nuisance evaluations needed by the scores.
#[derive(Debug, Clone)]
pub struct NuisanceValues {
    pub g: Array1<f64>,
    pub m_g: Array1<f64>,
    pub alpha: Array1<f64>,
    pub m_alpha: Array1<f64>,
}

impl NuisanceFit {
    /// Uses the same known functions in every fold.
    pub fn oracle(g: Arc<dyn EvaluableFunction>, alpha: Arc<dyn EvaluableFunction>, plan: FoldPlan) -> NuisanceFit {
        let k = plan.num_folds;
        NuisanceFit {
            g: vec![g; k],
            riesz: RieszFit::from_functions(RieszMethod::Analytic, vec![alpha; k]),
            plan,
        }
    }

    /// Cross-fits `g` with `outcome_learner` on `(D, X)` and the representer
    /// per `riesz`.
    pub fn fit(
        data: &Dataset,
        functional: &Functional,
        outcome_learner: &dyn RegressionLearner,
        riesz: &RieszConfig,
        plan: FoldPlan,
    ) -> Result<NuisanceFit> {
        let cf = cross_fit(outcome_learner, data.short_rows(), data.outcome(), &plan)?;
        let g = cf.fits.into_iter().map(|f| Arc::new(Fitted(f)) as Arc<dyn EvaluableFunction>).collect();
        let riesz = fit_riesz(data, &plan, functional, riesz, derive_seed(plan.seed, 1 << 32))?;
        Ok(NuisanceFit { g, riesz, plan })
    }

    pub fn values(&self, functional: &Functional, data: &Dataset) -> Result<NuisanceValues> {
        let rows = data.short_rows();
        Ok(NuisanceValues {
            g: out_of_fold(&self.g, rows, &self.plan)?,
            m_g: m_out_of_fold(functional, &self.g, rows, &self.plan)?,
            alpha: self.riesz.out_of_fold(rows, &self.plan)?,
            m_alpha: self.riesz.m_out_of_fold(functional, rows, &self.plan)?,
        })
    }

    fn perturbed(&self, target: Perturb, direction: &Arc<dyn EvaluableFunction>, eps: f64) -> NuisanceFit {
        let shift = |fs: &[Arc<dyn EvaluableFunction>]| -> Vec<Arc<dyn EvaluableFunction>> {
            fs.iter()
                .map(|f| {
                    Arc::new(LinearCombination(vec![(1.0, f.clone()), (eps, direction.clone())]))
                        as Arc<dyn EvaluableFunction>
                })
                .collect()
        };
        let mut out = self.clone();
        match target {
            Perturb::Regression => out.g = shift(&self.g),
            Perturb::Riesz => {
                out.riesz = RieszFit::from_functions(self.riesz.method, shift(self.riesz.folds()));
            }
        }
        out
    }
}

/// Per-row score terms excluding the `−β` part.
pub fn score_terms(score: Score, y: ArrayView1<f64>, v: &NuisanceValues) -> Array1<f64> {
    match score {
        Score::Theta => &v.m_g + &((&y - &v.g) * &v.alpha),
        Score::Sigma2 => (&y - &v.g).mapv(|r| r * r),
        Score::Nu2 => &v.m_alpha * 2.0 - v.alpha.mapv(|a| a * a),
    }
}

pub fn solve_from_values(score: Score, y: ArrayView1<f64>, v: &NuisanceValues, folds: usize) -> Result<DmlEstimate> {
    let est = DmlEstimate::from_terms(score, score_terms(score, y, v), folds)?;
    check_positive(&est)?;
    Ok(est)
}

fn check_positive(est: &DmlEstimate) -> Result<()> {
    match est.score {
        Score::Nu2 if !(est.value > 0.0) => Err(Error::NonPositive {
            what: "nu2",
            value: est.value,
            hint: "the Riesz representer is badly estimated; try more regularization, a smaller dictionary \
                   or a different representer method"
                .into(),
        }),
        Score::Sigma2 if !(est.value > 0.0) => Err(Error::NonPositive {
            what: "sigma2",
            value: est.value,
            hint: "the outcome regression interpolates the data".into(),
        }),
        _ => Ok(()),
    }
}

pub fn dml_solve(score: Score, functional: &Functional, data: &Dataset, nuis: &NuisanceFit) -> Result<DmlEstimate> {
    let v = nuis.values(functional, data)?;
    solve_from_values(score, data.outcome(), &v, nuis.plan.num_folds)
}

/// Which nuisance [`orthogonality_check`] perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturb {
    Regression,
    Riesz,
}

/// Central finite difference of the mean score along `direction`:
/// `(Ē ψ(η + εh) − Ē ψ(η − εh)) / 2ε`.
pub fn orthogonality_check(
    score: Score,
    functional: &Functional,
    data: &Dataset,
    nuis: &NuisanceFit,
    target: Perturb,
    direction: Arc<dyn EvaluableFunction>,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let mean_score = |fit: &NuisanceFit| -> Result<f64> {
        let v = fit.values(functional, data)?;
        let t = score_terms(score, data.outcome(), &v);
        Ok(t.sum() / t.len() as f64)
    };
    let up = mean_score(&nuis.perturbed(target, &direction, eps))?;
    let down = mean_score(&nuis.perturbed(target, &direction, -eps))?;
    Ok((up - down) / (2.0 * eps))
}

/// `(1/n)·Σ ψ°ᵢψ°ᵢ'` over the given estimates.
pub fn score_covariance(estimates: &[&DmlEstimate]) -> Result<Array2<f64>> {
    let k = estimates.len();
    if k == 0 {
        return Err(Error::InvalidInput("no estimates".into()));
    }
    let n = estimates[0].n();
    if estimates.iter().any(|e| e.n() != n) {
        return Err(Error::InvalidInput("estimates have different lengths".into()));
    }
    let mut out = Array2::zeros((k, k));
    for a in 0..k {
        for b in a..k {
            let c = estimates[a].influence.dot(&estimates[b].influence) / n as f64;
            out[[a, b]] = c;
            out[[b, a]] = c;
        }
    }
    Ok(out)
}

/// `θ̂_s`, `σ̂²_s` and `ν̂²_s` from one analysis.
#[derive(Debug, Clone)]
pub struct Components {
    pub theta: DmlEstimate,
    pub sigma2: DmlEstimate,
    pub nu2: DmlEstimate,
    pub diagnostics: PipelineDiagnostics,
}

impl Components {
    /// `S = (σ̂²·ν̂²)^{1/2}`.
    pub fn scale(&self) -> f64 {
        (self.sigma2.value * self.nu2.value).sqrt()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineDiagnostics {
    pub functional: String,
    pub folds: usize,
    pub fold_seeds: Vec<u64>,
    pub outcome_learner: String,
    /// Cross-validated MSE per candidate outcome learner, when several were given.
    pub outcome_cv_mse: Vec<(String, Option<f64>)>,
    /// Out-of-fold RMSE of the outcome regression, first repetition.
    pub outcome_rmse: f64,
    pub riesz: RieszDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub folds: usize,
    pub seed: u64,
    /// Independent fold plans; estimates are aggregated by the median.
    pub repeats: usize,
    /// One learner, or several to choose between by cross-validated MSE.
    pub outcome_learners: Vec<LearnerSpec>,
    pub riesz: RieszConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            folds: DEFAULT_FOLDS,
            seed: 0,
            repeats: 1,
            outcome_learners: vec![LearnerSpec::PenalizedLinear(PenalizedLinear::default())],
            riesz: RieszConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidFolds(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidInput("repeats must be at least 1".into()));
        }
        if self.outcome_learners.is_empty() {
            return Err(Error::InvalidInput("no outcome learner configured".into()));
        }
        Ok(())
    }

    fn plan_seed(&self, r: usize) -> u64 {
        if r == 0 {
            self.seed
        } else {
            derive_seed(self.seed, r as u64)
        }
    }
}

/// Partialling-out estimator of the coefficient on `D` in
/// `Y = θD + f(X) + ε`.
///
/// With `Ỹ = Y − l̂(X)` and `D̃ = D − m̂(X)` (both out-of-fold),
/// `θ̂ = ΣỸD̃/ΣD̃²`, `σ̂² = mean((Ỹ − θ̂D̃)²)` and, since `α̂ = D̃/mean(D̃²)`
/// has `m(W, α̂) = 1/mean(D̃²)`, `ν̂² = 1/mean(D̃²)`.
pub fn plm_partialling_out(
    data: &Dataset,
    outcome_learner: &dyn RegressionLearner,
    treatment_learner: &dyn RegressionLearner,
    plan: &FoldPlan,
) -> Result<(DmlEstimate, DmlEstimate, DmlEstimate, RieszDiagnostics)> {
    let p = plm_fit(data, outcome_learner, treatment_learner, plan)?;
    Ok((p.theta, p.sigma2, p.nu2, p.diag))
}

struct PlmFit {
    l: Array1<f64>,
    dt: Array1<f64>,
    v: f64,
    theta: DmlEstimate,
    sigma2: DmlEstimate,
    nu2: DmlEstimate,
    diag: RieszDiagnostics,
}

fn plm_fit(
    data: &Dataset,
    outcome_learner: &dyn RegressionLearner,
    treatment_learner: &dyn RegressionLearner,
    plan: &FoldPlan,
) -> Result<PlmFit> {
    let x = covariate_features(data);
    let l = cross_fit(outcome_learner.without_treatment().as_ref(), x.view(), data.outcome(), plan)?;
    let tl = treatment_learner.without_treatment();
    let m = cross_fit(tl.as_ref(), x.view(), data.treatment(), plan)?;
    let yt = &data.outcome() - &l.out_of_fold;
    let dt = &data.treatment() - &m.out_of_fold;
    let n = data.n() as f64;
    let v = dt.mapv(|d| d * d).sum() / n;
    let var_d = crate::stats::variance(&data.treatment().to_vec());
    if !(v > 1e-10 * var_d.max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate(format!(
            "treatment is (almost) a function of the covariates: residual second moment {v:e}"
        )));
    }
    let theta = yt.dot(&dt) / (n * v);
    let resid = &yt - &(&dt * theta);
    let folds = plan.num_folds;
    let theta_terms = (&resid * &dt) / v + theta;
    let sigma_terms = resid.mapv(|r| r * r);
    let nu_terms = dt.mapv(|d| 2.0 / v - d * d / (v * v));
    let th = DmlEstimate::from_terms(Score::Theta, theta_terms, folds)?;
    let s2 = DmlEstimate::from_terms(Score::Sigma2, sigma_terms, folds)?;
    let n2 = DmlEstimate::from_terms(Score::Nu2, nu_terms, folds)?;
    check_positive(&s2)?;
    check_positive(&n2)?;
    let diag = RieszDiagnostics {
        method: "plm".into(),
        residual_second_moment: Some(v),
        learner: Some(tl.name()),
        ..Default::default()
    };
    Ok(PlmFit { l: l.out_of_fold, dt, v, theta: th, sigma2: s2, nu2: n2, diag })
}

/// Out-of-fold `ĝ_s(Wᵢ)`, `α̂_s(Wᵢ)` and `θ̂_s` under one plan.
#[derive(Debug, Clone)]
pub struct OutOfFold {
    pub g: Array1<f64>,
    pub alpha: Array1<f64>,
    pub theta: DmlEstimate,
}

pub fn out_of_fold_nuisances(
    data: &Dataset,
    functional: &Functional,
    outcome_learner: &dyn RegressionLearner,
    config: &EngineConfig,
    plan: &FoldPlan,
) -> Result<OutOfFold> {
    if functional.is_plm() {
        let tl = config.riesz.treatment_learner.build();
        let p = plm_fit(data, outcome_learner, tl.as_ref(), plan)?;
        let g = &p.l + &(&p.dt * p.theta.value);
        return Ok(OutOfFold { g, alpha: p.dt / p.v, theta: p.theta });
    }
    let nuis = NuisanceFit::fit(data, functional, outcome_learner, &config.riesz, plan.clone())?;
    let v = nuis.values(functional, data)?;
    let theta = solve_from_values(Score::Theta, data.outcome(), &v, plan.num_folds)?;
    Ok(OutOfFold { g: v.g, alpha: v.alpha, theta })
}

struct RunOutput {
    theta: DmlEstimate,
    sigma2: DmlEstimate,
    nu2: DmlEstimate,
    riesz: RieszDiagnostics,
}

fn run_once(
    data: &Dataset,
    functional: &Functional,
    outcome: &dyn RegressionLearner,
    config: &EngineConfig,
    plan: FoldPlan,
) -> Result<RunOutput> {
    if functional.is_plm() {
        let tl = config.riesz.treatment_learner.build();
        let (theta, sigma2, nu2, riesz) = plm_partialling_out(data, outcome, tl.as_ref(), &plan)?;
        return Ok(RunOutput { theta, sigma2, nu2, riesz });
    }
    let folds = plan.num_folds;
    let nuis = NuisanceFit::fit(data, functional, outcome, &config.riesz, plan)?;
    let v = nuis.values(functional, data)?;
    let y = data.outcome();
    Ok(RunOutput {
        theta: solve_from_values(Score::Theta, y, &v, folds)?,
        sigma2: solve_from_values(Score::Sigma2, y, &v, folds)?,
        nu2: solve_from_values(Score::Nu2, y, &v, folds)?,
        riesz: nuis.riesz.diagnostics.clone(),
    })
}

/// Median over repetitions. The standard error is
/// `sqrt(median(SE_r² + (θ_r − θ̂)²))`; the influence vector is the average
/// of the per-run influence vectors rescaled to reproduce that error.
pub fn aggregate_repeats(runs: &[DmlEstimate]) -> Result<DmlEstimate> {
    let first = runs.first().ok_or_else(|| Error::InvalidInput("no runs to aggregate".into()))?;
    if runs.len() == 1 {
        return Ok(first.clone());
    }
    let n = first.n();
    let values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    let value = median(&values);
    let vars: Vec<f64> = runs.iter().map(|r| r.std_error.powi(2) + (r.value - value).powi(2)).collect();
    let std_error = median(&vars).sqrt();
    let mut influence = Array1::zeros(n);
    for r in runs {
        influence += &r.influence;
    }
    influence /= runs.len() as f64;
    let norm = influence.mapv(|v: f64| v * v).sum().sqrt();
    if norm > 0.0 {
        influence *= std_error * n as f64 / norm;
    }
    Ok(DmlEstimate { score: first.score, value, influence, std_error, folds: first.folds })
}

/// The configured outcome learner, or the candidate with the lowest
/// cross-validated MSE under `plan` when several are configured.
pub fn select_outcome_learner(
    data: &Dataset,
    functional: &Functional,
    config: &EngineConfig,
    plan: &FoldPlan,
) -> Result<(Arc<dyn RegressionLearner>, Vec<(String, Option<f64>)>)> {
    let candidates: Vec<Arc<dyn RegressionLearner>> = config.outcome_learners.iter().map(|l| l.build()).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no outcome learner configured".into()));
    }
    if candidates.len() == 1 {
        return Ok((candidates[0].clone(), Vec::new()));
    }
    let (features, pool): (_, Vec<Arc<dyn RegressionLearner>>) = if functional.is_plm() {
        (covariate_features(data), candidates.iter().map(|c| c.without_treatment()).collect())
    } else {
        (data.short_rows().to_owned(), candidates.clone())
    };
    let sel = select_learner_cv(&pool, features.view(), data.outcome(), plan)?;
    let cv = candidates
        .iter()
        .zip(&sel.cv_mse)
        .map(|(c, m)| (c.name(), m.as_ref().ok().copied()))
        .collect();
    Ok((candidates[sel.index].clone(), cv))
}

/// Full pipeline: learner selection, nuisance fits and the three estimates,
/// repeated over `config.repeats` fold plans.
pub fn estimate(data: &Dataset, spec: &FunctionalSpec, config: &EngineConfig) -> Result<Components> {
    config.validate()?;
    let functional = Functional::bind(spec, data)?;
    let first_plan = fold_plan_for(data, config.folds, config.plan_seed(0))?;

    let mut diagnostics = PipelineDiagnostics {
        functional: spec.name().into(),
        folds: config.folds,
        fold_seeds: (0..config.repeats).map(|r| config.plan_seed(r)).collect(),
        ..Default::default()
    };
    let (outcome, cv) = select_outcome_learner(data, &functional, config, &first_plan)?;
    diagnostics.outcome_cv_mse = cv;
    diagnostics.outcome_learner = outcome.name();

    let plans: Vec<FoldPlan> = std::iter::once(Ok(first_plan))
        .chain((1..config.repeats).map(|r| fold_plan_for(data, config.folds, config.plan_seed(r))))
        .collect::<Result<_>>()?;
    let runs: Vec<RunOutput> = plans
        .into_par_iter()
        .map(|plan| run_once(data, &functional, outcome.as_ref(), config, plan))
        .collect::<Result<_>>()?;

    diagnostics.outcome_rmse = runs[0].sigma2.value.sqrt();
    diagnostics.riesz = runs[0].riesz.clone();
    let pick = |f: fn(&RunOutput) -> &DmlEstimate| -> Result<DmlEstimate> {
        aggregate_repeats(&runs.iter().map(|r| f(r).clone()).collect::<Vec<_>>())
    };
    Ok(Components {
        theta: pick(|r| &r.theta)?,
        sigma2: pick(|r| &r.sigma2)?,
        nu2: pick(|r| &r.nu2)?,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_fold_plan;
    use crate::functionals::function;
    use crate::learners::{RegressionFit, TreeEnsemble};
    use ndarray::{array, ArrayView2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn linear_gaussian(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 2), |_| normal(&mut rng));
        let d: Vec<f64> = (0..n).map(|i| 0.5 * x[[i, 0]] + normal(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 * d[i] + x[[i, 0]] - 0.5 * x[[i, 1]] + normal(&mut rng)).collect();
        Dataset::new(y, d, x, vec!["x1".into(), "x2".into()]).unwrap()
    }

    #[test]
    fn theta_with_exact_regression_equals_plugin() {
        let n = 50;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / 7.0);
        let d: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| 3.0 * d[i] + x[[i, 0]].sin()).collect();
        let data = Dataset::new(y, d, x, vec!["x".into()]).unwrap();
        let g = function(|r: ArrayView2<f64>| &r.column(0) * 3.0 + r.column(1).mapv(f64::sin));
        let alpha = function(|r: ArrayView2<f64>| r.column(1).mapv(|x| 10.0 * x.cos()));
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let plan = make_fold_plan(n, 5, 1, None, None).unwrap();
        let nuis = NuisanceFit::oracle(g.clone(), alpha, plan);
        let est = dml_solve(Score::Theta, &fun, &data, &nuis).unwrap();
        assert!((est.value - fun.plugin_theta(g.as_ref(), &data).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sigma2_with_mean_regression_is_variance() {
        let data = linear_gaussian(100, 1);
        let ybar = data.outcome().mean().unwrap();
        let g = function(move |r: ArrayView2<f64>| Array1::from_elem(r.nrows(), ybar));
        let plan = make_fold_plan(100, 5, 1, None, None).unwrap();
        let fun = Functional::bind(&FunctionalSpec::acd(), &data).unwrap();
        let nuis = NuisanceFit::oracle(g.clone(), g, plan);
        let est = dml_solve(Score::Sigma2, &fun, &data, &nuis).unwrap();
        let var = crate::stats::variance(&data.outcome().to_vec());
        assert!((est.value - var).abs() < 1e-10);
    }

    #[test]
    fn nu2_on_half_propensity_toy() {
        let n = 20;
        let d: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let data = Dataset::new(vec![0.0; n], d, Array2::zeros((n, 0)), vec![]).unwrap();
        let alpha = function(|r: ArrayView2<f64>| r.column(0).mapv(|d| if d == 1.0 { 2.0 } else { -2.0 }));
        let plan = make_fold_plan(n, 2, 1, None, None).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let nuis = NuisanceFit::oracle(alpha.clone(), alpha, plan);
        let est = dml_solve(Score::Nu2, &fun, &data, &nuis).unwrap();
        assert_eq!(est.value, 4.0);
        assert!(est.influence.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_nu2_is_an_error() {
        let n = 20;
        let d: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let data = Dataset::new(vec![0.0; n], d, Array2::zeros((n, 0)), vec![]).unwrap();
        // α pointing the wrong way: 2m(α) = −8, α² = 4.
        let alpha = function(|r: ArrayView2<f64>| r.column(0).mapv(|d| if d == 1.0 { -2.0 } else { 2.0 }));
        let plan = make_fold_plan(n, 2, 1, None, None).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let nuis = NuisanceFit::oracle(alpha.clone(), alpha, plan);
        assert!(matches!(dml_solve(Score::Nu2, &fun, &data, &nuis), Err(Error::NonPositive { what: "nu2", .. })));
    }

    /// Returns the training target of an exactly matching training row, else
    /// a sentinel, so any in-fold evaluation would be visible.
    #[derive(Debug)]
    struct Memorizer;
    #[derive(Debug)]
    struct Memory(Vec<(Vec<f64>, f64)>);
    impl RegressionFit for Memory {
        fn predict(&self, f: ArrayView2<f64>) -> Array1<f64> {
            f.rows()
                .into_iter()
                .map(|r| self.0.iter().find(|(k, _)| k.as_slice() == r.to_vec().as_slice()).map_or(-999.0, |m| m.1))
                .collect()
        }
        fn training_r2(&self) -> f64 {
            1.0
        }
    }
    impl RegressionLearner for Memorizer {
        fn fit(&self, f: ArrayView2<f64>, t: ArrayView1<f64>, _: u64) -> Result<Arc<dyn RegressionFit>> {
            Ok(Arc::new(Memory(f.rows().into_iter().map(|r| r.to_vec()).zip(t.iter().copied()).collect())))
        }
        fn name(&self) -> String {
            "memorizer".into()
        }
        fn without_treatment(&self) -> Arc<dyn RegressionLearner> {
            Arc::new(Memorizer)
        }
    }

    #[test]
    fn engine_never_uses_in_fold_fits() {
        let data = linear_gaussian(60, 2);
        let fun = Functional::bind(&FunctionalSpec::acd(), &data).unwrap();
        let plan = make_fold_plan(60, 3, 1, None, None).unwrap();
        let riesz = RieszConfig { method: Some(RieszMethod::Variational), ..Default::default() };
        let nuis = NuisanceFit::fit(&data, &fun, &Memorizer, &riesz, plan.clone()).unwrap();
        let v = nuis.values(&fun, &data).unwrap();
        assert!(v.g.iter().all(|&g| g == -999.0));
        // The in-fold fit would have reproduced Y exactly.
        let own = nuis.g[plan.assignment[0]].evaluate(data.short_rows().slice(ndarray::s![0..1, ..]));
        assert_eq!(own[0], -999.0);
        let other = (plan.assignment[0] + 1) % 3;
        let seen = nuis.g[other].evaluate(data.short_rows().slice(ndarray::s![0..1, ..]));
        assert_eq!(seen[0], data.outcome()[0]);
    }

    #[test]
    fn score_covariance_examples() {
        let a = DmlEstimate::from_terms(Score::Theta, array![1.0, 2.0, 4.0, 1.0], 2).unwrap();
        let c = score_covariance(&[&a]).unwrap();
        assert!((c[[0, 0]] - 4.0 * a.std_error.powi(2)).abs() < 1e-12);
        let c = score_covariance(&[&a, &a]).unwrap();
        let corr = c[[0, 1]] / (c[[0, 0]] * c[[1, 1]]).sqrt();
        assert!((corr - 1.0).abs() < 1e-12);
        let b = DmlEstimate::from_terms(Score::Theta, array![1.0, 2.0], 2).unwrap();
        assert!(score_covariance(&[&a, &b]).is_err());
    }

    #[test]
    fn independent_scores_are_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let a = DmlEstimate::from_terms(Score::Theta, Array1::from_shape_fn(n, |_| normal(&mut rng)), 5).unwrap();
        let b = DmlEstimate::from_terms(Score::Sigma2, Array1::from_shape_fn(n, |_| normal(&mut rng)), 5).unwrap();
        let c = score_covariance(&[&a, &b]).unwrap();
        assert!(c[[0, 1]].abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn plm_pipeline_matches_generic_scores() {
        let data = linear_gaussian(2000, 4);
        let plan = make_fold_plan(2000, 5, 7, None, None).unwrap();
        let lin = PenalizedLinear::default();
        let (th, s2, n2, _) = plm_partialling_out(&data, &lin, &lin, &plan).unwrap();
        assert!((th.value - 1.0).abs() < 4.0 * th.std_error, "theta {} se {}", th.value, th.std_error);
        assert!((s2.value - 1.0).abs() < 0.1);
        // ν² = 1/E(D − E[D|X])² = 1 here.
        assert!((n2.value - 1.0).abs() < 0.1);
        for e in [&th, &s2, &n2] {
            assert!(e.influence.sum().abs() < 1e-10 * e.n() as f64 * (1.0 + e.value.abs()));
        }
    }

    #[test]
    fn full_pipeline_on_acd_and_repeats() {
        let data = linear_gaussian(1000, 5);
        let cfg = EngineConfig {
            riesz: RieszConfig { l1: crate::riesz::Penalty::Fixed(1e-3), ..Default::default() },
            ..Default::default()
        };
        let c = estimate(&data, &FunctionalSpec::acd(), &cfg).unwrap();
        assert!((c.theta.value - 1.0).abs() < 4.0 * c.theta.std_error + 0.02);
        assert!((c.nu2.value - 1.0).abs() < 0.2, "nu2 {}", c.nu2.value);
        let cfg3 = EngineConfig { repeats: 3, ..cfg.clone() };
        let c3 = estimate(&data, &FunctionalSpec::acd(), &cfg3).unwrap();
        assert_eq!(c3.diagnostics.fold_seeds.len(), 3);
        assert_eq!(c3.diagnostics.fold_seeds[0], cfg.seed);
        let se = (c3.theta.influence.mapv(|v| v * v).sum()).sqrt() / 1000.0;
        assert!((se - c3.theta.std_error).abs() < 1e-12);
        assert!(c3.theta.influence.sum().abs() < 1e-8);
        let again = estimate(&data, &FunctionalSpec::acd(), &cfg3).unwrap();
        assert_eq!(again.theta.value, c3.theta.value);
    }

    #[test]
    fn learner_selection_is_reported() {
        let data = linear_gaussian(300, 6);
        let cfg = EngineConfig {
            outcome_learners: vec![
                LearnerSpec::TreeEnsemble(TreeEnsemble { num_trees: 20, max_depth: Some(2), ..Default::default() }),
                LearnerSpec::PenalizedLinear(PenalizedLinear::default()),
            ],
            riesz: RieszConfig { l1: crate::riesz::Penalty::Fixed(1e-3), ..Default::default() },
            ..Default::default()
        };
        let c = estimate(&data, &FunctionalSpec::PlmCoefficient, &cfg).unwrap();
        assert_eq!(c.diagnostics.outcome_cv_mse.len(), 2);
        assert!(c.diagnostics.outcome_learner.starts_with("penalized_linear"));
    }

    #[test]
    fn orthogonality_at_truth_and_away_from_it() {
        // Randomized binary treatment with p = 1/2 and g(d, x) = d + x:
        // exact α_s = ±2, so the θ score is flat in g at the truth but not
        // at a wrong α.
        let n = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let d: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| d[i] + x[i] + normal(&mut rng)).collect();
        let data = Dataset::new(y, d, Array2::from_shape_vec((n, 1), x).unwrap(), vec!["x".into()]).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let plan = make_fold_plan(n, 2, 1, None, None).unwrap();
        let g = function(|r: ArrayView2<f64>| &r.column(0) + &r.column(1));
        let alpha = function(|r: ArrayView2<f64>| r.column(0).mapv(|d| 4.0 * d - 2.0));
        let h = function(|r: ArrayView2<f64>| r.column(0).mapv(|d| 1.0 + d));
        let nuis = NuisanceFit::oracle(g.clone(), alpha, plan.clone());
        let dtheta = orthogonality_check(Score::Theta, &fun, &data, &nuis, Perturb::Regression, h.clone(), 1e-3).unwrap();
        // h depends on d only and treatment is exactly balanced: derivative is 0.
        assert!(dtheta.abs() < 1e-9, "{dtheta}");
        let wrong = function(|r: ArrayView2<f64>| r.column(0).mapv(|d| 3.0 * d - 1.0));
        let bad = NuisanceFit::oracle(g, wrong, plan);
        let dbad = orthogonality_check(Score::Theta, &fun, &data, &bad, Perturb::Regression, h, 1e-3).unwrap();
        // E[m(h) − hα] = 1 − E[(1+d)(3d−1)] = 1 − (0.5·(−1) + 0.5·4) = −0.5
        assert!((dbad + 0.5).abs() < 1e-9, "{dbad}");
    }

    #[test]
    fn mc_coverage_linear_gaussian() {
        // A small version of the coverage property; the acceptance suite runs
        // the full-size experiment.
        let reps = 60;
        let hits: usize = (0..reps)
            .into_par_iter()
            .map(|r| {
                let data = linear_gaussian(1000, 100 + r as u64);
                let plan = make_fold_plan(1000, 5, r as u64, None, None).unwrap();
                let lin = PenalizedLinear::default();
                let (th, _, _, _) = plm_partialling_out(&data, &lin, &lin, &plan).unwrap();
                usize::from((th.value - 1.0).abs() <= 1.96 * th.std_error)
            })
            .sum();
        assert!(hits as f64 / reps as f64 >= 0.85, "{hits}/{reps}");
    }

    proptest! {
        #[test]
        fn estimates_are_centered(terms in proptest::collection::vec(-1e3f64..1e3, 2..200)) {
            let n = terms.len() as f64;
            let e = DmlEstimate::from_terms(Score::Theta, Array1::from(terms), 5).unwrap();
            prop_assert!(e.influence.sum().abs() <= 1e-10 * n * 1e3);
            let se = e.influence.mapv(|v| v * v).sum().sqrt() / n;
            prop_assert!((se - e.std_error).abs() <= 1e-12 * (1.0 + se));
        }
    }
}
