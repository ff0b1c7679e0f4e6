//! Estimators of the short Riesz representer `α_s`.
//!
//! Three routes, all cross-fitted so each row is evaluated by a fit that did
//! not see it:
//!
//! * analytic inverse-propensity weights for binary treatments,
//! * the partially linear restriction `α_s = (D − E[D|X]) / E(D − E[D|X])²`,
//! * the variational estimator `argmin E[α² − 2m(W, α)]` over a penalized
//!   linear dictionary.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::functionals::{m_out_of_fold, out_of_fold, EvaluableFunction, Functional, FunctionalSpec};
use crate::learners::dictionary::{prune_columns, transform_terms, Term};
use crate::learners::linear::GRAM_BUDGET_BYTES;
use crate::learners::solver::{solve_quadratic, CdSettings};
use crate::learners::{cross_fit, Dictionary, LearnerSpec, PenalizedLinear, RegressionFit, RegressionLearner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RieszMethod {
    Analytic,
    Plm,
    Variational,
}

impl RieszMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            RieszMethod::Analytic => "analytic",
            RieszMethod::Plm => "plm",
            RieszMethod::Variational => "variational",
        }
    }
}

/// Penalty level: fixed, or chosen from a grid by cross-validated
/// variational loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Penalty {
    Fixed(f64),
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RieszConfig {
    /// `None` picks analytic for binary ATE/APO, plm for the partially
    /// linear coefficient and variational otherwise.
    pub method: Option<RieszMethod>,
    /// Learner for `P(D=1|X)` or `E[D|X]`.
    pub treatment_learner: LearnerSpec,
    pub trim: f64,
    pub dictionary: Dictionary,
    pub l1: Penalty,
    pub l2: f64,
}

impl Default for RieszConfig {
    fn default() -> Self {
        RieszConfig {
            method: None,
            treatment_learner: LearnerSpec::PenalizedLinear(PenalizedLinear::default()),
            trim: 0.01,
            dictionary: Dictionary::default().with_intercept(true),
            l1: Penalty::Grid(vec![1e-4, 1e-3, 1e-2, 1e-1]),
            l2: 0.0,
        }
    }
}

impl RieszConfig {
    pub fn resolve_method(&self, functional: &Functional) -> RieszMethod {
        self.method.unwrap_or(if functional.binary_level().is_some() {
            RieszMethod::Analytic
        } else if functional.is_plm() {
            RieszMethod::Plm
        } else {
            RieszMethod::Variational
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RieszDiagnostics {
    pub method: String,
    /// Out-of-fold propensities raised to `trim`.
    pub trimmed_low: usize,
    /// Out-of-fold propensities lowered to `1 − trim`.
    pub trimmed_high: usize,
    /// `E(D − Ê[D|X])²` for the plm route.
    pub residual_second_moment: Option<f64>,
    pub dictionary_terms: Option<usize>,
    pub l1: Option<f64>,
    /// `(l1, cross-validated loss)` for each grid value tried.
    pub l1_path: Vec<(f64, f64)>,
    /// Transported or shifted evaluation points outside the data's bounding box.
    pub outside_support: usize,
    pub learner: Option<String>,
}

/// Per-fold representer functions plus diagnostics.
#[derive(Clone)]
pub struct RieszFit {
    pub method: RieszMethod,
    folds: Vec<Arc<dyn EvaluableFunction>>,
    pub diagnostics: RieszDiagnostics,
}

impl std::fmt::Debug for RieszFit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RieszFit")
            .field("method", &self.method)
            .field("folds", &self.folds.len())
            .field("diagnostics", &self.diagnostics)
            .finish()
    }
}

impl RieszFit {
    /// Wraps externally supplied per-fold functions, e.g. a known representer.
    pub fn from_functions(method: RieszMethod, folds: Vec<Arc<dyn EvaluableFunction>>) -> Self {
        let diagnostics = RieszDiagnostics { method: method.as_str().into(), ..Default::default() };
        RieszFit { method, folds, diagnostics }
    }

    pub fn folds(&self) -> &[Arc<dyn EvaluableFunction>] {
        &self.folds
    }

    pub fn fold_function(&self, k: usize) -> &Arc<dyn EvaluableFunction> {
        &self.folds[k]
    }

    /// Average of the fold functions, for points that belong to no fold.
    pub fn evaluate(&self, rows: ArrayView2<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(rows.nrows());
        for f in &self.folds {
            out += &f.evaluate(rows);
        }
        out / self.folds.len() as f64
    }

    pub fn out_of_fold(&self, rows: ArrayView2<f64>, plan: &FoldPlan) -> Result<Array1<f64>> {
        out_of_fold(&self.folds, rows, plan)
    }

    pub fn m_out_of_fold(&self, functional: &Functional, rows: ArrayView2<f64>, plan: &FoldPlan) -> Result<Array1<f64>> {
        m_out_of_fold(functional, &self.folds, rows, plan)
    }
}

/// Covariates as learner input; a single zero column when there are none.
pub(crate) fn covariate_features(data: &Dataset) -> Array2<f64> {
    if data.p() == 0 {
        Array2::zeros((data.n(), 1))
    } else {
        data.covariates().to_owned()
    }
}

fn covariate_view(rows: ArrayView2<f64>) -> Array2<f64> {
    if rows.ncols() == 1 {
        Array2::zeros((rows.nrows(), 1))
    } else {
        rows.slice(s![.., 1..]).to_owned()
    }
}

/// Fit the representer with the method chosen by `config`.
pub fn fit_riesz(
    data: &Dataset,
    plan: &FoldPlan,
    functional: &Functional,
    config: &RieszConfig,
    seed: u64,
) -> Result<RieszFit> {
    match config.resolve_method(functional) {
        RieszMethod::Analytic => {
            let learner = config.treatment_learner.build();
            fit_riesz_analytic_binary(data, plan, functional, learner.as_ref(), config.trim)
        }
        RieszMethod::Plm => {
            let learner = config.treatment_learner.build();
            fit_riesz_plm(data, plan, learner.as_ref())
        }
        RieszMethod::Variational => {
            fit_riesz_variational(data, plan, functional, &config.dictionary, &config.l1, config.l2, seed)
        }
    }
}

struct AnalyticRiesz {
    propensity: Arc<dyn RegressionFit>,
    trim: f64,
    level: Option<f64>,
    functional: Functional,
}

impl EvaluableFunction for AnalyticRiesz {
    fn evaluate(&self, rows: ArrayView2<f64>) -> Array1<f64> {
        let pi = self.propensity.predict(covariate_view(rows).view());
        let l = self.functional.weight_at(rows);
        let (lo, hi) = (self.trim, 1.0 - self.trim);
        Array1::from_shape_fn(rows.nrows(), |i| {
            let p = pi[i].clamp(lo, hi);
            let d = rows[[i, 0]];
            let a = match self.level {
                None => d / p - (1.0 - d) / (1.0 - p),
                Some(lv) if lv == 1.0 => d / p,
                Some(_) => (1.0 - d) / (1.0 - p),
            };
            l[i] * a
        })
    }
}

/// `α̂_s(d, x) = ℓ(x)·(d/π̂(x) − (1−d)/(1−π̂(x)))` with `π̂` clipped to
/// `[trim, 1 − trim]`; the APO variants keep one of the two terms.
pub fn fit_riesz_analytic_binary(
    data: &Dataset,
    plan: &FoldPlan,
    functional: &Functional,
    propensity_learner: &dyn RegressionLearner,
    trim: f64,
) -> Result<RieszFit> {
    if !data.is_binary_treatment() {
        return Err(Error::NonBinaryTreatment("analytic representer needs a 0/1 treatment".into()));
    }
    if !(trim > 0.0 && trim < 0.5) {
        return Err(Error::InvalidInput(format!("trim {trim} outside (0, 0.5)")));
    }
    let Some(level) = functional.binary_level() else {
        return Err(Error::Unsupported(format!(
            "analytic representer is only available for binary_ate and binary_apo, not {}",
            functional.spec().name()
        )));
    };
    if functional.weight_uses_treatment() {
        return Err(Error::Unsupported(
            "analytic representer needs a weight that depends on covariates only".into(),
        ));
    }
    let d = data.treatment();
    for k in 0..plan.num_folds {
        let train = plan.train_indices(k);
        let treated = train.iter().filter(|&&i| d[i] == 1.0).count();
        if treated == 0 || treated == train.len() {
            return Err(Error::Degenerate(format!(
                "training rows for fold {k} are all {}",
                if treated == 0 { "control" } else { "treated" }
            )));
        }
    }
    let x = covariate_features(data);
    let learner = propensity_learner.without_treatment();
    let cf = cross_fit(learner.as_ref(), x.view(), d, plan)?;
    let trimmed_low = cf.out_of_fold.iter().filter(|&&p| p < trim).count();
    let trimmed_high = cf.out_of_fold.iter().filter(|&&p| p > 1.0 - trim).count();
    let folds = cf
        .fits
        .into_iter()
        .map(|propensity| {
            Arc::new(AnalyticRiesz { propensity, trim, level, functional: functional.clone() })
                as Arc<dyn EvaluableFunction>
        })
        .collect();
    Ok(RieszFit {
        method: RieszMethod::Analytic,
        folds,
        diagnostics: RieszDiagnostics {
            method: "analytic".into(),
            trimmed_low,
            trimmed_high,
            learner: Some(learner.name()),
            ..Default::default()
        },
    })
}

struct PlmRiesz {
    treatment_fit: Arc<dyn RegressionFit>,
    denominator: f64,
}

impl EvaluableFunction for PlmRiesz {
    fn evaluate(&self, rows: ArrayView2<f64>) -> Array1<f64> {
        let m = self.treatment_fit.predict(covariate_view(rows).view());
        (&rows.column(0) - &m) / self.denominator
    }
}

/// `α̂_s(d, x) = (d − m̂(x)) / mean((D − m̂(X))²)` with out-of-fold `m̂`.
pub fn fit_riesz_plm(data: &Dataset, plan: &FoldPlan, treatment_learner: &dyn RegressionLearner) -> Result<RieszFit> {
    let x = covariate_features(data);
    let d = data.treatment();
    let learner = treatment_learner.without_treatment();
    let cf = cross_fit(learner.as_ref(), x.view(), d, plan)?;
    let resid = &d - &cf.out_of_fold;
    let denominator = resid.mapv(|r| r * r).sum() / data.n() as f64;
    let var_d = crate::stats::variance(&d.to_vec());
    if !(denominator > 1e-10 * var_d.max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate(format!(
            "treatment is (almost) a function of the covariates: residual second moment {denominator:e}"
        )));
    }
    let folds = cf
        .fits
        .into_iter()
        .map(|treatment_fit| Arc::new(PlmRiesz { treatment_fit, denominator }) as Arc<dyn EvaluableFunction>)
        .collect();
    Ok(RieszFit {
        method: RieszMethod::Plm,
        folds,
        diagnostics: RieszDiagnostics {
            method: "plm".into(),
            residual_second_moment: Some(denominator),
            learner: Some(learner.name()),
            ..Default::default()
        },
    })
}

/// `ρ'φ(w) + intercept`.
#[derive(Debug, Clone)]
pub struct VariationalRiesz {
    pub terms: Vec<Term>,
    pub coef: Array1<f64>,
    pub intercept: f64,
}

impl EvaluableFunction for VariationalRiesz {
    fn evaluate(&self, rows: ArrayView2<f64>) -> Array1<f64> {
        transform_terms(&self.terms, rows).dot(&self.coef) + self.intercept
    }
}

/// The variational problem on one set of training rows, reparametrized to a
/// well-scaled quadratic. With a constant in the dictionary the remaining
/// columns are centered and scaled to unit variance; otherwise they are
/// scaled by their root mean square. Either way the penalty equals
/// `l1·Σ sdⱼ|ρⱼ| + ½·l2·Σ (sdⱼρⱼ)²` on the raw coefficients `ρ` and the
/// constant is unpenalized.
struct Problem {
    /// Non-constant dictionary columns that vary on the training rows.
    active: Vec<usize>,
    scale: Vec<f64>,
    shift: Vec<f64>,
    weight: Vec<f64>,
    constant: Option<usize>,
    gram: Array2<f64>,
    linear: Array1<f64>,
}

impl Problem {
    fn new(phi: ArrayView2<f64>, mscore: ArrayView2<f64>, constant: Option<usize>) -> Problem {
        let n = phi.nrows() as f64;
        let mut active = Vec::new();
        let mut scale = Vec::new();
        let mut shift = Vec::new();
        let mut weight = Vec::new();
        for j in 0..phi.ncols() {
            if Some(j) == constant {
                continue;
            }
            let col = phi.column(j);
            let mean = col.sum() / n;
            let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            let rms = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            if !(sd > 1e-12 * rms.max(f64::MIN_POSITIVE)) {
                continue;
            }
            active.push(j);
            if constant.is_some() {
                scale.push(sd);
                shift.push(mean);
                weight.push(1.0);
            } else {
                scale.push(rms);
                shift.push(0.0);
                weight.push(sd / rms);
            }
        }
        let q = active.len();
        let offset = usize::from(constant.is_some());
        let mut z = Array2::zeros((phi.nrows(), q + offset));
        let mut lin = Array1::zeros(q + offset);
        let mean_m = |j: usize| mscore.column(j).sum() / n;
        let m_const = constant.map(mean_m).unwrap_or(0.0);
        if constant.is_some() {
            z.column_mut(0).fill(1.0);
            lin[0] = m_const;
        }
        for (a, &j) in active.iter().enumerate() {
            let (sh, sc) = (shift[a], scale[a]);
            z.column_mut(a + offset).assign(&phi.column(j).mapv(|v| (v - sh) / sc));
            lin[a + offset] = (mean_m(j) - sh * m_const) / sc;
        }
        let gram = z.t().dot(&z) / n;
        Problem { active, scale, shift, weight, constant, gram, linear: lin }
    }

    fn solve(&self, l1: f64, l2: f64) -> Result<(Array1<f64>, f64)> {
        let offset = usize::from(self.constant.is_some());
        let mut w1 = vec![0.0; offset];
        let mut w2 = vec![0.0; offset];
        for &w in &self.weight {
            w1.push(l1 * w);
            w2.push(l2 * w * w);
        }
        let sol = solve_quadratic(&self.gram, &self.linear, &w1, &w2, CdSettings::default())?;
        let mut coef = Array1::zeros(self.active.len());
        let mut intercept = if offset == 1 { sol.coef[0] } else { 0.0 };
        for a in 0..self.active.len() {
            coef[a] = sol.coef[a + offset] / self.scale[a];
            intercept -= coef[a] * self.shift[a];
        }
        Ok((coef, intercept))
    }
}

fn check_budget(n: usize, q: usize) -> Result<()> {
    let bytes = (q * q + 2 * n * q) * std::mem::size_of::<f64>();
    if bytes > GRAM_BUDGET_BYTES {
        return Err(Error::DictionaryTooLarge { terms: q, bytes, budget: GRAM_BUDGET_BYTES });
    }
    Ok(())
}

/// Dictionary columns kept for the representer (duplicates and all-zero
/// columns removed) and the position of the constant among them.
fn riesz_terms(data: &Dataset, dictionary: &Dictionary) -> Result<(Vec<Term>, Option<usize>)> {
    let rows = data.short_rows();
    let all = dictionary.terms(rows.ncols());
    check_budget(data.n(), all.len())?;
    let keep = prune_columns(transform_terms(&all, rows).view(), false);
    let terms: Vec<Term> = keep.iter().map(|&k| all[k]).collect();
    let constant = terms.iter().position(|t| *t == Term::Constant);
    Ok((terms, constant))
}

fn to_function(terms: &[Term], active: &[usize], coef: Array1<f64>, intercept: f64) -> VariationalRiesz {
    VariationalRiesz { terms: active.iter().map(|&j| terms[j]).collect(), coef, intercept }
}

/// Fit `α = ρ'φ` on all rows at once, without cross-fitting. The first-order
/// conditions then hold in-sample: `Ê[α·b] = Ê[m(W, b)]` for every
/// unpenalized dictionary column `b`.
pub fn fit_riesz_variational_full(
    data: &Dataset,
    functional: &Functional,
    dictionary: &Dictionary,
    l1_weight: f64,
    l2_weight: f64,
) -> Result<VariationalRiesz> {
    check_penalty(l1_weight, l2_weight)?;
    let (terms, constant) = riesz_terms(data, dictionary)?;
    let rows = data.short_rows();
    let phi = transform_terms(&terms, rows);
    let mscore = functional.m_score_terms(&terms, rows)?;
    let problem = Problem::new(phi.view(), mscore.view(), constant);
    let (coef, intercept) = problem.solve(l1_weight, l2_weight)?;
    Ok(to_function(&terms, &problem.active, coef, intercept))
}

fn check_penalty(l1: f64, l2: f64) -> Result<()> {
    if !(l1 >= 0.0 && l2 >= 0.0 && l1.is_finite() && l2.is_finite()) {
        return Err(Error::InvalidInput(format!("penalties must be finite and non-negative (l1 {l1}, l2 {l2})")));
    }
    Ok(())
}

/// Cross-fitted variational representer. A penalty grid is searched by the
/// out-of-fold variational loss `mean(α̂² − 2m(W, α̂))` over the same folds,
/// and the fold fits at the selected penalty are returned.
pub fn fit_riesz_variational(
    data: &Dataset,
    plan: &FoldPlan,
    functional: &Functional,
    dictionary: &Dictionary,
    l1: &Penalty,
    l2_weight: f64,
    _seed: u64,
) -> Result<RieszFit> {
    let grid = match l1 {
        Penalty::Fixed(v) => vec![*v],
        Penalty::Grid(g) if !g.is_empty() => g.clone(),
        Penalty::Grid(_) => return Err(Error::InvalidInput("empty l1 grid".into())),
    };
    for &v in &grid {
        check_penalty(v, l2_weight)?;
    }
    if plan.n != data.n() {
        return Err(Error::InvalidInput("fold plan size differs from data".into()));
    }
    let (terms, constant) = riesz_terms(data, dictionary)?;
    let rows = data.short_rows();
    let phi = transform_terms(&terms, rows);
    let mscore = functional.m_score_terms(&terms, rows)?;

    let problems: Vec<Problem> = (0..plan.num_folds)
        .into_par_iter()
        .map(|k| {
            let train = plan.train_indices(k);
            Problem::new(
                phi.select(Axis(0), &train).view(),
                mscore.select(Axis(0), &train).view(),
                constant,
            )
        })
        .collect();

    let mut path = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, Vec<(Array1<f64>, f64)>)> = None;
    let mut first_err = None;
    for &lambda in &grid {
        let sols: Result<Vec<(Array1<f64>, f64)>> =
            problems.par_iter().map(|p| p.solve(lambda, l2_weight)).collect();
        let sols = match sols {
            Ok(s) => s,
            Err(e) => {
                path.push((lambda, f64::INFINITY));
                first_err.get_or_insert(e);
                continue;
            }
        };
        let mut loss = 0.0;
        for (k, (coef, intercept)) in sols.iter().enumerate() {
            let p = &problems[k];
            let idx = plan.fold_indices(k);
            for &i in &idx {
                let mut a = *intercept;
                let mut m = constant.map_or(0.0, |c| intercept * mscore[[i, c]]);
                for (t, &j) in p.active.iter().enumerate() {
                    a += coef[t] * phi[[i, j]];
                    m += coef[t] * mscore[[i, j]];
                }
                loss += a * a - 2.0 * m;
            }
        }
        loss /= plan.n as f64;
        path.push((lambda, loss));
        if best.as_ref().is_none_or(|(_, b, _)| loss < *b) {
            best = Some((lambda, loss, sols));
        }
    }
    let Some((lambda, _, sols)) = best else {
        return Err(first_err.expect("every penalty failed"));
    };
    let folds = sols
        .into_iter()
        .enumerate()
        .map(|(k, (coef, intercept))| {
            Arc::new(to_function(&terms, &problems[k].active, coef, intercept)) as Arc<dyn EvaluableFunction>
        })
        .collect();
    Ok(RieszFit {
        method: RieszMethod::Variational,
        folds,
        diagnostics: RieszDiagnostics {
            method: "variational".into(),
            dictionary_terms: Some(terms.len()),
            l1: Some(lambda),
            l1_path: if grid.len() > 1 { path } else { Vec::new() },
            outside_support: functional.outside_support(rows),
            ..Default::default()
        },
    })
}

/// Spec-level convenience that binds the functional first.
pub fn fit_riesz_for_spec(
    data: &Dataset,
    plan: &FoldPlan,
    spec: &FunctionalSpec,
    config: &RieszConfig,
    seed: u64,
) -> Result<RieszFit> {
    let functional = Functional::bind(spec, data)?;
    fit_riesz(data, plan, &functional, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_fold_plan;
    use crate::functionals::function;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[derive(Debug)]
    struct Constant(f64);
    impl RegressionFit for Constant {
        fn predict(&self, f: ArrayView2<f64>) -> Array1<f64> {
            Array1::from_elem(f.nrows(), self.0)
        }
        fn training_r2(&self) -> f64 {
            0.0
        }
    }
    #[derive(Debug)]
    struct ConstantLearner(f64);
    impl RegressionLearner for ConstantLearner {
        fn fit(&self, _: ArrayView2<f64>, _: ndarray::ArrayView1<f64>, _: u64) -> Result<Arc<dyn RegressionFit>> {
            Ok(Arc::new(Constant(self.0)))
        }
        fn name(&self) -> String {
            "constant".into()
        }
        fn without_treatment(&self) -> Arc<dyn RegressionLearner> {
            Arc::new(ConstantLearner(self.0))
        }
    }

    fn binary_toy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let d: Vec<f64> = x
            .iter()
            .map(|&x| if rng.random::<f64>() < 0.3 + 0.4 * x { 1.0 } else { 0.0 })
            .collect();
        let y: Vec<f64> = (0..n).map(|i| d[i] + x[i] + rng.random::<f64>()).collect();
        Dataset::new(y, d, Array2::from_shape_vec((n, 1), x).unwrap(), vec!["x".into()]).unwrap()
    }

    #[test]
    fn constant_half_propensity_gives_plus_minus_two() {
        let data = binary_toy(40, 1);
        let plan = make_fold_plan(40, 4, 1, None, None).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let fit = fit_riesz_analytic_binary(&data, &plan, &fun, &ConstantLearner(0.5), 0.01).unwrap();
        let a = fit.out_of_fold(data.short_rows(), &plan).unwrap();
        for i in 0..40 {
            let d = data.treatment()[i];
            assert_eq!(a[i], if d == 1.0 { 2.0 } else { -2.0 });
            assert_eq!(a[i].signum(), 2.0 * d - 1.0);
        }
    }

    #[test]
    fn propensity_is_clipped() {
        let data = binary_toy(40, 2);
        let plan = make_fold_plan(40, 4, 1, None, None).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let fit = fit_riesz_analytic_binary(&data, &plan, &fun, &ConstantLearner(0.001), 0.01).unwrap();
        let a = fit.out_of_fold(data.short_rows(), &plan).unwrap();
        let i = (0..40).find(|&i| data.treatment()[i] == 1.0).unwrap();
        assert!((a[i] - 100.0).abs() < 1e-9);
        assert_eq!(fit.diagnostics.trimmed_low, 40);
    }

    #[test]
    fn analytic_rejects_bad_inputs() {
        let data = binary_toy(40, 3);
        let plan = make_fold_plan(40, 4, 1, None, None).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        assert!(fit_riesz_analytic_binary(&data, &plan, &fun, &ConstantLearner(0.5), 0.5).is_err());
        let acd = Functional::bind(&FunctionalSpec::acd(), &data).unwrap();
        assert!(fit_riesz_analytic_binary(&data, &plan, &acd, &ConstantLearner(0.5), 0.01).is_err());
        let all_treated = Dataset::new(vec![0.0; 10], vec![1.0; 10], Array2::zeros((10, 1)), vec!["x".into()]).unwrap();
        let plan = make_fold_plan(10, 2, 1, None, None).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &all_treated).unwrap();
        assert!(matches!(
            fit_riesz_analytic_binary(&all_treated, &plan, &fun, &ConstantLearner(0.5), 0.01),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn analytic_matches_cell_propensities() {
        // With a saturated propensity model on binary X, each fold's α̂ is the
        // inverse of that fold's training-cell treated share.
        let data = binary_toy(400, 4);
        let plan = make_fold_plan(400, 5, 9, None, None).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let learner = PenalizedLinear { l1: 0.0, dictionary: Dictionary::linear(), ..Default::default() };
        let fit = fit_riesz_analytic_binary(&data, &plan, &fun, &learner, 0.01).unwrap();
        let (d, x) = (data.treatment(), data.covariates());
        for k in 0..5 {
            let train = plan.train_indices(k);
            for xv in [0.0, 1.0] {
                let cell: Vec<usize> = train.iter().copied().filter(|&i| x[[i, 0]] == xv).collect();
                let pi = cell.iter().filter(|&&i| d[i] == 1.0).count() as f64 / cell.len() as f64;
                let pts = array![[1.0, xv], [0.0, xv]];
                let a = fit.fold_function(k).evaluate(pts.view());
                assert!((a[0] - 1.0 / pi).abs() < 1e-6);
                assert!((a[1] + 1.0 / (1.0 - pi)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn plm_riesz_on_independent_treatment() {
        let n = 5000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((n, 2), |_| StandardNormal.sample(&mut rng));
        let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let data = Dataset::new(vec![0.0; n], d, x, vec!["a".into(), "b".into()]).unwrap();
        let plan = make_fold_plan(n, 5, 1, None, None).unwrap();
        let fit = fit_riesz_plm(&data, &plan, &ConstantLearner(0.0)).unwrap();
        let a = fit.out_of_fold(data.short_rows(), &plan).unwrap();
        let m2 = a.mapv(|v| v * v).mean().unwrap();
        assert!((m2 - 1.0).abs() < 0.05, "E α² = {m2}");
        let r = fit.diagnostics.residual_second_moment.unwrap();
        let id = (&a * &data.treatment()).mean().unwrap();
        assert!((id - 1.0).abs() < 1e-12, "E[α(D − m̂)] = {id}, denominator {r}");
    }

    #[test]
    fn plm_riesz_rejects_deterministic_treatment() {
        let n = 50;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / 10.0);
        let data = Dataset::new(vec![0.0; n], x.column(0).to_vec(), x, vec!["x".into()]).unwrap();
        let plan = make_fold_plan(n, 5, 1, None, None).unwrap();
        let exact = PenalizedLinear { l1: 0.0, dictionary: Dictionary::linear(), ..Default::default() };
        assert!(matches!(fit_riesz_plm(&data, &plan, &exact), Err(Error::Degenerate(_))));
    }

    #[test]
    fn variational_reproduces_inverse_propensity_on_randomized_toy() {
        // Balanced randomized design: basis (1, d) spans the representer.
        let n = 200;
        let d: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let data = Dataset::new(vec![0.0; n], d, Array2::zeros((n, 0)), vec![]).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let dict = Dictionary::linear().with_intercept(true);
        let fit = fit_riesz_variational_full(&data, &fun, &dict, 0.0, 0.0).unwrap();
        let a = fit.evaluate(array![[1.0], [0.0]].view());
        assert!((a[0] - 2.0).abs() < 1e-9 && (a[1] + 2.0).abs() < 1e-9, "{a}");
    }

    #[test]
    fn huge_penalty_gives_zero() {
        let data = binary_toy(100, 6);
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let dict = Dictionary::default().with_intercept(true);
        let fit = fit_riesz_variational_full(&data, &fun, &dict, 1e9, 0.0).unwrap();
        let a = fit.evaluate(data.short_rows());
        assert!(a.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn variational_moment_identity() {
        let n = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((n, 2), |_| StandardNormal.sample(&mut rng));
        let d: Vec<f64> = (0..n).map(|i| { let e: f64 = StandardNormal.sample(&mut rng); x[[i, 0]] + e }).collect();
        let data = Dataset::new(vec![0.0; n], d, x, vec!["a".into(), "b".into()]).unwrap();
        let fun = Functional::bind(&FunctionalSpec::acd(), &data).unwrap();
        let dict = Dictionary::default().with_intercept(true);
        let fit = fit_riesz_variational_full(&data, &fun, &dict, 0.0, 0.0).unwrap();
        let rows = data.short_rows();
        let alpha = fit.evaluate(rows);
        let terms = dict.terms(3);
        let phi = transform_terms(&terms, rows);
        let m = fun.m_score_terms(&terms, rows).unwrap();
        for j in 0..terms.len() {
            let lhs = alpha.dot(&phi.column(j)) / n as f64;
            let rhs = m.column(j).sum() / n as f64;
            assert!((lhs - rhs).abs() < 1e-6, "term {j}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn analytic_and_variational_agree_on_saturated_toy() {
        let data = binary_toy(400, 8);
        let plan = make_fold_plan(400, 5, 3, None, None).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let learner = PenalizedLinear { l1: 0.0, dictionary: Dictionary::linear(), ..Default::default() };
        let analytic = fit_riesz_analytic_binary(&data, &plan, &fun, &learner, 1e-6).unwrap();
        let dict = Dictionary::default().with_intercept(true);
        let var = fit_riesz_variational(&data, &plan, &fun, &dict, &Penalty::Fixed(0.0), 0.0, 0).unwrap();
        let cells = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        for k in 0..5 {
            let a = analytic.fold_function(k).evaluate(cells.view());
            let b = var.fold_function(k).evaluate(cells.view());
            for c in 0..4 {
                assert!((a[c] - b[c]).abs() < 1e-6, "fold {k} cell {c}: {} vs {}", a[c], b[c]);
            }
        }
    }

    #[test]
    fn penalty_grid_is_searched() {
        let data = binary_toy(300, 9);
        let plan = make_fold_plan(300, 5, 3, None, None).unwrap();
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let fit = fit_riesz(&data, &plan, &fun, &RieszConfig { method: Some(RieszMethod::Variational), ..Default::default() }, 0)
            .unwrap();
        assert_eq!(fit.diagnostics.l1_path.len(), 4);
        let best = fit.diagnostics.l1_path.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let chosen = fit.diagnostics.l1_path.iter().find(|p| Some(p.0) == fit.diagnostics.l1).unwrap();
        assert_eq!(chosen.1, best);
        let f = function(|r: ArrayView2<f64>| r.column(0).to_owned());
        assert!(fun.m_score(f.as_ref(), data.short_rows()).is_ok());
    }

    #[test]
    fn norm_reduction_under_partially_linear_truth() {
        // Binary D with propensity depending on X; the plm representer is the
        // projection of the analytic one onto a restricted class.
        let n = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let d: Vec<f64> = x.iter().map(|&x| if rng.random::<f64>() < 0.2 + 0.6 * x { 1.0 } else { 0.0 }).collect();
        let data = Dataset::new(vec![0.0; n], d, Array2::from_shape_vec((n, 1), x).unwrap(), vec!["x".into()]).unwrap();
        let plan = make_fold_plan(n, 5, 1, None, None).unwrap();
        let learner = PenalizedLinear { l1: 0.0, dictionary: Dictionary::linear(), ..Default::default() };
        let fun = Functional::bind(&FunctionalSpec::ate(), &data).unwrap();
        let a = fit_riesz_analytic_binary(&data, &plan, &fun, &learner, 0.01)
            .unwrap()
            .out_of_fold(data.short_rows(), &plan)
            .unwrap();
        let b = fit_riesz_plm(&data, &plan, &learner).unwrap().out_of_fold(data.short_rows(), &plan).unwrap();
        let (ea, eb) = (a.mapv(|v| v * v).mean().unwrap(), b.mapv(|v| v * v).mean().unwrap());
        assert!(eb <= ea + 0.05, "plm {eb} analytic {ea}");
    }
}
