//! Target functionals `θ = E m(W, g)` and their m-scores.
//!
//! Every supported functional is linear in `g` and evaluates `g` at a small
//! set of counterfactual points per row. [`Functional`] reduces each one to a
//! weighted sum over those points, so the same description drives the score
//! of a fitted regression, of a Riesz representer and of every dictionary
//! column in the variational Riesz loss.

pub mod expr;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use expr::{BoundExpr, Expr};

use crate::data::{Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::learners::dictionary::{transform_terms, Term};
use crate::learners::RegressionFit;

/// A function of the `(D, X)` row, evaluated in batches.
pub trait EvaluableFunction: Send + Sync {
    fn evaluate(&self, rows: ArrayView2<f64>) -> Array1<f64>;
}

/// Wraps a closure.
pub struct FnFunction<F>(pub F);

impl<F> EvaluableFunction for FnFunction<F>
where
    F: Fn(ArrayView2<f64>) -> Array1<f64> + Send + Sync,
{
    fn evaluate(&self, rows: ArrayView2<f64>) -> Array1<f64> {
        (self.0)(rows)
    }
}

pub fn function<F>(f: F) -> Arc<dyn EvaluableFunction>
where
    F: Fn(ArrayView2<f64>) -> Array1<f64> + Send + Sync + 'static,
{
    Arc::new(FnFunction(f))
}

/// A fitted regression viewed as a function.
#[derive(Debug, Clone)]
pub struct Fitted(pub Arc<dyn RegressionFit>);

impl EvaluableFunction for Fitted {
    fn evaluate(&self, rows: ArrayView2<f64>) -> Array1<f64> {
        self.0.predict(rows)
    }
}

/// `Σ cₖ·fₖ`.
#[derive(Clone)]
pub struct LinearCombination(pub Vec<(f64, Arc<dyn EvaluableFunction>)>);

impl EvaluableFunction for LinearCombination {
    fn evaluate(&self, rows: ArrayView2<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(rows.nrows());
        for (c, f) in &self.0 {
            out.scaled_add(*c, &f.evaluate(rows));
        }
        out
    }
}

/// Rows defining one side of a distribution shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Sample {
    /// Dataset rows where the expression is nonzero.
    Where(Expr),
    /// Explicit `(D, X)` rows in dataset column order.
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalSpec {
    /// `E[(g(1,X) − g(0,X))·ℓ]`.
    BinaryAte {
        #[serde(default)]
        weight: Option<Expr>,
    },
    /// `E[g(d̄,X)·ℓ]`.
    BinaryApo {
        level: u8,
        #[serde(default)]
        weight: Option<Expr>,
    },
    /// Coefficient on `D` in a partially linear model.
    PlmCoefficient,
    /// Weighted average derivative in direction `t`.
    Acd {
        #[serde(default)]
        weight: Option<Expr>,
        #[serde(default)]
        direction: Option<Expr>,
        /// Absolute step; defaults to `0.01·sd(D)`.
        #[serde(default)]
        fd_step: Option<f64>,
    },
    /// `E[(g(T(W)) − g(W))·ℓ]`; columns missing from `transport` are kept.
    PolicyTransport {
        #[serde(default)]
        weight: Option<Expr>,
        transport: BTreeMap<String, Expr>,
    },
    /// `∫ g·ℓ d(F₁ − F₀)`.
    DistributionShift {
        #[serde(default)]
        weight: Option<Expr>,
        target: Sample,
        base: Sample,
    },
}

impl FunctionalSpec {
    pub fn ate() -> Self {
        FunctionalSpec::BinaryAte { weight: None }
    }

    pub fn acd() -> Self {
        FunctionalSpec::Acd { weight: None, direction: None, fd_step: None }
    }

    pub fn requires_binary(&self) -> bool {
        matches!(self, FunctionalSpec::BinaryAte { .. } | FunctionalSpec::BinaryApo { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            FunctionalSpec::BinaryAte { .. } => "binary_ate",
            FunctionalSpec::BinaryApo { .. } => "binary_apo",
            FunctionalSpec::PlmCoefficient => "plm_coefficient",
            FunctionalSpec::Acd { .. } => "acd",
            FunctionalSpec::PolicyTransport { .. } => "policy_transport",
            FunctionalSpec::DistributionShift { .. } => "distribution_shift",
        }
    }

    fn weight(&self) -> Option<&Expr> {
        match self {
            FunctionalSpec::BinaryAte { weight }
            | FunctionalSpec::BinaryApo { weight, .. }
            | FunctionalSpec::Acd { weight, .. }
            | FunctionalSpec::PolicyTransport { weight, .. }
            | FunctionalSpec::DistributionShift { weight, .. } => weight.as_ref(),
            FunctionalSpec::PlmCoefficient => None,
        }
    }
}

#[derive(Clone)]
enum Kind {
    Ate,
    Apo(f64),
    Plm,
    Acd { h: f64, direction: Option<BoundExpr> },
    Transport(Vec<(usize, BoundExpr)>),
    Shift { target: Array2<f64>, base: Array2<f64> },
}

/// Evaluation plan of `m(w, ·)`: per-row coefficients times the function at
/// per-row points, or a sample-level constant.
enum Form {
    PerRow(Vec<(Array1<f64>, Array2<f64>)>),
    Constant(Vec<(Array1<f64>, Array2<f64>)>),
}

/// A [`FunctionalSpec`] bound to a dataset's columns.
#[derive(Clone)]
pub struct Functional {
    spec: FunctionalSpec,
    kind: Kind,
    weight: Option<BoundExpr>,
    ncols: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Functional").field("spec", &self.spec).finish()
    }
}

impl Functional {
    pub fn bind(spec: &FunctionalSpec, data: &Dataset) -> Result<Functional> {
        let names = data.short_names();
        let rows = data.short_rows();
        if spec.requires_binary() && !data.is_binary_treatment() {
            return Err(Error::NonBinaryTreatment(format!(
                "{} needs a 0/1 treatment column `{}`",
                spec.name(),
                data.treatment_name()
            )));
        }
        let weight = spec.weight().map(|w| w.bind(&names)).transpose()?;
        let kind = match spec {
            FunctionalSpec::BinaryAte { .. } => Kind::Ate,
            FunctionalSpec::BinaryApo { level, .. } => {
                if *level > 1 {
                    return Err(Error::InvalidInput(format!("treatment level must be 0 or 1, got {level}")));
                }
                Kind::Apo(*level as f64)
            }
            FunctionalSpec::PlmCoefficient => Kind::Plm,
            FunctionalSpec::Acd { direction, fd_step, .. } => {
                let h = match fd_step {
                    Some(h) => *h,
                    None => 0.01 * crate::stats::variance(&data.treatment().to_vec()).sqrt(),
                };
                if !(h > 0.0 && h.is_finite()) {
                    return Err(Error::Degenerate(format!(
                        "finite-difference step must be positive (got {h}); a constant treatment has no derivative"
                    )));
                }
                let direction = direction.as_ref().map(|d| d.bind(&names)).transpose()?;
                Kind::Acd { h, direction }
            }
            FunctionalSpec::PolicyTransport { transport, .. } => {
                let mut maps = Vec::new();
                for (col, e) in transport {
                    maps.push((expr::resolve(col, &names)?, e.bind(&names)?));
                }
                Kind::Transport(maps)
            }
            FunctionalSpec::DistributionShift { target, base, .. } => {
                let pick = |s: &Sample| -> Result<Array2<f64>> {
                    let out = match s {
                        Sample::Where(e) => {
                            let mask = e.bind(&names)?.eval(rows);
                            let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] != 0.0).collect();
                            rows.select(Axis(0), &idx)
                        }
                        Sample::Rows(r) => {
                            let mut a = Array2::zeros((r.len(), names.len()));
                            for (i, row) in r.iter().enumerate() {
                                if row.len() != names.len() {
                                    return Err(Error::InvalidInput(format!(
                                        "shift sample row {i} has {} values, expected {}",
                                        row.len(),
                                        names.len()
                                    )));
                                }
                                a.row_mut(i).assign(&Array1::from(row.clone()));
                            }
                            a
                        }
                    };
                    if out.nrows() == 0 {
                        return Err(Error::InvalidInput("distribution-shift sample is empty".into()));
                    }
                    if !out.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite("distribution-shift sample".into()));
                    }
                    Ok(out)
                };
                Kind::Shift { target: pick(target)?, base: pick(base)? }
            }
        };
        let ncols = names.len();
        let lower = (0..ncols).map(|j| rows.column(j).fold(f64::INFINITY, |a, &b| a.min(b))).collect();
        let upper = (0..ncols).map(|j| rows.column(j).fold(f64::NEG_INFINITY, |a, &b| a.max(b))).collect();
        Ok(Functional { spec: spec.clone(), kind, weight, ncols, lower, upper })
    }

    pub fn spec(&self) -> &FunctionalSpec {
        &self.spec
    }

    pub fn is_plm(&self) -> bool {
        matches!(self.kind, Kind::Plm)
    }

    /// `Some(None)` for the ATE, `Some(Some(d̄))` for an APO, `None` otherwise.
    pub fn binary_level(&self) -> Option<Option<f64>> {
        match self.kind {
            Kind::Ate => Some(None),
            Kind::Apo(l) => Some(Some(l)),
            _ => None,
        }
    }

    /// Finite-difference step used for derivative functionals.
    pub fn fd_step(&self) -> Option<f64> {
        match self.kind {
            Kind::Acd { h, .. } => Some(h),
            _ => None,
        }
    }

    /// The weight `ℓ` at `rows`, or ones.
    pub fn weight_at(&self, rows: ArrayView2<f64>) -> Array1<f64> {
        match &self.weight {
            Some(w) => w.eval(rows),
            None => Array1::ones(rows.nrows()),
        }
    }

    /// True when the weight reads the treatment column.
    pub fn weight_uses_treatment(&self) -> bool {
        self.weight.as_ref().is_some_and(|w| w.reads_column(0))
    }

    fn check_rows(&self, rows: ArrayView2<f64>) -> Result<()> {
        if rows.ncols() != self.ncols {
            return Err(Error::InvalidInput(format!(
                "rows have {} columns, functional was bound to {}",
                rows.ncols(),
                self.ncols
            )));
        }
        Ok(())
    }

    fn form(&self, rows: ArrayView2<f64>) -> Result<Form> {
        self.check_rows(rows)?;
        let with_d = |v: f64| {
            let mut r = rows.to_owned();
            r.column_mut(0).fill(v);
            r
        };
        Ok(match &self.kind {
            Kind::Plm => {
                return Err(Error::Unsupported(
                    "the partially linear coefficient is estimated by partialling out, not through m-scores".into(),
                ))
            }
            Kind::Ate => {
                let l = self.weight_at(rows);
                Form::PerRow(vec![(l.clone(), with_d(1.0)), (-l, with_d(0.0))])
            }
            Kind::Apo(level) => Form::PerRow(vec![(self.weight_at(rows), with_d(*level))]),
            Kind::Acd { h, direction } => {
                let mut c = self.weight_at(rows);
                if let Some(t) = direction {
                    c = c * t.eval(rows);
                }
                c.mapv_inplace(|v| v / (2.0 * h));
                let mut up = rows.to_owned();
                up.column_mut(0).mapv_inplace(|d| d + h);
                let mut down = rows.to_owned();
                down.column_mut(0).mapv_inplace(|d| d - h);
                Form::PerRow(vec![(c.clone(), up), (-c, down)])
            }
            Kind::Transport(maps) => {
                let l = self.weight_at(rows);
                Form::PerRow(vec![(l.clone(), self.transport(rows, maps)), (-l, rows.to_owned())])
            }
            Kind::Shift { target, base } => {
                let wt = self.weight_at(target.view()) / target.nrows() as f64;
                let wb = -self.weight_at(base.view()) / base.nrows() as f64;
                Form::Constant(vec![(wt, target.clone()), (wb, base.clone())])
            }
        })
    }

    fn transport(&self, rows: ArrayView2<f64>, maps: &[(usize, BoundExpr)]) -> Array2<f64> {
        let mut out = rows.to_owned();
        for (col, e) in maps {
            out.column_mut(*col).assign(&e.eval(rows));
        }
        out
    }

    /// `m(wᵢ, f)` for every row.
    pub fn m_score(&self, f: &dyn EvaluableFunction, rows: ArrayView2<f64>) -> Result<Array1<f64>> {
        let out = match self.form(rows)? {
            Form::PerRow(parts) => {
                let mut out = Array1::zeros(rows.nrows());
                for (c, pts) in parts {
                    out += &(c * f.evaluate(pts.view()));
                }
                out
            }
            Form::Constant(parts) => {
                let v: f64 = parts.iter().map(|(c, pts)| c.dot(&f.evaluate(pts.view()))).sum();
                Array1::from_elem(rows.nrows(), v)
            }
        };
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("m-score of {} at counterfactual points", self.spec.name())));
        }
        Ok(out)
    }

    /// m-scores of each dictionary term, one column per term.
    pub fn m_score_terms(&self, terms: &[Term], rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = rows.nrows();
        let out = match self.form(rows)? {
            Form::PerRow(parts) => {
                let mut out = Array2::zeros((n, terms.len()));
                for (c, pts) in parts {
                    let phi = transform_terms(terms, pts.view());
                    out += &(&phi * &c.insert_axis(Axis(1)));
                }
                out
            }
            Form::Constant(parts) => {
                let mut v = Array1::zeros(terms.len());
                for (c, pts) in parts {
                    v += &transform_terms(terms, pts.view()).t().dot(&c);
                }
                v.insert_axis(Axis(0)).broadcast((n, terms.len())).unwrap().to_owned()
            }
        };
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("m-score of dictionary terms for {}", self.spec.name())));
        }
        Ok(out)
    }

    /// Sample mean of the m-score over the dataset rows.
    pub fn plugin_theta(&self, g: &dyn EvaluableFunction, data: &Dataset) -> Result<f64> {
        let m = self.m_score(g, data.short_rows())?;
        Ok(m.sum() / m.len() as f64)
    }

    /// Number of evaluation points (transported rows or shift samples) that
    /// fall outside the bounding box of the observed data. Support is not
    /// enforced; this only flags extrapolation.
    pub fn outside_support(&self, rows: ArrayView2<f64>) -> usize {
        let count = |pts: ArrayView2<f64>| {
            pts.rows()
                .into_iter()
                .filter(|r| r.iter().enumerate().any(|(j, &v)| v < self.lower[j] || v > self.upper[j]))
                .count()
        };
        match &self.kind {
            Kind::Transport(maps) if rows.ncols() == self.ncols => count(self.transport(rows, maps).view()),
            Kind::Shift { target, base } => count(target.view()) + count(base.view()),
            _ => 0,
        }
    }
}

/// Evaluates per-fold functions so that each row is scored by the function
/// of its own fold (the one trained without it).
pub fn out_of_fold(fns: &[Arc<dyn EvaluableFunction>], rows: ArrayView2<f64>, plan: &FoldPlan) -> Result<Array1<f64>> {
    check_folds(fns, rows, plan)?;
    let mut out = Array1::zeros(rows.nrows());
    for (k, f) in fns.iter().enumerate() {
        let idx = plan.fold_indices(k);
        let v = f.evaluate(rows.select(Axis(0), &idx).view());
        for (r, &i) in idx.iter().enumerate() {
            out[i] = v[r];
        }
    }
    Ok(out)
}

/// Out-of-fold m-scores of per-fold functions.
pub fn m_out_of_fold(
    functional: &Functional,
    fns: &[Arc<dyn EvaluableFunction>],
    rows: ArrayView2<f64>,
    plan: &FoldPlan,
) -> Result<Array1<f64>> {
    check_folds(fns, rows, plan)?;
    let mut out = Array1::zeros(rows.nrows());
    for (k, f) in fns.iter().enumerate() {
        let idx = plan.fold_indices(k);
        let v = functional.m_score(f.as_ref(), rows.select(Axis(0), &idx).view())?;
        for (r, &i) in idx.iter().enumerate() {
            out[i] = v[r];
        }
    }
    Ok(out)
}

fn check_folds(fns: &[Arc<dyn EvaluableFunction>], rows: ArrayView2<f64>, plan: &FoldPlan) -> Result<()> {
    if fns.len() != plan.num_folds || rows.nrows() != plan.n {
        return Err(Error::InvalidInput(format!(
            "{} fold functions and {} rows for a plan with {} folds over {} rows",
            fns.len(),
            rows.nrows(),
            plan.num_folds,
            plan.n
        )));
    }
    Ok(())
}

/// Convenience: bind and evaluate in one step.
pub fn m_score(
    spec: &FunctionalSpec,
    data: &Dataset,
    f: &dyn EvaluableFunction,
    rows: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    Functional::bind(spec, data)?.m_score(f, rows)
}

pub fn plugin_theta(spec: &FunctionalSpec, g: &dyn EvaluableFunction, data: &Dataset) -> Result<f64> {
    Functional::bind(spec, data)?.plugin_theta(g, data)
}
