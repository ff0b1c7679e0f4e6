use std::collections::{BTreeSet, HashMap};

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

/// One column of an expanded feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Term {
    Constant,
    Raw(usize),
    Product(usize, usize),
}

impl Term {
    fn eval(&self, row: &[f64]) -> f64 {
        match *self {
            Term::Constant => 1.0,
            Term::Raw(i) => row[i],
            Term::Product(i, j) => row[i] * row[j],
        }
    }

    pub fn describe(&self, names: &[String]) -> String {
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("c{i}"));
        match *self {
            Term::Constant => "1".into(),
            Term::Raw(i) => name(i),
            Term::Product(i, j) if i == j => format!("{}^2", name(i)),
            Term::Product(i, j) => format!("{}*{}", name(i), name(j)),
        }
    }
}

/// Feature expansion shared by the penalized regression and the variational
/// Riesz learner.
///
/// Terms are generated in a fixed order: constant (if enabled), raw columns,
/// squares, pairwise interactions, then treatment-by-covariate products that
/// were not already produced. Column 0 of the input is taken to be the
/// treatment when `treatment_interactions` is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dictionary {
    pub intercept: bool,
    pub squares: bool,
    pub interactions: bool,
    pub treatment_interactions: bool,
    pub max_terms: usize,
}

impl Default for Dictionary {
    fn default() -> Self {
        Dictionary {
            intercept: false,
            squares: true,
            interactions: true,
            treatment_interactions: true,
            max_terms: 5000,
        }
    }
}

impl Dictionary {
    /// Raw columns only.
    pub fn linear() -> Self {
        Dictionary {
            intercept: false,
            squares: false,
            interactions: false,
            treatment_interactions: false,
            max_terms: 5000,
        }
    }

    pub fn with_intercept(mut self, on: bool) -> Self {
        self.intercept = on;
        self
    }

    /// Same expansion for inputs that carry no treatment column.
    pub fn without_treatment(&self) -> Self {
        Dictionary { treatment_interactions: false, ..self.clone() }
    }

    pub fn terms(&self, p: usize) -> Vec<Term> {
        let mut terms = Vec::new();
        if self.intercept {
            terms.push(Term::Constant);
        }
        terms.extend((0..p).map(Term::Raw));
        if self.squares {
            terms.extend((0..p).map(|i| Term::Product(i, i)));
        }
        if self.interactions {
            for i in 0..p {
                for j in i + 1..p {
                    terms.push(Term::Product(i, j));
                }
            }
        }
        if self.treatment_interactions && !self.interactions {
            terms.extend((1..p).map(|j| Term::Product(0, j)));
        }
        terms.truncate(self.max_terms);
        terms
    }

    pub fn transform(&self, raw: ArrayView2<f64>) -> Array2<f64> {
        transform_terms(&self.terms(raw.ncols()), raw)
    }

    pub fn describe(&self, names: &[String]) -> Vec<String> {
        self.terms(names.len()).iter().map(|t| t.describe(names)).collect()
    }
}

pub fn transform_terms(terms: &[Term], raw: ArrayView2<f64>) -> Array2<f64> {
    let n = raw.nrows();
    let mut out = Array2::zeros((n, terms.len()));
    Zip::from(out.rows_mut()).and(raw.rows()).for_each(|mut o, r| {
        let row: Vec<f64> = r.to_vec();
        for (k, t) in terms.iter().enumerate() {
            o[k] = t.eval(&row);
        }
    });
    out
}

/// Indices of columns to keep: drops bit-identical duplicates of an earlier
/// column, all-zero columns, and (when `drop_constant`) any constant column.
pub fn prune_columns(phi: ArrayView2<f64>, drop_constant: bool) -> Vec<usize> {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut keep = Vec::new();
    for j in 0..phi.ncols() {
        let col = phi.column(j);
        let first = col[0];
        let constant = col.iter().all(|&v| v == first);
        if constant && (drop_constant || first == 0.0) {
            continue;
        }
        let key: Vec<u64> = col.iter().map(|v| (v + 0.0).to_bits()).collect();
        if seen.contains_key(&key) {
            continue;
        }
        seen.insert(key, j);
        keep.push(j);
    }
    keep
}

/// Raw input columns that a set of terms reads.
pub fn inputs_used(terms: &[Term]) -> BTreeSet<usize> {
    let mut used = BTreeSet::new();
    for t in terms {
        match *t {
            Term::Constant => {}
            Term::Raw(i) => {
                used.insert(i);
            }
            Term::Product(i, j) => {
                used.insert(i);
                used.insert(j);
            }
        }
    }
    used
}
