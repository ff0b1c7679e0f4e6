//! Observational data and cross-fitting fold plans.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of cross-fitting folds.
pub const DEFAULT_FOLDS: usize = 5;

/// Observed outcome, treatment and covariates.
///
/// Internally the treatment and covariates are kept side by side as the
/// "short" regressor matrix `W = (D, X)`, column 0 being the treatment. Every
/// nuisance function in the crate is evaluated on rows of that matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    outcome: Array1<f64>,
    short: Array2<f64>,
    group_label: Option<Vec<i64>>,
    stratum: Option<Vec<i64>>,
    outcome_name: String,
    treatment_name: String,
    column_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        outcome: Vec<f64>,
        treatment: Vec<f64>,
        covariates: Array2<f64>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::EmptyData);
        }
        if n < 2 {
            return Err(Error::InvalidInput("dataset needs at least 2 rows".into()));
        }
        if treatment.len() != n || covariates.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "column lengths differ: outcome {n}, treatment {}, covariates {}",
                treatment.len(),
                covariates.nrows()
            )));
        }
        if column_names.len() != covariates.ncols() {
            return Err(Error::InvalidInput(format!(
                "{} covariate names for {} covariate columns",
                column_names.len(),
                covariates.ncols()
            )));
        }
        if !outcome.iter().chain(&treatment).chain(covariates.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset contains NaN or infinite values".into()));
        }
        let p = covariates.ncols();
        let mut short = Array2::zeros((n, p + 1));
        short.column_mut(0).assign(&Array1::from(treatment));
        short.slice_mut(s![.., 1..]).assign(&covariates);
        Ok(Dataset {
            outcome: Array1::from(outcome),
            short,
            group_label: None,
            stratum: None,
            outcome_name: "y".into(),
            treatment_name: "d".into(),
            column_names,
        })
    }

    pub fn with_names(mut self, outcome: &str, treatment: &str) -> Self {
        self.outcome_name = outcome.to_string();
        self.treatment_name = treatment.to_string();
        self
    }

    pub fn with_groups(mut self, groups: Vec<i64>) -> Result<Self> {
        if groups.len() != self.n() {
            return Err(Error::InvalidInput("group vector length differs from n".into()));
        }
        self.group_label = Some(groups);
        Ok(self)
    }

    pub fn with_strata(mut self, strata: Vec<i64>) -> Result<Self> {
        if strata.len() != self.n() {
            return Err(Error::InvalidInput("stratum vector length differs from n".into()));
        }
        self.stratum = Some(strata);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.short.ncols() - 1
    }

    pub fn outcome(&self) -> ArrayView1<'_, f64> {
        self.outcome.view()
    }

    pub fn treatment(&self) -> ArrayView1<'_, f64> {
        self.short.column(0)
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.short.slice(s![.., 1..])
    }

    /// The `(D, X)` matrix, treatment in column 0.
    pub fn short_rows(&self) -> ArrayView2<'_, f64> {
        self.short.view()
    }

    pub fn group_label(&self) -> Option<&[i64]> {
        self.group_label.as_deref()
    }

    pub fn stratum(&self) -> Option<&[i64]> {
        self.stratum.as_deref()
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }

    /// Names of the columns of [`Dataset::short_rows`].
    pub fn short_names(&self) -> Vec<String> {
        std::iter::once(self.treatment_name.clone())
            .chain(self.column_names.iter().cloned())
            .collect()
    }

    pub fn is_binary_treatment(&self) -> bool {
        self.treatment().iter().all(|&d| d == 0.0 || d == 1.0)
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// Copy of the dataset without covariate `j`.
    pub fn drop_covariate(&self, j: usize) -> Result<Dataset> {
        if j >= self.p() {
            return Err(Error::InvalidInput(format!("covariate index {j} out of range")));
        }
        let keep: Vec<usize> = (0..self.p()).filter(|&k| k != j).collect();
        let cov = self.covariates().select(Axis(1), &keep);
        let names = keep.iter().map(|&k| self.column_names[k].clone()).collect();
        let mut out = Dataset::new(
            self.outcome.to_vec(),
            self.treatment().to_vec(),
            cov,
            names,
        )?
        .with_names(&self.outcome_name, &self.treatment_name);
        out.group_label = self.group_label.clone();
        out.stratum = self.stratum.clone();
        Ok(out)
    }
}

/// Column-role mapping for [`load_csv`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub stratum: Option<String>,
}

/// Read a headed CSV file. Any missing or non-numeric cell in a selected
/// column is an error naming the 1-based data row.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_idx = find(&schema.outcome)?;
    let d_idx = find(&schema.treatment)?;
    let x_idx = schema
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let g_idx = schema.group.as_deref().map(find).transpose()?;
    let s_idx = schema.stratum.as_deref().map(find).transpose()?;

    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut x = Vec::new();
    let mut groups = Labeler::default();
    let mut strata = Labeler::default();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("").trim();
            if raw.is_empty() || is_na(raw) {
                return Err(Error::MissingValue { row, column: name.to_string() });
            }
            let v: f64 = raw.parse().map_err(|_| Error::NonNumeric {
                row,
                column: name.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("column `{name}` at data row {row}")));
            }
            Ok(v)
        };
        y.push(cell(y_idx, &schema.outcome)?);
        d.push(cell(d_idx, &schema.treatment)?);
        for (k, &idx) in x_idx.iter().enumerate() {
            x.push(cell(idx, &schema.covariates[k])?);
        }
        for (idx, labeler, name) in [
            (g_idx, &mut groups, schema.group.as_deref()),
            (s_idx, &mut strata, schema.stratum.as_deref()),
        ] {
            if let (Some(idx), Some(name)) = (idx, name) {
                let raw = record.get(idx).unwrap_or("").trim();
                if raw.is_empty() || is_na(raw) {
                    return Err(Error::MissingValue { row, column: name.to_string() });
                }
                labeler.push(raw);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = y.len();
    let covariates = Array2::from_shape_vec((n, x_idx.len()), x)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut data = Dataset::new(y, d, covariates, schema.covariates.clone())?
        .with_names(&schema.outcome, &schema.treatment);
    if g_idx.is_some() {
        data = data.with_groups(groups.ids)?;
    }
    if s_idx.is_some() {
        data = data.with_strata(strata.ids)?;
    }
    Ok(data)
}

fn is_na(raw: &str) -> bool {
    matches!(raw, "NA" | "na" | "NaN" | "nan" | "null" | "NULL" | ".")
}

/// Maps arbitrary string labels to integer ids in order of first appearance.
#[derive(Default)]
struct Labeler {
    seen: HashMap<String, i64>,
    ids: Vec<i64>,
}

impl Labeler {
    fn push(&mut self, raw: &str) {
        let next = self.seen.len() as i64;
        let id = *self.seen.entry(raw.to_string()).or_insert(next);
        self.ids.push(id);
    }
}

/// Assignment of each observation to one of `num_folds` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub num_folds: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Rows belonging to fold `fold`, ascending.
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] == fold).collect()
    }

    /// Rows outside fold `fold`, ascending. These train the nuisances that
    /// are evaluated on `fold`.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Build a reproducible fold plan.
///
/// Plain plans shuffle rows and deal them round-robin. With `strata`, rows
/// are shuffled, stably sorted by stratum and dealt round-robin so every
/// stratum is spread across folds. With `groups`, whole groups are dealt the
/// same way (sorted by the stratum of their first row when strata are given)
/// so rows sharing a label always land in the same fold.
pub fn make_fold_plan(
    n: usize,
    num_folds: usize,
    seed: u64,
    groups: Option<&[i64]>,
    strata: Option<&[i64]>,
) -> Result<FoldPlan> {
    if num_folds < 2 {
        return Err(Error::InvalidFolds(format!("need at least 2 folds, got {num_folds}")));
    }
    if num_folds > n {
        return Err(Error::InvalidFolds(format!("{num_folds} folds for {n} rows")));
    }
    for (name, v) in [("groups", groups), ("strata", strata)] {
        if let Some(v) = v {
            if v.len() != n {
                return Err(Error::InvalidFolds(format!("{name} length {} != n {n}", v.len())));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; n];

    match groups {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            if let Some(strata) = strata {
                order.sort_by_key(|&i| strata[i]);
            }
            for (pos, &i) in order.iter().enumerate() {
                assignment[i] = pos % num_folds;
            }
        }
        Some(groups) => {
            let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
            for (i, &g) in groups.iter().enumerate() {
                members.entry(g).or_default().push(i);
            }
            if members.len() < num_folds {
                return Err(Error::InvalidFolds(format!(
                    "{} distinct groups for {num_folds} folds",
                    members.len()
                )));
            }
            let mut order: Vec<(i64, Vec<usize>)> = members.into_iter().collect();
            order.shuffle(&mut rng);
            match strata {
                Some(strata) => {
                    order.sort_by_key(|(_, rows)| strata[rows[0]]);
                    for (pos, (_, rows)) in order.iter().enumerate() {
                        for &i in rows {
                            assignment[i] = pos % num_folds;
                        }
                    }
                }
                None => {
                    // Largest-first into the currently smallest fold keeps sizes close.
                    order.sort_by_key(|(_, rows)| std::cmp::Reverse(rows.len()));
                    let mut sizes = vec![0usize; num_folds];
                    for (_, rows) in &order {
                        let fold = (0..num_folds).min_by_key(|&f| (sizes[f], f)).unwrap();
                        sizes[fold] += rows.len();
                        for &i in rows {
                            assignment[i] = fold;
                        }
                    }
                }
            }
        }
    }
    Ok(FoldPlan { n, num_folds, assignment, seed })
}

/// Fold plan matching a dataset's own group and stratum columns.
pub fn fold_plan_for(data: &Dataset, num_folds: usize, seed: u64) -> Result<FoldPlan> {
    make_fold_plan(data.n(), num_folds, seed, data.group_label(), data.stratum())
}
