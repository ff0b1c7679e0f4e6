//! Bounds evaluated over a grid of `(η²_D, η²_Y)` values.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dml::DmlEstimate;
use crate::error::{Error, Result};

use super::{check_inputs, compute_bounds, SensitivityParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Default for Axis {
    fn default() -> Self {
        Axis { min: 0.0, max: 0.25, steps: 51 }
    }
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.min];
        }
        let h = (self.max - self.min) / (self.steps - 1) as f64;
        (0..self.steps).map(|i| if i + 1 == self.steps { self.max } else { self.min + h * i as f64 }).collect()
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.steps == 0 || !(self.min >= 0.0) || !(self.max < 1.0) || self.min > self.max {
            return Err(Error::InvalidInput(format!(
                "{name} axis must satisfy 0 <= min <= max < 1 with at least one step"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Bias,
    #[default]
    Lower,
    Upper,
    ConfLower,
    ConfUpper,
}

impl Quantity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quantity::Bias => "bias",
            Quantity::Lower => "lower",
            Quantity::Upper => "upper",
            Quantity::ConfLower => "conf_lower",
            Quantity::ConfUpper => "conf_upper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContourCell {
    pub eta_d2: f64,
    pub eta_y2: f64,
    pub bias: f64,
    pub lower: f64,
    pub upper: f64,
    pub conf_lower: f64,
    pub conf_upper: f64,
}

impl ContourCell {
    pub fn get(&self, q: Quantity) -> f64 {
        match q {
            Quantity::Bias => self.bias,
            Quantity::Lower => self.lower,
            Quantity::Upper => self.upper,
            Quantity::ConfLower => self.conf_lower,
            Quantity::ConfUpper => self.conf_upper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContourGrid {
    pub eta_d2: Vec<f64>,
    pub eta_y2: Vec<f64>,
    pub quantity: Quantity,
    /// Level of the highlighted contour, usually the null value.
    pub threshold: f64,
    pub rho_abs: f64,
    pub level: f64,
    /// Row-major with `η²_Y` as the slow index.
    pub cells: Vec<ContourCell>,
}

impl ContourGrid {
    /// Values of `q` as a `(η²_Y, η²_D)` matrix.
    pub fn values(&self, q: Quantity) -> Array2<f64> {
        let nd = self.eta_d2.len();
        Array2::from_shape_fn((self.eta_y2.len(), nd), |(i, j)| self.cells[i * nd + j].get(q))
    }

    pub fn cell(&self, iy: usize, jd: usize) -> &ContourCell {
        &self.cells[iy * self.eta_d2.len() + jd]
    }

    /// Where the chosen quantity first crosses the threshold along the
    /// diagonal `η²_D = η²_Y`, linearly interpolated. Requires equal axes.
    pub fn diagonal_crossing(&self) -> Option<f64> {
        if self.eta_d2 != self.eta_y2 {
            return None;
        }
        let f = |i: usize| self.cell(i, i).get(self.quantity) - self.threshold;
        let r = &self.eta_d2;
        let mut prev = f(0);
        if prev == 0.0 {
            return Some(r[0]);
        }
        for i in 1..r.len() {
            let cur = f(i);
            if cur == 0.0 || cur.signum() != prev.signum() {
                return Some(r[i - 1] + (r[i] - r[i - 1]) * prev / (prev - cur));
            }
            prev = cur;
        }
        None
    }
}

#[allow(clippy::too_many_arguments)]
pub fn contour_grid(
    theta: &DmlEstimate,
    sigma2: &DmlEstimate,
    nu2: &DmlEstimate,
    rho_abs: f64,
    a: f64,
    d_axis: &Axis,
    y_axis: &Axis,
    quantity: Quantity,
    threshold: f64,
) -> Result<ContourGrid> {
    check_inputs(theta, sigma2, nu2)?;
    d_axis.validate("eta_d2")?;
    y_axis.validate("eta_y2")?;
    let ds = d_axis.values();
    let ys = y_axis.values();
    let rows: Vec<Vec<ContourCell>> = ys
        .par_iter()
        .map(|&ey| {
            ds.iter()
                .map(|&ed| {
                    let b = compute_bounds(theta, sigma2, nu2, &SensitivityParams::eta(ey, ed, rho_abs), a)?;
                    Ok(ContourCell {
                        eta_d2: ed,
                        eta_y2: ey,
                        bias: b.bias_bound,
                        lower: b.theta_minus,
                        upper: b.theta_plus,
                        conf_lower: b.conf_lower,
                        conf_upper: b.conf_upper,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(ContourGrid {
        eta_d2: ds,
        eta_y2: ys,
        quantity,
        threshold,
        rho_abs,
        level: 1.0 - a,
        cells: rows.into_iter().flatten().collect(),
    })
}
