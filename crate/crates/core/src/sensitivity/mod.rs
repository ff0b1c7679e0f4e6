//! Omitted-variable bias bounds for a short estimate `θ̂_s` given assumptions
//! about how much variation the latent confounders explain.
//!
//! With `S² = σ²_s·ν²_s` the bias is bounded by `|ρ|·S·C_Y·C_D`, so all of
//! the sensitivity outputs are arithmetic on three DML estimates.

pub mod benchmark;
pub mod contour;
pub mod eta;
pub mod rv;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dml::{Components, DmlEstimate};
use crate::error::{Error, Result};
use crate::stats::normal_quantile;

pub use benchmark::{benchmark_covariates, BenchmarkRow, BenchmarkValues, ImpliedBound};
pub use contour::{contour_grid, Axis, ContourGrid, Quantity};
pub use eta::{eta_nonparametric, eta_squared, partial_eta};
pub use rv::{robustness_value, rv_a};

/// Confounding strength, either directly or through nonparametric partial
/// R² values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Strength {
    Direct { cy2: f64, cd2: f64 },
    /// `cd2 = η²_D / (1 − η²_D)`.
    Eta { eta_y2: f64, eta_d2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct SensitivityParams {
    pub rho_abs: f64,
    #[serde(flatten)]
    pub strength: Strength,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    rho_abs: Option<f64>,
    cy2: Option<f64>,
    cd2: Option<f64>,
    eta_y2: Option<f64>,
    eta_d2: Option<f64>,
}

impl TryFrom<RawParams> for SensitivityParams {
    type Error = String;

    fn try_from(r: RawParams) -> std::result::Result<Self, String> {
        let strength = match (r.cy2, r.cd2, r.eta_y2, r.eta_d2) {
            (Some(cy2), Some(cd2), None, None) => Strength::Direct { cy2, cd2 },
            (None, None, Some(eta_y2), Some(eta_d2)) => Strength::Eta { eta_y2, eta_d2 },
            _ => return Err("give either cy2 and cd2, or eta_y2 and eta_d2".into()),
        };
        let p = SensitivityParams { rho_abs: r.rho_abs.unwrap_or(1.0), strength };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

impl SensitivityParams {
    pub fn direct(cy2: f64, cd2: f64, rho_abs: f64) -> Self {
        SensitivityParams { rho_abs, strength: Strength::Direct { cy2, cd2 } }
    }

    pub fn eta(eta_y2: f64, eta_d2: f64, rho_abs: f64) -> Self {
        SensitivityParams { rho_abs, strength: Strength::Eta { eta_y2, eta_d2 } }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidInput(format!("{what} = {v} is out of range")));
        if !(0.0..=1.0).contains(&self.rho_abs) {
            return bad("rho_abs", self.rho_abs);
        }
        match self.strength {
            Strength::Direct { cy2, cd2 } => {
                if !(0.0..=1.0).contains(&cy2) {
                    return bad("cy2", cy2);
                }
                if !(cd2 >= 0.0 && cd2.is_finite()) {
                    return bad("cd2", cd2);
                }
            }
            Strength::Eta { eta_y2, eta_d2 } => {
                if !(0.0..=1.0).contains(&eta_y2) {
                    return bad("eta_y2", eta_y2);
                }
                if !(0.0..1.0).contains(&eta_d2) {
                    return bad("eta_d2", eta_d2);
                }
            }
        }
        Ok(())
    }

    /// `(C²_Y, C²_D)`.
    pub fn c2(&self) -> (f64, f64) {
        match self.strength {
            Strength::Direct { cy2, cd2 } => (cy2, cd2),
            Strength::Eta { eta_y2, eta_d2 } => (eta_y2, cd2_from_eta(eta_d2)),
        }
    }

    /// `|ρ|·C_Y·C_D`, the multiplier on `S`.
    pub fn factor(&self) -> f64 {
        let (cy2, cd2) = self.c2();
        self.rho_abs * (cy2 * cd2).sqrt()
    }
}

pub fn cd2_from_eta(eta_d2: f64) -> f64 {
    eta_d2 / (1.0 - eta_d2)
}

pub fn eta_from_cd2(cd2: f64) -> f64 {
    cd2 / (1.0 + cd2)
}

/// `|ρ|·S·C_Y·C_D`.
pub fn bias_bound(scale: f64, params: &SensitivityParams) -> f64 {
    params.factor() * scale
}

/// `(θ_−, θ_+)` from a point estimate and scale alone.
pub fn point_bounds(theta_s: f64, scale: f64, params: &SensitivityParams) -> (f64, f64) {
    let b = bias_bound(scale, params);
    (theta_s - b, theta_s + b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsResult {
    pub theta_s: f64,
    pub se_theta_s: f64,
    pub sigma2: f64,
    pub nu2: f64,
    pub scale: f64,
    pub cy2: f64,
    pub cd2: f64,
    pub rho_abs: f64,
    pub bias_bound: f64,
    pub theta_minus: f64,
    pub theta_plus: f64,
    pub se_minus: f64,
    pub se_plus: f64,
    /// Coverage level `1 − a` of each one-sided bound.
    pub level: f64,
    pub conf_lower: f64,
    pub conf_upper: f64,
    #[serde(skip)]
    pub influence_minus: Array1<f64>,
    #[serde(skip)]
    pub influence_plus: Array1<f64>,
}

fn check_level(a: f64) -> Result<()> {
    if !(a > 0.0 && a <= 0.5) {
        return Err(Error::InvalidInput(format!("one-sided level a = {a} must lie in (0, 0.5]")));
    }
    Ok(())
}

pub(crate) fn check_inputs(theta: &DmlEstimate, sigma2: &DmlEstimate, nu2: &DmlEstimate) -> Result<()> {
    for (what, e) in [("sigma2", sigma2), ("nu2", nu2)] {
        if !(e.value > 0.0) {
            return Err(Error::NonPositive {
                what,
                value: e.value,
                hint: "the bounds need positive variance estimates".into(),
            });
        }
    }
    if theta.n() != sigma2.n() || theta.n() != nu2.n() {
        return Err(Error::InvalidInput("influence vectors have different lengths".into()));
    }
    Ok(())
}

/// Bounds and one-sided confidence bounds with level `1 − a` each.
///
/// The bound estimators have influence
/// `φ± = ψ_θ ± (|ρ|C_Y C_D / 2S)(σ²ψ_ν + ν²ψ_σ)`.
pub fn compute_bounds(
    theta: &DmlEstimate,
    sigma2: &DmlEstimate,
    nu2: &DmlEstimate,
    params: &SensitivityParams,
    a: f64,
) -> Result<BoundsResult> {
    params.validate()?;
    check_level(a)?;
    check_inputs(theta, sigma2, nu2)?;
    let (cy2, cd2) = params.c2();
    let (s2, v2) = (sigma2.value, nu2.value);
    let scale = (s2 * v2).sqrt();
    let factor = params.factor();
    let bias = factor * scale;
    let slope = factor / (2.0 * scale);
    let dscale = &nu2.influence * s2 + &sigma2.influence * v2;
    let influence_minus = &theta.influence - &(&dscale * slope);
    let influence_plus = &theta.influence + &(&dscale * slope);
    let n = theta.n() as f64;
    let se = |phi: &Array1<f64>| (phi.mapv(|v| v * v).sum()).sqrt() / n;
    let (se_minus, se_plus) = (se(&influence_minus), se(&influence_plus));
    let z = normal_quantile(1.0 - a);
    let theta_minus = theta.value - bias;
    let theta_plus = theta.value + bias;
    Ok(BoundsResult {
        theta_s: theta.value,
        se_theta_s: theta.std_error,
        sigma2: s2,
        nu2: v2,
        scale,
        cy2,
        cd2,
        rho_abs: params.rho_abs,
        bias_bound: bias,
        theta_minus,
        theta_plus,
        se_minus,
        se_plus,
        level: 1.0 - a,
        conf_lower: theta_minus - z * se_minus,
        conf_upper: theta_plus + z * se_plus,
        influence_minus,
        influence_plus,
    })
}

pub fn bounds_for(components: &Components, params: &SensitivityParams, a: f64) -> Result<BoundsResult> {
    compute_bounds(&components.theta, &components.sigma2, &components.nu2, params, a)
}
