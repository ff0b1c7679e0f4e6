//! Turning a config into the three component estimates, and those into the
//! versioned `report.json`.

use ndarray::Array1;
use ovbound::dml::{estimate, DmlEstimate, PipelineDiagnostics, Score};
use ovbound::sensitivity::{compute_bounds, eta_from_cd2, robustness_value, rv_a};
use ovbound::stats::normal_quantile;
use ovbound::synth::{generate, OracleBundle};
use ovbound::{load_csv, Dataset};
use serde::Serialize;

use crate::config::{AnalysisConfig, DataSource, Summary};
use crate::Result;

pub const SCHEMA_VERSION: u32 = 1;

/// Component estimates ready for the sensitivity step.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub source: &'static str,
    pub theta: DmlEstimate,
    pub sigma2: DmlEstimate,
    pub nu2: DmlEstimate,
    pub diagnostics: Option<PipelineDiagnostics>,
    pub data: Option<Dataset>,
    pub oracle: Option<OracleBundle>,
}

impl Prepared {
    pub fn scale(&self) -> f64 {
        (self.sigma2.value * self.nu2.value).sqrt()
    }

    pub fn n(&self) -> Option<usize> {
        self.data.as_ref().map(Dataset::n)
    }
}

/// Two-point influence vectors reproducing a summary's estimate and SE.
/// `σ²` and `ν²` get zero influence, so their sampling error is ignored.
fn summary_estimates(s: &Summary) -> Result<(DmlEstimate, DmlEstimate, DmlEstimate)> {
    let (sigma2, nu2) = s.sigma2_nu2()?;
    let c = std::f64::consts::SQRT_2 * s.se;
    let fixed = |score, value| DmlEstimate {
        score,
        value,
        influence: Array1::zeros(2),
        std_error: 0.0,
        folds: 0,
    };
    let theta = DmlEstimate {
        score: Score::Theta,
        value: s.theta_s,
        influence: Array1::from(vec![c, -c]),
        std_error: s.se,
        folds: 0,
    };
    Ok((theta, fixed(Score::Sigma2, sigma2), fixed(Score::Nu2, nu2)))
}

pub fn prepare(cfg: &AnalysisConfig) -> Result<Prepared> {
    let (source, data, oracle) = match &cfg.data {
        DataSource::Summary(s) => {
            let (theta, sigma2, nu2) = summary_estimates(s)?;
            return Ok(Prepared { source: "summary", theta, sigma2, nu2, diagnostics: None, data: None, oracle: None });
        }
        DataSource::Csv { path, schema } => ("csv", load_csv(path, schema)?, None),
        DataSource::Synthetic(spec) => {
            let (data, oracle) = generate(spec)?;
            ("synthetic", data, Some(oracle))
        }
    };
    let c = estimate(&data, &cfg.functional, &cfg.engine)?;
    Ok(Prepared {
        source,
        theta: c.theta,
        sigma2: c.sigma2,
        nu2: c.nu2,
        diagnostics: Some(c.diagnostics),
        data: Some(data),
        oracle,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateBlock {
    pub theta_s: f64,
    pub se: f64,
    pub t_value: f64,
    pub sigma2: f64,
    pub se_sigma2: f64,
    pub nu2: f64,
    pub se_nu2: f64,
    /// `Ŝ = (σ̂²ν̂²)^{1/2}`.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioBlock {
    pub label: Option<String>,
    pub rho_abs: f64,
    pub cy2: f64,
    pub cd2: f64,
    pub eta_d2: f64,
    pub bias_bound: f64,
    pub theta_minus: f64,
    pub theta_plus: f64,
    pub se_minus: f64,
    pub se_plus: f64,
    pub conf_lower: f64,
    pub conf_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RvBlock {
    pub threshold: f64,
    pub rv: Option<f64>,
    pub rv_a: Option<f64>,
    pub error: Option<String>,
}

/// Population values of a synthetic design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthBlock {
    pub theta: f64,
    pub theta_s: f64,
    pub bias: f64,
    pub scale: f64,
    pub cy2: f64,
    pub cd2: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub source: String,
    pub functional: String,
    pub n: Option<usize>,
    /// One-sided level of each confidence bound.
    pub a: f64,
    pub z: f64,
    pub estimate: EstimateBlock,
    pub scenarios: Vec<ScenarioBlock>,
    pub robustness_values: Vec<RvBlock>,
    pub diagnostics: Option<PipelineDiagnostics>,
    pub truth: Option<TruthBlock>,
    pub notes: Vec<String>,
}

pub fn build(prep: &Prepared, cfg: &AnalysisConfig) -> Result<Report> {
    let (t, s2, v2) = (&prep.theta, &prep.sigma2, &prep.nu2);
    let scale = prep.scale();
    let scenarios = cfg
        .scenarios
        .iter()
        .map(|sc| {
            let b = compute_bounds(t, s2, v2, &sc.params, cfg.a)?;
            Ok(ScenarioBlock {
                label: sc.label.clone(),
                rho_abs: b.rho_abs,
                cy2: b.cy2,
                cd2: b.cd2,
                eta_d2: eta_from_cd2(b.cd2),
                bias_bound: b.bias_bound,
                theta_minus: b.theta_minus,
                theta_plus: b.theta_plus,
                se_minus: b.se_minus,
                se_plus: b.se_plus,
                conf_lower: b.conf_lower,
                conf_upper: b.conf_upper,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let robustness_values = cfg
        .thresholds
        .iter()
        .map(|&v| {
            let rv = robustness_value(t.value, scale, v);
            let ra = rv_a(t, s2, v2, v, cfg.a);
            let error = rv.as_ref().err().or(ra.as_ref().err()).map(|e| e.to_string());
            RvBlock { threshold: v, rv: rv.ok(), rv_a: ra.ok(), error }
        })
        .collect();

    let mut notes = vec![
        "cd2 measures the relative gain in the second moment of the Riesz representer from the omitted variables; \
         eta_d2 = cd2 / (1 + cd2) is the same strength on the partial R2 scale."
            .to_string(),
        "Robustness values give the smallest equal strength eta_y2 = eta_d2 (with |rho| = 1) that moves the bound, \
         or the confidence bound for rv_a, to the threshold."
            .to_string(),
    ];
    if prep.source == "summary" {
        notes.push(
            "Built from summary estimates: confidence bounds carry the sampling error of theta_s only, not that of S."
                .into(),
        );
    }
    let functional = match &prep.diagnostics {
        Some(d) => d.functional.clone(),
        None => cfg.functional.name().to_string(),
    };
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        source: prep.source.into(),
        functional,
        n: prep.n(),
        a: cfg.a,
        z: normal_quantile(1.0 - cfg.a),
        estimate: EstimateBlock {
            theta_s: t.value,
            se: t.std_error,
            t_value: t.t_value(),
            sigma2: s2.value,
            se_sigma2: s2.std_error,
            nu2: v2.value,
            se_nu2: v2.std_error,
            scale,
        },
        scenarios,
        robustness_values,
        diagnostics: prep.diagnostics.clone(),
        truth: prep.oracle.as_ref().map(|o| TruthBlock {
            theta: o.theta,
            theta_s: o.theta_s,
            bias: o.bias(),
            scale: o.scale(),
            cy2: o.cy2,
            cd2: o.cd2,
            rho: o.rho,
        }),
        notes,
    })
}
