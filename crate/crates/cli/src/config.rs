//! The JSON analysis configuration. Everything is validated before any
//! estimation starts, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use ovbound::dml::EngineConfig;
use ovbound::sensitivity::{Axis, Quantity, SensitivityParams};
use ovbound::synth::{NuisanceMode, SynthSpec};
use ovbound::{FunctionalSpec, Schema};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub data: DataSource,
    #[serde(default = "default_functional")]
    pub functional: FunctionalSpec,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
    /// Null values for robustness values.
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// One-sided level of each confidence bound.
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default)]
    pub contour: ContourConfig,
    #[serde(default)]
    pub benchmark: Option<BenchmarkConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

fn default_functional() -> FunctionalSpec {
    FunctionalSpec::PlmCoefficient
}

fn default_thresholds() -> Vec<f64> {
    vec![0.0]
}

fn default_a() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A CSV file; a relative path is resolved against the config file.
    Csv { path: PathBuf, schema: Schema },
    Synthetic(SynthSpec),
    /// Component estimates computed elsewhere.
    Summary(Summary),
}

/// Externally computed estimates. Give `scale`, or `sigma2` and `nu2`.
/// Confidence bounds built from a summary only carry the sampling error of
/// `θ̂_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub theta_s: f64,
    pub se: f64,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub sigma2: Option<f64>,
    #[serde(default)]
    pub nu2: Option<f64>,
}

impl Summary {
    pub fn sigma2_nu2(&self) -> Result<(f64, f64), CliError> {
        match (self.scale, self.sigma2, self.nu2) {
            (Some(s), None, None) => Ok((s, s)),
            (None, Some(s2), Some(v2)) => Ok((s2, v2)),
            _ => Err(CliError::Config("summary needs either `scale` or both `sigma2` and `nu2`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub label: Option<String>,
    pub params: SensitivityParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContourConfig {
    pub eta_d2: Axis,
    pub eta_y2: Axis,
    pub quantity: Quantity,
    /// Highlighted level; defaults to the first threshold.
    pub threshold: Option<f64>,
    pub rho_abs: f64,
    pub svg: bool,
    /// Number of ordinary iso-lines drawn besides the critical one.
    pub levels: usize,
}

impl Default for ContourConfig {
    fn default() -> Self {
        ContourConfig {
            eta_d2: Axis::default(),
            eta_y2: Axis::default(),
            quantity: Quantity::default(),
            threshold: None,
            rho_abs: 1.0,
            svg: true,
            levels: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub covariates: Vec<String>,
    #[serde(default = "default_multipliers")]
    pub multipliers: Vec<f64>,
}

fn default_multipliers() -> Vec<f64> {
    vec![1.0, 2.0, 3.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub reps: usize,
    /// Assumed strength; defaults to the design's true strength.
    #[serde(default)]
    pub params: Option<SensitivityParams>,
    #[serde(default)]
    pub mode: NuisanceMode,
}

impl AnalysisConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: AnalysisConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let DataSource::Csv { path: data, .. } = &mut cfg.data {
            if data.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                *data = base.join(&*data);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.a > 0.0 && self.a <= 0.5) {
            return bad(format!("a = {} must lie in (0, 0.5]", self.a));
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) {
            return bad("thresholds must be finite".into());
        }
        self.engine.validate()?;
        for s in &self.scenarios {
            s.params.validate()?;
        }
        self.contour.eta_d2.validate("eta_d2")?;
        self.contour.eta_y2.validate("eta_y2")?;
        if !(0.0..=1.0).contains(&self.contour.rho_abs) {
            return bad("contour rho_abs must lie in [0, 1]".into());
        }
        match &self.data {
            DataSource::Summary(s) => {
                s.sigma2_nu2()?;
                if !(s.se >= 0.0) || !s.theta_s.is_finite() {
                    return bad("summary needs a finite theta_s and se >= 0".into());
                }
            }
            DataSource::Synthetic(spec) if spec.n < 2 => return bad("synthetic n must be at least 2".into()),
            _ => {}
        }
        if let Some(b) = &self.benchmark {
            if b.covariates.is_empty() {
                return bad("benchmark needs at least one covariate".into());
            }
            if b.multipliers.iter().any(|k| !(*k >= 0.0)) {
                return bad("benchmark multipliers must be non-negative".into());
            }
        }
        if let Some(s) = &self.simulate {
            if !matches!(self.data, DataSource::Synthetic(_)) {
                return bad("simulate needs a synthetic data source".into());
            }
            if s.reps < 100 {
                return bad(format!("simulate needs at least 100 replications, got {}", s.reps));
            }
        }
        Ok(())
    }

    pub fn contour_threshold(&self) -> f64 {
        self.contour.threshold.or(self.thresholds.first().copied()).unwrap_or(0.0)
    }
}
