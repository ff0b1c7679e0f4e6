//! The four subcommands. Each writes its files into the output directory
//! and also returns what it computed.

use std::path::{Path, PathBuf};

use ovbound::sensitivity::{benchmark_covariates, compute_bounds, contour_grid, BenchmarkRow, ContourGrid, SensitivityParams};
use ovbound::synth::{coverage_experiment, CoverageConfig, CoverageSummary};

use crate::config::{AnalysisConfig, DataSource};
use crate::json::{self, format_f64};
use crate::report::{build, prepare, Prepared, Report};
use crate::svg::{render, Marker};
use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Contour,
    Benchmark,
    Simulate,
}

#[derive(Debug, Clone)]
pub struct Options {
    pub config: PathBuf,
    pub out: PathBuf,
    /// Replaces the engine seed of the config.
    pub seed: Option<u64>,
}

/// Loads the config, runs `cmd` and returns the files written.
pub fn run(cmd: Command, opts: &Options) -> Result<Vec<PathBuf>> {
    let mut cfg = AnalysisConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.engine.seed = seed;
    }
    std::fs::create_dir_all(&opts.out).map_err(|source| CliError::Output { path: opts.out.clone(), source })?;
    let out = opts.out.as_path();
    Ok(match cmd {
        Command::Analyze => {
            analyze(&cfg, out)?;
            vec![out.join("report.json")]
        }
        Command::Contour => {
            contour(&cfg, out)?;
            let mut files = vec![out.join("contour.csv")];
            if cfg.contour.svg {
                files.push(out.join("contour.svg"));
            }
            files
        }
        Command::Benchmark => {
            benchmark(&cfg, out)?;
            vec![out.join("benchmark.csv")]
        }
        Command::Simulate => {
            simulate(&cfg, out)?;
            vec![out.join("coverage.csv"), out.join("coverage_summary.json")]
        }
    })
}

fn write(path: PathBuf, contents: &[u8]) -> Result<()> {
    std::fs::write(&path, contents).map_err(|source| CliError::Output { path, source })
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format_f64(v)
    } else {
        String::new()
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn analyze(cfg: &AnalysisConfig, out: &Path) -> Result<Report> {
    let report = build(&prepare(cfg)?, cfg)?;
    write(out.join("report.json"), json::to_string(&report).as_bytes())?;
    Ok(report)
}

fn grid_for(prep: &Prepared, cfg: &AnalysisConfig) -> Result<ContourGrid> {
    let c = &cfg.contour;
    Ok(contour_grid(
        &prep.theta,
        &prep.sigma2,
        &prep.nu2,
        c.rho_abs,
        cfg.a,
        &c.eta_d2,
        &c.eta_y2,
        c.quantity,
        cfg.contour_threshold(),
    )?)
}

/// Writes `contour.csv` in long format and, if enabled, `contour.svg` with
/// benchmark points when a benchmark block is configured.
pub fn contour(cfg: &AnalysisConfig, out: &Path) -> Result<ContourGrid> {
    let prep = prepare(cfg)?;
    let grid = grid_for(&prep, cfg)?;
    let q = grid.quantity;
    let rows: Vec<Vec<String>> =
        grid.cells.iter().map(|c| vec![num(c.eta_d2), num(c.eta_y2), num(c.get(q))]).collect();
    write(out.join("contour.csv"), &csv_bytes(&["eta_d2", "eta_y2", "value"], &rows))?;
    if cfg.contour.svg {
        let mut markers = Vec::new();
        if let (Some(b), Some(_)) = (&cfg.benchmark, &prep.data) {
            for row in benchmark_rows(&prep, cfg)? {
                if let Some(v) = &row.values {
                    for &k in &b.multipliers {
                        let ib = v.implied_bound(k);
                        markers.push(Marker { label: format!("{} x{k}", row.covariate), eta_d2: ib.eta_d2, eta_y2: ib.eta_y2 });
                    }
                }
            }
        }
        write(out.join("contour.svg"), render(&grid, cfg.contour.levels, &markers).as_bytes())?;
    }
    Ok(grid)
}

fn benchmark_rows(prep: &Prepared, cfg: &AnalysisConfig) -> Result<Vec<BenchmarkRow>> {
    let b = cfg.benchmark.as_ref().ok_or_else(|| CliError::Config("no benchmark block in config".into()))?;
    let data = prep
        .data
        .as_ref()
        .ok_or_else(|| CliError::Unsupported("benchmarking needs row-level data, not a summary".into()))?;
    Ok(benchmark_covariates(data, &cfg.functional, &cfg.engine, &b.covariates)?)
}

const BENCHMARK_HEADER: [&str; 16] = [
    "covariate",
    "k",
    "delta_eta2_y",
    "delta_eta2_d",
    "rho",
    "delta_theta",
    "theta_reduced",
    "eta_y2",
    "eta_d2",
    "rho_abs",
    "bias_bound",
    "theta_minus",
    "theta_plus",
    "conf_lower",
    "conf_upper",
    "error",
];

/// One row per covariate and multiplier `k`, with the bounds implied by
/// confounding `k` times as strong as the covariate.
pub fn benchmark(cfg: &AnalysisConfig, out: &Path) -> Result<Vec<BenchmarkRow>> {
    let prep = prepare(cfg)?;
    let rows = benchmark_rows(&prep, cfg)?;
    let multipliers = &cfg.benchmark.as_ref().expect("checked in benchmark_rows").multipliers;
    let mut table = Vec::new();
    for row in &rows {
        let Some(v) = &row.values else {
            let mut r = vec![row.covariate.clone()];
            r.resize(BENCHMARK_HEADER.len() - 1, String::new());
            r.push(opt(row.error.as_ref()));
            table.push(r);
            continue;
        };
        for &k in multipliers {
            let ib = v.implied_bound(k);
            let b = compute_bounds(
                &prep.theta,
                &prep.sigma2,
                &prep.nu2,
                &SensitivityParams::eta(ib.eta_y2, ib.eta_d2, ib.rho_abs),
                cfg.a,
            )?;
            table.push(vec![
                row.covariate.clone(),
                num(k),
                num(v.delta_eta2_y),
                num(v.delta_eta2_d),
                num(v.rho),
                num(v.delta_theta),
                num(v.theta_reduced),
                num(ib.eta_y2),
                num(ib.eta_d2),
                num(ib.rho_abs),
                num(b.bias_bound),
                num(b.theta_minus),
                num(b.theta_plus),
                num(b.conf_lower),
                num(b.conf_upper),
                String::new(),
            ]);
        }
    }
    write(out.join("benchmark.csv"), &csv_bytes(&BENCHMARK_HEADER, &table))?;
    Ok(rows)
}

/// Monte Carlo coverage of the confidence bounds on the synthetic design.
pub fn simulate(cfg: &AnalysisConfig, out: &Path) -> Result<CoverageSummary> {
    let sim = cfg.simulate.as_ref().ok_or_else(|| CliError::Config("no simulate block in config".into()))?;
    let DataSource::Synthetic(spec) = &cfg.data else {
        return Err(CliError::Config("simulate needs a synthetic data source".into()));
    };
    let summary = coverage_experiment(&CoverageConfig {
        synth: spec.clone(),
        reps: sim.reps,
        functional: cfg.functional.clone(),
        engine: cfg.engine.clone(),
        a: cfg.a,
        params: sim.params,
        mode: sim.mode,
    })?;
    let rows: Vec<Vec<String>> = summary
        .records
        .iter()
        .map(|r| {
            vec![
                r.rep.to_string(),
                r.data_seed.to_string(),
                opt_num(r.theta_s_hat),
                opt_num(r.se),
                opt_num(r.sigma2_hat),
                opt_num(r.nu2_hat),
                opt_num(r.conf_lower),
                opt_num(r.conf_upper),
                opt(r.covers_theta_s),
                opt(r.lower_holds),
                opt(r.upper_holds),
                opt(r.covers_theta),
                opt(r.error.as_ref()),
            ]
        })
        .collect();
    let header = [
        "rep",
        "data_seed",
        "theta_s_hat",
        "se",
        "sigma2_hat",
        "nu2_hat",
        "conf_lower",
        "conf_upper",
        "covers_theta_s",
        "lower_holds",
        "upper_holds",
        "covers_theta",
        "error",
    ];
    write(out.join("coverage.csv"), &csv_bytes(&header, &rows))?;
    write(out.join("coverage_summary.json"), json::to_string(&summary).as_bytes())?;
    Ok(summary)
}
