//! Synthetic data with known long and short models, used to check bounds,
//! coverage and sharpness against population truth.
//!
//! Every design draws `X ~ N(0, I_p)` and two latent confounders `A = (A₁, A₂)`.
//! `A₁` moves the treatment and the outcome; `A₂` only the outcome. The
//! returned [`OracleBundle`] holds the population short and long nuisances
//! and the strength parameters they imply.

use std::sync::Arc;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fold_plan_for, Dataset};
use crate::dml::{dml_solve, estimate, EngineConfig, NuisanceFit, Score};
use crate::error::{Error, Result};
use crate::functionals::{function, EvaluableFunction, Functional, FunctionalSpec};
use crate::seed::derive_seed;
use crate::sensitivity::{compute_bounds, SensitivityParams};
use crate::stats::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dgp {
    /// `Y = θD + β_Y'X + γ₁A₁ + γ₂A₂ + ε`, `D = β_D'X + δA₁ + u`.
    PlmGaussian,
    /// Binary `A₁ ~ Bernoulli(q)`, `logit P(D=1|X,A) = β_D'X + δ(A₁ − q)`.
    BinaryAteLogit,
    /// As the Gaussian design with `D` shifted by one and a `λD²` term, so
    /// the average derivative differs from the coefficient.
    AcdGaussian,
}

/// True confounding strength. `rho` is `Cor(g − g_s, α − α_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthStrength {
    R2 { cy2: f64, cd2: f64, rho: f64 },
    Bias { b_g: f64, b_alpha: f64, rho: f64 },
    Coefficients { gamma1: f64, gamma2: f64, delta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub dgp: Dgp,
    pub n: usize,
    pub p: usize,
    pub strength: SynthStrength,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_theta() -> f64 {
    1.0
}

/// Population quantities of a synthetic design plus the realized latents.
#[derive(Clone)]
pub struct OracleBundle {
    /// Target in the long model.
    pub theta: f64,
    /// Target of the short analysis.
    pub theta_s: f64,
    pub sigma2_s: f64,
    pub nu2_s: f64,
    pub nu2: f64,
    pub b_g: f64,
    pub b_alpha: f64,
    pub rho: f64,
    pub cy2: f64,
    pub cd2: f64,
    /// `n × 2` matrix of `(A₁, A₂)`.
    pub latent: Array2<f64>,
    /// Functions of short rows `(D, X)`.
    pub g_short: Arc<dyn EvaluableFunction>,
    pub alpha_short: Arc<dyn EvaluableFunction>,
    /// Functions of long rows `(D, X, A₁, A₂)`.
    pub g_long: Arc<dyn EvaluableFunction>,
    pub alpha_long: Arc<dyn EvaluableFunction>,
}

impl std::fmt::Debug for OracleBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleBundle")
            .field("theta", &self.theta)
            .field("theta_s", &self.theta_s)
            .field("b_g", &self.b_g)
            .field("b_alpha", &self.b_alpha)
            .field("rho", &self.rho)
            .finish_non_exhaustive()
    }
}

impl OracleBundle {
    /// `S = (σ²_s ν²_s)^{1/2}` at the population values.
    pub fn scale(&self) -> f64 {
        (self.sigma2_s * self.nu2_s).sqrt()
    }

    /// `θ_s − θ`.
    pub fn bias(&self) -> f64 {
        self.theta_s - self.theta
    }

    pub fn params(&self) -> SensitivityParams {
        SensitivityParams::direct(self.cy2, self.cd2, self.rho.abs().min(1.0))
    }

    /// `(D, X, A₁, A₂)` for each row of `data`.
    pub fn long_rows(&self, data: &Dataset) -> Array2<f64> {
        concatenate(Axis(1), &[data.short_rows(), self.latent.view()]).expect("row counts agree")
    }

    /// `E_n[(g − g_s)(α − α_s)]` on the sample.
    pub fn realized_bias_moment(&self, data: &Dataset) -> f64 {
        let long = self.long_rows(data);
        let short = data.short_rows();
        let dg = self.g_long.evaluate(long.view()) - self.g_short.evaluate(short);
        let da = self.alpha_long.evaluate(long.view()) - self.alpha_short.evaluate(short);
        dg.dot(&da) / data.n() as f64
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("rho = {rho} must lie in [-1, 1]")));
    }
    Ok(())
}

fn loadings(p: usize, scale: f64) -> Vec<f64> {
    if p == 0 {
        return Vec::new();
    }
    vec![scale / (p as f64).sqrt(); p]
}

fn dot_rows(rows: ArrayView2<f64>, beta: &[f64], offset: usize) -> Array1<f64> {
    let mut out = Array1::zeros(rows.nrows());
    for (j, b) in beta.iter().enumerate() {
        out.scaled_add(*b, &rows.column(offset + j));
    }
    out
}

pub fn generate(spec: &SynthSpec) -> Result<(Dataset, OracleBundle)> {
    if spec.n < 2 {
        return Err(Error::InvalidInput("synthetic data needs n >= 2".into()));
    }
    match spec.dgp {
        Dgp::PlmGaussian => gaussian(spec, 0.0, 0.0),
        Dgp::AcdGaussian => gaussian(spec, 1.0, 0.25),
        Dgp::BinaryAteLogit => binary(spec),
    }
}

fn covariate_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Gaussian designs with `σ_u = σ_ε = 1`. Writing `V = 1 + δ²`:
/// `C²_D = δ²`, `B²_α = δ²/V`, `B²_g = γ₁²/V + γ₂²`, `ρ = −γ₁/(√V·B_g)`
/// and `θ_s − θ = γ₁δ/V`.
fn gaussian(spec: &SynthSpec, mu_d: f64, lambda: f64) -> Result<(Dataset, OracleBundle)> {
    let (gamma1, gamma2, delta) = match spec.strength {
        SynthStrength::R2 { cy2, cd2, rho } => {
            check_rho(rho)?;
            if !(0.0..1.0).contains(&cy2) || !(cd2 >= 0.0 && cd2.is_finite()) {
                return Err(Error::InvalidInput("need 0 <= cy2 < 1 and cd2 >= 0".into()));
            }
            let delta = cd2.sqrt();
            let bg = (cy2 / (1.0 - cy2)).sqrt();
            let v = 1.0 + cd2;
            (-rho * bg * v.sqrt(), (1.0 - rho * rho).sqrt() * bg, delta)
        }
        SynthStrength::Bias { b_g, b_alpha, rho } => {
            check_rho(rho)?;
            if !(b_g >= 0.0) || !(0.0..1.0).contains(&b_alpha) {
                return Err(Error::InvalidInput("need b_g >= 0 and 0 <= b_alpha < 1 (unit treatment noise)".into()));
            }
            let d2 = b_alpha * b_alpha / (1.0 - b_alpha * b_alpha);
            let v = 1.0 + d2;
            (-rho * b_g * v.sqrt(), (1.0 - rho * rho).sqrt() * b_g, d2.sqrt())
        }
        SynthStrength::Coefficients { gamma1, gamma2, delta } => (gamma1, gamma2, delta),
    };
    let v = 1.0 + delta * delta;
    let b_g = (gamma1 * gamma1 / v + gamma2 * gamma2).sqrt();
    let b_alpha = delta.abs() / v.sqrt();
    let rho = if b_g > 0.0 && b_alpha > 0.0 { -gamma1 * delta.signum() / (v.sqrt() * b_g) } else { 0.0 };
    let theta = spec.theta + 2.0 * lambda * mu_d;
    let theta_s = theta + gamma1 * delta / v;

    let (n, p) = (spec.n, spec.p);
    let beta_d = loadings(p, 0.5);
    let beta_y = loadings(p, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = Array2::from_shape_fn((n, p), |_| normal(&mut rng));
    let latent = Array2::from_shape_fn((n, 2), |_| normal(&mut rng));
    let u: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let eps: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let m = dot_rows(x.view(), &beta_d, 0) + mu_d;
    let fx = dot_rows(x.view(), &beta_y, 0);
    let d: Vec<f64> = (0..n).map(|i| m[i] + delta * latent[[i, 0]] + u[i]).collect();
    let th = spec.theta;
    let y: Vec<f64> = (0..n)
        .map(|i| th * d[i] + lambda * d[i] * d[i] + fx[i] + gamma1 * latent[[i, 0]] + gamma2 * latent[[i, 1]] + eps[i])
        .collect();
    let data = Dataset::new(y, d, x, covariate_names(p))?;

    let kappa = delta / v;
    let (bd, by) = (beta_d.clone(), beta_y.clone());
    let g_short = function(move |r: ArrayView2<f64>| {
        let d = r.column(0);
        let resid = &d - &(dot_rows(r, &bd, 1) + mu_d);
        &d * th + d.mapv(|x| lambda * x * x) + dot_rows(r, &by, 1) + resid * (gamma1 * kappa)
    });
    let bd = beta_d.clone();
    let alpha_short = function(move |r: ArrayView2<f64>| (&r.column(0) - &(dot_rows(r, &bd, 1) + mu_d)) / v);
    let by = beta_y;
    let g_long = function(move |r: ArrayView2<f64>| {
        let d = r.column(0);
        &d * th
            + d.mapv(|x| lambda * x * x)
            + dot_rows(r, &by, 1)
            + r.column(p + 1).mapv(|a| gamma1 * a)
            + r.column(p + 2).mapv(|a| gamma2 * a)
    });
    let bd = beta_d;
    let alpha_long = function(move |r: ArrayView2<f64>| {
        &r.column(0) - &(dot_rows(r, &bd, 1) + mu_d) - r.column(p + 1).mapv(|a| delta * a)
    });
    let sigma2_s = b_g * b_g + 1.0;
    let oracle = OracleBundle {
        theta,
        theta_s,
        sigma2_s,
        nu2_s: 1.0 / v,
        nu2: 1.0,
        b_g,
        b_alpha,
        rho,
        cy2: b_g * b_g / sigma2_s,
        cd2: delta * delta,
        latent,
        g_short,
        alpha_short,
        g_long,
        alpha_long,
    };
    Ok((data, oracle))
}

const LATENT_Q: f64 = 0.5;

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Population moments of the binary design at shift `delta`, integrated
/// over the propensity index `t = β_D'X ~ N(0, s²)`.
#[derive(Debug, Clone, Copy)]
struct BinaryMoments {
    /// `E α²` and `E α_s²`.
    alpha2: f64,
    alpha_s2: f64,
    /// `E Var(A₁ | D, X)`.
    var_a: f64,
    /// `E[P(A₁=1|D=1,X) − P(A₁=1|D=0,X)]`.
    shift: f64,
    /// `E[(A₁ − E[A₁|D,X])·α]`.
    cross: f64,
}

fn binary_cell(t: f64, delta: f64) -> BinaryMoments {
    let q = LATENT_Q;
    let pi = [logistic(t - delta * q), logistic(t + delta * (1.0 - q))];
    let qa = [1.0 - q, q];
    let pi_s = qa[0] * pi[0] + qa[1] * pi[1];
    let mut m = BinaryMoments {
        alpha2: 0.0,
        alpha_s2: 1.0 / pi_s + 1.0 / (1.0 - pi_s),
        var_a: 0.0,
        shift: 0.0,
        cross: 0.0,
    };
    let mut p_post = [0.0; 2];
    for d in 0..2 {
        let f = |a: usize| if d == 1 { pi[a] } else { 1.0 - pi[a] };
        let pd = qa[0] * f(0) + qa[1] * f(1);
        let post = qa[1] * f(1) / pd;
        p_post[d] = post;
        m.var_a += pd * post * (1.0 - post);
        for a in 0..2 {
            let alpha = if d == 1 { 1.0 / pi[a] } else { -1.0 / (1.0 - pi[a]) };
            m.cross += qa[a] * f(a) * (a as f64 - post) * alpha;
        }
    }
    for a in 0..2 {
        m.alpha2 += qa[a] * (1.0 / pi[a] + 1.0 / (1.0 - pi[a]));
    }
    m.shift = p_post[1] - p_post[0];
    m
}

fn binary_moments(s: f64, delta: f64) -> BinaryMoments {
    if s == 0.0 {
        return binary_cell(0.0, delta);
    }
    // Simpson's rule on z ∈ [−8, 8] against the standard normal density.
    let nodes = 1601;
    let h = 16.0 / (nodes - 1) as f64;
    let mut acc = BinaryMoments { alpha2: 0.0, alpha_s2: 0.0, var_a: 0.0, shift: 0.0, cross: 0.0 };
    for i in 0..nodes {
        let z = -8.0 + h * i as f64;
        let w = if i == 0 || i == nodes - 1 { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let w = w * h / 3.0 * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let c = binary_cell(s * z, delta);
        acc.alpha2 += w * c.alpha2;
        acc.alpha_s2 += w * c.alpha_s2;
        acc.var_a += w * c.var_a;
        acc.shift += w * c.shift;
        acc.cross += w * c.cross;
    }
    acc
}

/// Largest `δ` searched by the binary design's calibration.
const BINARY_DELTA_MAX: f64 = 20.0;

/// Smallest `δ ≥ 0` with `f(δ) = target` for increasing `f`, by bisection.
fn solve_delta(target: f64, f: impl Fn(f64) -> f64) -> Result<f64> {
    if target <= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, BINARY_DELTA_MAX);
    if f(hi) < target {
        return Err(Error::InvalidInput(format!("confounding strength {target} is not reachable in the binary design")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Binary treatment design with `q = ½`, `σ_ε = 1` and an outcome
/// `Y = θD + β_Y'X + γ₁A₁ + γ₂A₂ + ε`. The treatment shift `δ` is found by
/// bisection; `γ₁` and `γ₂` then follow in closed form, provided `|ρ|`
/// does not exceed what a single binary confounder can produce.
fn binary(spec: &SynthSpec) -> Result<(Dataset, OracleBundle)> {
    let p = spec.p;
    let beta_d = loadings(p, 0.4);
    let s_index = (beta_d.iter().map(|b| b * b).sum::<f64>()).sqrt();
    let cd2_of = |delta: f64| {
        let m = binary_moments(s_index, delta);
        (m.alpha2 - m.alpha_s2) / m.alpha_s2
    };
    let b_alpha2_of = |delta: f64| {
        let m = binary_moments(s_index, delta);
        m.alpha2 - m.alpha_s2
    };
    let calibrate = |delta: f64, b_g: f64, rho: f64| -> Result<(f64, f64)> {
        let m = binary_moments(s_index, delta);
        let b_alpha = (m.alpha2 - m.alpha_s2).max(0.0).sqrt();
        // ρ of a design driven by A₁ alone.
        let rho1 = if b_alpha > 0.0 { m.cross / (m.var_a.sqrt() * b_alpha) } else { 0.0 };
        if rho.abs() > rho1.abs() + 1e-12 {
            return Err(Error::InvalidInput(format!(
                "|rho| = {} exceeds {:.6}, the largest correlation this binary design can produce",
                rho.abs(),
                rho1.abs()
            )));
        }
        let share = if rho == 0.0 { 0.0 } else { (rho / rho1).clamp(-1.0, 1.0) };
        let gamma1 = share * b_g / m.var_a.sqrt();
        let gamma2 = (b_g * b_g - gamma1 * gamma1 * m.var_a).max(0.0).sqrt();
        Ok((gamma1, gamma2))
    };
    let (gamma1, gamma2, delta) = match spec.strength {
        SynthStrength::R2 { cy2, cd2, rho } => {
            check_rho(rho)?;
            if !(0.0..1.0).contains(&cy2) || !(cd2 >= 0.0) {
                return Err(Error::InvalidInput("need 0 <= cy2 < 1 and cd2 >= 0".into()));
            }
            let delta = solve_delta(cd2, cd2_of)?;
            let (g1, g2) = calibrate(delta, (cy2 / (1.0 - cy2)).sqrt(), rho)?;
            (g1, g2, delta)
        }
        SynthStrength::Bias { b_g, b_alpha, rho } => {
            check_rho(rho)?;
            if !(b_g >= 0.0 && b_alpha >= 0.0) {
                return Err(Error::InvalidInput("need b_g >= 0 and b_alpha >= 0".into()));
            }
            let delta = solve_delta(b_alpha * b_alpha, b_alpha2_of)?;
            let (g1, g2) = calibrate(delta, b_g, rho)?;
            (g1, g2, delta)
        }
        SynthStrength::Coefficients { gamma1, gamma2, delta } => (gamma1, gamma2, delta),
    };
    let mom = binary_moments(s_index, delta);
    let b_alpha = (mom.alpha2 - mom.alpha_s2).max(0.0).sqrt();
    let b_g = (gamma1 * gamma1 * mom.var_a + gamma2 * gamma2).sqrt();
    let rho = if b_g > 0.0 && b_alpha > 0.0 { gamma1 * mom.cross / (b_g * b_alpha) } else { 0.0 };
    let theta = spec.theta;
    let theta_s = theta + gamma1 * mom.shift;

    let n = spec.n;
    let beta_y = loadings(p, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = Array2::from_shape_fn((n, p), |_| normal(&mut rng));
    let mut latent = Array2::zeros((n, 2));
    let q = LATENT_Q;
    let mut d = Vec::with_capacity(n);
    let index = dot_rows(x.view(), &beta_d, 0);
    for i in 0..n {
        let a1 = if rng.random::<f64>() < q { 1.0 } else { 0.0 };
        latent[[i, 0]] = a1;
        latent[[i, 1]] = normal(&mut rng);
        let pi = logistic(index[i] + delta * (a1 - q));
        d.push(if rng.random::<f64>() < pi { 1.0 } else { 0.0 });
    }
    let fx = dot_rows(x.view(), &beta_y, 0);
    let y: Vec<f64> = (0..n)
        .map(|i| theta * d[i] + fx[i] + gamma1 * latent[[i, 0]] + gamma2 * latent[[i, 1]] + normal(&mut rng))
        .collect();
    let data = Dataset::new(y, d, x, covariate_names(p))?;

    let pis = move |t: f64| [logistic(t - delta * q), logistic(t + delta * (1.0 - q))];
    let (bd, by) = (beta_d.clone(), beta_y.clone());
    let g_short = function(move |r: ArrayView2<f64>| {
        let t = dot_rows(r, &bd, 1);
        let fx = dot_rows(r, &by, 1);
        Array1::from_shape_fn(r.nrows(), |i| {
            let d = r[[i, 0]];
            let pi = pis(t[i]);
            let f = |a: usize| if d == 1.0 { pi[a] } else { 1.0 - pi[a] };
            let post = q * f(1) / ((1.0 - q) * f(0) + q * f(1));
            theta * d + fx[i] + gamma1 * post
        })
    });
    let bd = beta_d.clone();
    let alpha_short = function(move |r: ArrayView2<f64>| {
        let t = dot_rows(r, &bd, 1);
        Array1::from_shape_fn(r.nrows(), |i| {
            let pi = pis(t[i]);
            let ps = (1.0 - q) * pi[0] + q * pi[1];
            if r[[i, 0]] == 1.0 {
                1.0 / ps
            } else {
                -1.0 / (1.0 - ps)
            }
        })
    });
    let g_long = function(move |r: ArrayView2<f64>| {
        &r.column(0) * theta
            + dot_rows(r, &beta_y, 1)
            + r.column(p + 1).mapv(|a| gamma1 * a)
            + r.column(p + 2).mapv(|a| gamma2 * a)
    });
    let alpha_long = function(move |r: ArrayView2<f64>| {
        let t = dot_rows(r, &beta_d, 1);
        Array1::from_shape_fn(r.nrows(), |i| {
            let pi = logistic(t[i] + delta * (r[[i, p + 1]] - q));
            if r[[i, 0]] == 1.0 {
                1.0 / pi
            } else {
                -1.0 / (1.0 - pi)
            }
        })
    });
    let sigma2_s = b_g * b_g + 1.0;
    let oracle = OracleBundle {
        theta,
        theta_s,
        sigma2_s,
        nu2_s: mom.alpha_s2,
        nu2: mom.alpha2,
        b_g,
        b_alpha,
        rho,
        cy2: b_g * b_g / sigma2_s,
        cd2: (mom.alpha2 - mom.alpha_s2) / mom.alpha_s2,
        latent,
        g_short,
        alpha_short,
        g_long,
        alpha_long,
    };
    Ok((data, oracle))
}

/// Short-model values to attach a latent confounder to.
#[derive(Debug, Clone)]
pub struct ShortModel {
    pub g_short: Array1<f64>,
    pub alpha_short: Array1<f64>,
    /// `Var(Y − g_s)`; the added outcome variation may not exceed it.
    pub residual_variance: f64,
}

#[derive(Debug, Clone)]
pub struct LongModel {
    pub g_long: Array1<f64>,
    pub alpha_long: Array1<f64>,
    /// `n × 2` standard normal latents.
    pub latent: Array2<f64>,
    /// Symmetric square root of the target covariance of `(g − g_s, α − α_s)`.
    pub mu: [[f64; 2]; 2],
    pub realized_rho: f64,
    pub realized_b_g2: f64,
    pub realized_b_alpha2: f64,
    /// `E_n[(g − g_s)(α − α_s)]`.
    pub realized_bias: f64,
}

/// Symmetric PSD square root of a 2×2 covariance matrix from its
/// eigendecomposition, with eigenvalues below 1e-12 set to zero.
fn sqrt_psd_2x2(a: f64, b: f64, c: f64) -> [[f64; 2]; 2] {
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let eig = [mid + rad, mid - rad];
    // Unit eigenvector of the larger eigenvalue; the other is orthogonal.
    let (vx, vy) = if b != 0.0 {
        let (x, y) = (eig[0] - c, b);
        let norm = x.hypot(y);
        (x / norm, y / norm)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let vecs = [(vx, vy), (-vy, vx)];
    let mut out = [[0.0; 2]; 2];
    for (lambda, (x, y)) in eig.into_iter().zip(vecs) {
        let r = if lambda < 1e-12 { 0.0 } else { lambda.sqrt() };
        out[0][0] += r * x * x;
        out[0][1] += r * x * y;
        out[1][0] += r * y * x;
        out[1][1] += r * y * y;
    }
    out
}

/// Builds a long model around `base` whose confounding has the requested
/// `(ρ, B_g, B_α)`: `g = g_s + μ₁'A`, `α = α_s + μ₂'A` with `A ~ N(0, I₂)`.
pub fn rationalize_confounding(base: &ShortModel, rho: f64, b_g: f64, b_alpha: f64, seed: u64) -> Result<LongModel> {
    check_rho(rho)?;
    let n = base.g_short.len();
    if n == 0 || base.alpha_short.len() != n {
        return Err(Error::InvalidInput("short model vectors are empty or differ in length".into()));
    }
    if !(b_g >= 0.0 && b_alpha >= 0.0) {
        return Err(Error::InvalidInput("b_g and b_alpha must be non-negative".into()));
    }
    if b_g * b_g > base.residual_variance {
        return Err(Error::InvalidInput(format!(
            "b_g^2 = {} exceeds the residual variance {}",
            b_g * b_g,
            base.residual_variance
        )));
    }
    let mu = sqrt_psd_2x2(b_g * b_g, rho * b_g * b_alpha, b_alpha * b_alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = Array2::from_shape_fn((n, 2), |_| normal(&mut rng));
    let dg = latent.dot(&Array1::from(vec![mu[0][0], mu[0][1]]));
    let da = latent.dot(&Array1::from(vec![mu[1][0], mu[1][1]]));
    let nf = n as f64;
    let realized_b_g2 = dg.dot(&dg) / nf;
    let realized_b_alpha2 = da.dot(&da) / nf;
    let realized_bias = dg.dot(&da) / nf;
    let realized_rho = crate::stats::correlation(&dg.to_vec(), &da.to_vec());
    Ok(LongModel {
        g_long: &base.g_short + &dg,
        alpha_long: &base.alpha_short + &da,
        latent,
        mu,
        realized_rho,
        realized_b_g2,
        realized_b_alpha2,
        realized_bias,
    })
}

/// Monte Carlo mean of `ρ²` when both confounding directions are drawn as
/// independent standard normal vectors over `k` latent variables.
pub fn natural_confounding_rho2(k: usize, draws: usize, seed: u64) -> Result<f64> {
    if k == 0 || draws == 0 {
        return Err(Error::InvalidInput("need k >= 1 and draws >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        let a: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let b: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let ab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let aa: f64 = a.iter().map(|x| x * x).sum();
        let bb: f64 = b.iter().map(|x| x * x).sum();
        acc += ab * ab / (aa * bb);
    }
    Ok(acc / draws as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMode {
    #[default]
    Learned,
    /// Plug in the population short nuisances.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    pub synth: SynthSpec,
    pub reps: usize,
    pub functional: FunctionalSpec,
    #[serde(default)]
    pub engine: EngineConfig,
    /// One-sided level of each confidence bound.
    #[serde(default = "default_a")]
    pub a: f64,
    /// Assumed strength; defaults to the design's true strength.
    #[serde(default)]
    pub params: Option<SensitivityParams>,
    #[serde(default)]
    pub mode: NuisanceMode,
}

fn default_a() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRecord {
    pub rep: usize,
    pub data_seed: u64,
    pub theta_s_hat: Option<f64>,
    pub se: Option<f64>,
    pub sigma2_hat: Option<f64>,
    pub nu2_hat: Option<f64>,
    pub conf_lower: Option<f64>,
    pub conf_upper: Option<f64>,
    /// `|θ̂_s − θ_s| ≤ z·SE` at two-sided level `1 − 2a`.
    pub covers_theta_s: Option<bool>,
    /// `θ_− ≥ ℓ̂` with `θ_−` the population lower bound.
    pub lower_holds: Option<bool>,
    pub upper_holds: Option<bool>,
    /// `ℓ̂ ≤ θ ≤ û` for the long target.
    pub covers_theta: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageSummary {
    pub reps: usize,
    pub failures: usize,
    pub theta: f64,
    pub theta_s: f64,
    pub theta_minus: f64,
    pub theta_plus: f64,
    pub coverage_theta_s: f64,
    pub coverage_lower: f64,
    pub coverage_upper: f64,
    pub coverage_theta: f64,
    pub rmse_theta_s: f64,
    pub rmse_sigma2: f64,
    pub rmse_nu2: f64,
    pub mean_se: f64,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub records: Vec<CoverageRecord>,
}

fn check_pairing(dgp: Dgp, spec: &FunctionalSpec) -> Result<()> {
    let ok = match dgp {
        Dgp::PlmGaussian => *spec == FunctionalSpec::PlmCoefficient || *spec == FunctionalSpec::acd(),
        Dgp::AcdGaussian => *spec == FunctionalSpec::acd(),
        Dgp::BinaryAteLogit => *spec == FunctionalSpec::ate(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "population truth for {} under {:?} is not available",
            spec.name(),
            dgp
        )))
    }
}

fn one_rep(cfg: &CoverageConfig, rep: usize, params: &SensitivityParams) -> Result<(CoverageRecord, [f64; 3])> {
    let mut synth = cfg.synth.clone();
    synth.seed = derive_seed(cfg.synth.seed, rep as u64);
    let (data, oracle) = generate(&synth)?;
    let mut engine = cfg.engine.clone();
    engine.seed = derive_seed(cfg.engine.seed, rep as u64);
    let (theta, sigma2, nu2) = match cfg.mode {
        NuisanceMode::Learned => {
            let c = estimate(&data, &cfg.functional, &engine)?;
            (c.theta, c.sigma2, c.nu2)
        }
        NuisanceMode::Oracle => {
            // The population g_s is linear or quadratic in d, so the finite
            // difference score is exact and covers the coefficient too.
            let spec = if cfg.functional == FunctionalSpec::PlmCoefficient { FunctionalSpec::acd() } else { cfg.functional.clone() };
            let functional = Functional::bind(&spec, &data)?;
            let plan = fold_plan_for(&data, engine.folds, engine.seed)?;
            let nuis = NuisanceFit::oracle(oracle.g_short.clone(), oracle.alpha_short.clone(), plan);
            (
                dml_solve(Score::Theta, &functional, &data, &nuis)?,
                dml_solve(Score::Sigma2, &functional, &data, &nuis)?,
                dml_solve(Score::Nu2, &functional, &data, &nuis)?,
            )
        }
    };
    let b = compute_bounds(&theta, &sigma2, &nu2, params, cfg.a)?;
    let z = normal_quantile(1.0 - cfg.a);
    let bias = params.factor() * oracle.scale();
    let (lo, hi) = (oracle.theta_s - bias, oracle.theta_s + bias);
    let rec = CoverageRecord {
        rep,
        data_seed: synth.seed,
        theta_s_hat: Some(theta.value),
        se: Some(theta.std_error),
        sigma2_hat: Some(sigma2.value),
        nu2_hat: Some(nu2.value),
        conf_lower: Some(b.conf_lower),
        conf_upper: Some(b.conf_upper),
        covers_theta_s: Some((theta.value - oracle.theta_s).abs() <= z * theta.std_error),
        lower_holds: Some(lo >= b.conf_lower),
        upper_holds: Some(hi <= b.conf_upper),
        covers_theta: Some(b.conf_lower <= oracle.theta && oracle.theta <= b.conf_upper),
        error: None,
    };
    let errs = [theta.value - oracle.theta_s, sigma2.value - oracle.sigma2_s, nu2.value - oracle.nu2_s];
    Ok((rec, errs))
}

/// Repeats generate → estimate → bound `reps` times with derived seeds.
/// Failed replications are counted and excluded from the rates.
pub const MIN_REPS: usize = 100;

/// Below this sample size the asymptotic coverage statements are not
/// expected to hold and the summary says so.
pub const SMALL_N: usize = 100;

pub fn coverage_experiment(cfg: &CoverageConfig) -> Result<CoverageSummary> {
    if cfg.reps < MIN_REPS {
        return Err(Error::InvalidInput(format!("coverage needs at least {MIN_REPS} replications, got {}", cfg.reps)));
    }
    check_pairing(cfg.synth.dgp, &cfg.functional)?;
    cfg.engine.validate()?;
    let (_, truth) = generate(&SynthSpec { n: 2, ..cfg.synth.clone() })?;
    let params = cfg.params.unwrap_or_else(|| truth.params());
    params.validate()?;
    let outcomes: Vec<(CoverageRecord, Option<[f64; 3]>)> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| match one_rep(cfg, rep, &params) {
            Ok((rec, errs)) => (rec, Some(errs)),
            Err(e) => (
                CoverageRecord {
                    rep,
                    data_seed: derive_seed(cfg.synth.seed, rep as u64),
                    theta_s_hat: None,
                    se: None,
                    sigma2_hat: None,
                    nu2_hat: None,
                    conf_lower: None,
                    conf_upper: None,
                    covers_theta_s: None,
                    lower_holds: None,
                    upper_holds: None,
                    covers_theta: None,
                    error: Some(e.to_string()),
                },
                None,
            ),
        })
        .collect();
    let ok: Vec<&(CoverageRecord, Option<[f64; 3]>)> = outcomes.iter().filter(|o| o.1.is_some()).collect();
    let failures = cfg.reps - ok.len();
    let m = ok.len().max(1) as f64;
    let rate = |f: fn(&CoverageRecord) -> Option<bool>| ok.iter().filter(|o| f(&o.0) == Some(true)).count() as f64 / m;
    let rmse = |k: usize| (ok.iter().map(|o| o.1.unwrap()[k].powi(2)).sum::<f64>() / m).sqrt();
    let bias = params.factor() * truth.scale();
    let mut warnings = Vec::new();
    if cfg.synth.n < SMALL_N {
        warnings.push(format!(
            "n = {} is small; the nuisance fits are poor and the coverage guarantees are asymptotic",
            cfg.synth.n
        ));
    }
    if failures > 0 {
        warnings.push(format!("{failures} of {} replications failed and are excluded from the rates", cfg.reps));
    }
    Ok(CoverageSummary {
        reps: cfg.reps,
        failures,
        theta: truth.theta,
        theta_s: truth.theta_s,
        theta_minus: truth.theta_s - bias,
        theta_plus: truth.theta_s + bias,
        coverage_theta_s: rate(|r| r.covers_theta_s),
        coverage_lower: rate(|r| r.lower_holds),
        coverage_upper: rate(|r| r.upper_holds),
        coverage_theta: rate(|r| r.covers_theta),
        rmse_theta_s: rmse(0),
        rmse_sigma2: rmse(1),
        rmse_nu2: rmse(2),
        mean_se: ok.iter().map(|o| o.0.se.unwrap()).sum::<f64>() / m,
        warnings,
        records: outcomes.into_iter().map(|o| o.0).collect(),
    })
}
