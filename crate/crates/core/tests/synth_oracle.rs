use ndarray::Array1;
use ovbound::dml::EngineConfig;
use ovbound::synth::{
    coverage_experiment, generate, rationalize_confounding, CoverageConfig, Dgp, NuisanceMode, ShortModel, SynthSpec,
    SynthStrength,
};
use ovbound::FunctionalSpec;
use ovbound::sensitivity::SensitivityParams;
use proptest::prelude::*;

fn spec(dgp: Dgp, n: usize, strength: SynthStrength) -> SynthSpec {
    SynthSpec { dgp, n, p: 3, strength, seed: 21, theta: 1.0 }
}

#[test]
fn no_latent_coefficients_means_no_bias() {
    for dgp in [Dgp::PlmGaussian, Dgp::AcdGaussian, Dgp::BinaryAteLogit] {
        let strength = SynthStrength::Coefficients { gamma1: 0.0, gamma2: 0.0, delta: 0.7 };
        let (_, o) = generate(&spec(dgp, 10, strength)).unwrap();
        assert_eq!(o.theta, o.theta_s, "{dgp:?}");
    }
}

#[test]
fn constant_propensity_gives_inverse_weights() {
    let s = SynthSpec {
        p: 0,
        ..spec(Dgp::BinaryAteLogit, 400, SynthStrength::Coefficients { gamma1: 0.5, gamma2: 0.2, delta: 0.0 })
    };
    let (data, o) = generate(&s).unwrap();
    let a = o.alpha_short.evaluate(data.short_rows());
    for (ai, di) in a.iter().zip(data.treatment()) {
        let want = if *di == 1.0 { 2.0 } else { -2.0 };
        assert!((ai - want).abs() < 1e-12);
    }
}

/// The long-minus-short differences are uncorrelated with functions of the
/// observed variables.
#[test]
fn projection_residuals_are_orthogonal_to_observables() {
    for dgp in [Dgp::PlmGaussian, Dgp::BinaryAteLogit] {
        let (data, o) = generate(&spec(dgp, 200_000, SynthStrength::R2 { cy2: 0.1, cd2: 0.1, rho: 0.5 })).unwrap();
        let short = data.short_rows();
        let long = o.long_rows(&data);
        let dg = o.g_long.evaluate(long.view()) - o.g_short.evaluate(short);
        let da = o.alpha_long.evaluate(long.view()) - o.alpha_short.evaluate(short);
        let d = data.treatment().to_owned();
        let x1 = short.column(1).to_owned();
        let x2 = short.column(2).to_owned();
        let tests: Vec<Array1<f64>> = vec![
            Array1::ones(data.n()),
            d.clone(),
            x1.clone(),
            &d * &d,
            &d * &x1,
            x2.mapv(f64::sin),
        ];
        let n = data.n() as f64;
        for resid in [&dg, &da] {
            for h in &tests {
                let prod = resid * h;
                let mean = prod.sum() / n;
                let sd = (prod.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt();
                assert!(mean.abs() < 4.5 * sd / n.sqrt(), "{dgp:?}: mean {mean}, se {}", sd / n.sqrt());
            }
        }
    }
}

fn base(n: usize) -> ShortModel {
    ShortModel {
        g_short: Array1::from_shape_fn(n, |i| (i as f64 * 0.013).sin()),
        alpha_short: Array1::from_shape_fn(n, |i| (i as f64 * 0.029).cos()),
        residual_variance: 2.0,
    }
}

#[test]
fn uncorrelated_unit_confounding_uses_identity_root() {
    let m = rationalize_confounding(&base(10), 0.0, 1.0, 1.0, 1).unwrap();
    assert_eq!(m.mu, [[1.0, 0.0], [0.0, 1.0]]);
}

#[test]
fn zero_outcome_strength_leaves_no_bias() {
    let b = base(1000);
    let m = rationalize_confounding(&b, 0.8, 0.0, 1.0, 1).unwrap();
    assert_eq!(m.realized_bias, 0.0);
    assert_eq!(m.g_long, b.g_short);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn root_squares_to_target(rho in -1.0f64..=1.0, b_g in 0.0f64..1.4, b_a in 0.0f64..3.0) {
        let m = rationalize_confounding(&base(4), rho, b_g, b_a, 0).unwrap();
        let mu = m.mu;
        prop_assert!((mu[0][1] - mu[1][0]).abs() < 1e-12);
        let sq = [
            mu[0][0] * mu[0][0] + mu[0][1] * mu[1][0],
            mu[0][0] * mu[0][1] + mu[0][1] * mu[1][1],
            mu[1][0] * mu[0][1] + mu[1][1] * mu[1][1],
        ];
        let want = [b_g * b_g, rho * b_g * b_a, b_a * b_a];
        for (g, w) in sq.iter().zip(want) {
            prop_assert!((g - w).abs() < 1e-9 * (1.0 + w.abs()), "{:?} vs {:?}", sq, want);
        }
    }

    #[test]
    fn generation_is_bit_reproducible(seed in 0u64..1000, n in 2usize..60) {
        let s = SynthSpec { seed, ..spec(Dgp::PlmGaussian, n, SynthStrength::R2 { cy2: 0.1, cd2: 0.2, rho: 0.3 }) };
        let (a, oa) = generate(&s).unwrap();
        let (b, ob) = generate(&s).unwrap();
        prop_assert_eq!(a.outcome(), b.outcome());
        prop_assert_eq!(a.short_rows(), b.short_rows());
        prop_assert_eq!(oa.latent, ob.latent);
    }
}

fn coverage(synth: SynthSpec, params: Option<SensitivityParams>, mode: NuisanceMode) -> ovbound::synth::CoverageSummary {
    coverage_experiment(&CoverageConfig {
        synth,
        reps: 200,
        functional: FunctionalSpec::PlmCoefficient,
        engine: EngineConfig { folds: 2, ..EngineConfig::default() },
        a: 0.05,
        params,
        mode,
    })
    .unwrap()
}

#[test]
fn oracle_mode_covers_theta_s_at_nominal_rate() {
    let s = coverage(
        spec(Dgp::PlmGaussian, 400, SynthStrength::R2 { cy2: 0.05, cd2: 0.05, rho: 0.5 }),
        None,
        NuisanceMode::Oracle,
    );
    // Two-sided level 1 − 2a = 0.9; binomial 99% band for 200 draws.
    let half = 2.5758 * (0.9f64 * 0.1 / 200.0).sqrt();
    assert!((s.coverage_theta_s - 0.9).abs() <= half, "{}", s.coverage_theta_s);
    assert_eq!(s.failures, 0);
}

#[test]
fn assuming_full_correlation_is_conservative() {
    let s = coverage(
        spec(Dgp::PlmGaussian, 400, SynthStrength::R2 { cy2: 0.1, cd2: 0.1, rho: 0.0 }),
        Some(SensitivityParams::direct(0.1, 0.1, 1.0)),
        NuisanceMode::Learned,
    );
    assert!(s.coverage_theta >= 0.99, "{}", s.coverage_theta);
}

#[test]
fn tiny_samples_run_with_a_warning() {
    let s = coverage(
        spec(Dgp::PlmGaussian, 50, SynthStrength::R2 { cy2: 0.05, cd2: 0.05, rho: 1.0 }),
        None,
        NuisanceMode::Learned,
    );
    assert_eq!(s.reps, 200);
    assert!(s.warnings.iter().any(|w| w.contains("n = 50")));
    assert_eq!(s.records.len(), 200);
}
