//! Nonparametric R² (η²) of an outcome explained by a fitted regression.

use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::stats::variance;

/// `Var(fitted) / Var(target)`.
pub fn eta_squared(target: ArrayView1<f64>, fitted: ArrayView1<f64>) -> Result<f64> {
    if target.len() != fitted.len() || target.is_empty() {
        return Err(Error::InvalidInput("target and fitted values differ in length".into()));
    }
    let vt = variance(&target.to_vec());
    if !(vt > 0.0) {
        return Err(Error::Degenerate("target has zero variance".into()));
    }
    Ok(variance(&fitted.to_vec()) / vt)
}

/// Partial η² of the augmented fit over a baseline: `(η²_aug − η²_base)/(1 − η²_base)`.
pub fn partial_eta(aug: f64, base: f64) -> Result<f64> {
    if !(base < 1.0) {
        return Err(Error::Degenerate(format!("baseline eta squared {base} leaves no residual variation")));
    }
    Ok((aug - base) / (1.0 - base))
}

/// η² of `target` explained by `fitted`, or its partial version over
/// `baseline` when one is given.
pub fn eta_nonparametric(
    target: ArrayView1<f64>,
    fitted: ArrayView1<f64>,
    baseline: Option<ArrayView1<f64>>,
) -> Result<f64> {
    let aug = eta_squared(target, fitted)?;
    match baseline {
        None => Ok(aug),
        Some(b) => partial_eta(aug, eta_squared(target, b)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn partial_arithmetic() {
        let v = partial_eta(0.31, 0.28).unwrap();
        assert!((v - 0.03 / 0.72).abs() < 1e-12);
        assert_eq!(format!("{v:.6}"), "0.041667");
        assert!(partial_eta(0.5, 1.0).is_err());
    }

    #[test]
    fn plain_and_partial() {
        let y = array![1.0, 2.0, 3.0, 4.0];
        let f = array![1.5, 1.5, 3.5, 3.5];
        let e = eta_nonparametric(y.view(), f.view(), None).unwrap();
        assert!((e - 0.8).abs() < 1e-12);
        let base = array![2.5, 2.5, 2.5, 2.5];
        assert!((eta_nonparametric(y.view(), f.view(), Some(base.view())).unwrap() - 0.8).abs() < 1e-12);
        assert!(eta_squared(base.view(), f.view()).is_err());
    }
}
