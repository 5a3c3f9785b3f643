//! Standardised mean differences for two-group designs, the small-sample
//! corrected Hedges' g, and sampling (co)variances for pairs of outcomes
//! measured on the same participants.

use serde::{Deserialize, Serialize};

use crate::error::{MetaError, Result};
use crate::statdist::log_gamma;

/// Summary statistics of one group for one outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
}

impl GroupSummary {
    pub fn new(n: usize, mean: f64, variance: f64) -> Result<Self> {
        if n < 2 {
            return Err(MetaError::Domain(format!("group size must be at least 2, got {n}")));
        }
        if !(variance >= 0.0) {
            return Err(MetaError::Domain(format!("group variance must be non-negative, got {variance}")));
        }
        Ok(Self { n, mean, variance })
    }
}

/// Corrected effects for two outcomes from one study, with their sampling
/// covariance matrix entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmdPair {
    pub d1: f64,
    pub d2: f64,
    pub g1: f64,
    pub g2: f64,
    pub v1: f64,
    pub v2: f64,
    pub cov12: f64,
    pub rho_hat: f64,
    pub m: usize,
    /// Set when `cov12` had to be clamped to `±√(v1·v2)`.
    pub clamped: bool,
}

/// Which large-sample variance formula feeds `v_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceForm {
    /// `(nT+nC)/(nT·nC) + d²/(2(nT+nC))` from the study's own group sizes.
    #[default]
    GroupSizes,
    /// `2/M + d²/(4M)` with `M` the average group size of the scenario.
    AverageGroupSize,
}

/// Uncorrected standardised mean difference with pooled SD.
pub fn hedges_d(treat: &GroupSummary, control: &GroupSummary) -> Result<f64> {
    let m = (treat.n + control.n - 2) as f64;
    let pooled =
        ((treat.n as f64 - 1.0) * treat.variance + (control.n as f64 - 1.0) * control.variance) / m;
    if !(pooled > 0.0) {
        return Err(MetaError::Degenerate("pooled standard deviation is zero".into()));
    }
    Ok((treat.mean - control.mean) / pooled.sqrt())
}

/// `J(m) = Γ(m/2) / (√(m/2) Γ((m−1)/2))`, evaluated in log space.
pub fn correction_factor(m: usize) -> Result<f64> {
    if m < 2 {
        return Err(MetaError::Domain(format!("correction factor needs m >= 2, got {m}")));
    }
    let half = m as f64 / 2.0;
    Ok((log_gamma(half)? - 0.5 * half.ln() - log_gamma(half - 0.5)?).exp())
}

pub fn hedges_g(d: f64, m: usize) -> Result<f64> {
    Ok(correction_factor(m)? * d)
}

fn check_rho(rho_hat: f64) -> Result<()> {
    if !(rho_hat.abs() <= 1.0) {
        return Err(MetaError::Domain(format!("correlation must lie in [-1,1], got {rho_hat}")));
    }
    Ok(())
}

/// Large-sample covariance between two SMDs sharing participants.
pub fn cov_smd(d1: f64, d2: f64, rho_hat: f64, n_t: usize, n_c: usize) -> Result<f64> {
    check_rho(rho_hat)?;
    if n_t == 0 || n_c == 0 || n_t + n_c < 3 {
        return Err(MetaError::Domain("group sizes too small".into()));
    }
    let m = (n_t + n_c - 2) as f64;
    Ok(rho_hat * (1.0 / n_t as f64 + 1.0 / n_c as f64) + rho_hat * rho_hat * d1 * d2 / m)
}

pub fn cov_hedges_g(d1: f64, d2: f64, rho_hat: f64, n_t: usize, n_c: usize) -> Result<f64> {
    let c = cov_smd(d1, d2, rho_hat, n_t, n_c)?;
    let j = correction_factor(n_t + n_c - 2)?;
    Ok(j * j * c)
}

pub fn var_smd(d: f64, n_t: usize, n_c: usize) -> Result<f64> {
    if n_t < 2 || n_c < 2 {
        return Err(MetaError::Domain("group sizes must be at least 2".into()));
    }
    let (nt, nc) = (n_t as f64, n_c as f64);
    Ok((nt + nc) / (nt * nc) + d * d / (2.0 * (nt + nc)))
}

/// Same variance written with the average group size `M = N/2`.
pub fn var_smd_average(d: f64, avg_group_size: f64) -> Result<f64> {
    if !(avg_group_size > 0.0) {
        return Err(MetaError::Domain("average group size must be positive".into()));
    }
    Ok(2.0 / avg_group_size + d * d / (4.0 * avg_group_size))
}

/// Builds corrected effects and their covariance for a two-outcome study.
///
/// Variances are the chosen SMD variance times `J(m)²`. The covariance is
/// clamped to `±√(v1·v2)` when rounding pushes it outside, and flagged.
pub fn smd_pair(
    d1: f64,
    d2: f64,
    rho_hat: f64,
    n_t: usize,
    n_c: usize,
    form: VarianceForm,
    avg_group_size: f64,
) -> Result<SmdPair> {
    let m = n_t + n_c - 2;
    let j = correction_factor(m)?;
    let var = |d: f64| -> Result<f64> {
        let base = match form {
            VarianceForm::GroupSizes => var_smd(d, n_t, n_c)?,
            VarianceForm::AverageGroupSize => var_smd_average(d, avg_group_size)?,
        };
        Ok(j * j * base)
    };
    let v1 = var(d1)?;
    let v2 = var(d2)?;
    let mut cov12 = cov_hedges_g(d1, d2, rho_hat, n_t, n_c)?;
    let bound = (v1 * v2).sqrt();
    let clamped = cov12.abs() > bound;
    if clamped {
        cov12 = cov12.signum() * bound;
    }
    Ok(SmdPair {
        d1,
        d2,
        g1: j * d1,
        g2: j * d2,
        v1,
        v2,
        cov12,
        rho_hat,
        m,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statdist::RngStream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn grp(n: usize, mean: f64, var: f64) -> GroupSummary {
        GroupSummary::new(n, mean, var).unwrap()
    }

    #[test]
    fn d_examples() {
        assert_eq!(hedges_d(&grp(10, 0.3, 2.0), &grp(12, 0.3, 0.5)).unwrap(), 0.0);
        assert_abs_diff_eq!(hedges_d(&grp(20, 1.0, 1.0), &grp(20, 0.0, 1.0)).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(hedges_d(&grp(50, 0.5, 1.2), &grp(50, 0.2, 0.8)).unwrap(), 0.3, epsilon = 1e-14);
        assert!(matches!(
            hedges_d(&grp(5, 1.0, 0.0), &grp(5, 0.0, 0.0)),
            Err(MetaError::Degenerate(_))
        ));
        assert!(GroupSummary::new(1, 0.0, 1.0).is_err());
    }

    #[test]
    fn g_examples() {
        assert_eq!(hedges_g(0.0, 30).unwrap(), 0.0);
        // mpmath: Γ(1)/(1·Γ(1/2))
        assert_abs_diff_eq!(hedges_g(1.0, 2).unwrap(), 0.564189583547756, epsilon = 1e-12);
        // mpmath, 30 digits: 0.990348513053264698
        let g78 = hedges_g(1.0, 78).unwrap();
        assert_abs_diff_eq!(g78, 0.990348513053265, epsilon = 1e-12);
        assert!((g78 - (1.0 - 3.0 / (4.0 * 78.0 - 1.0))).abs() < 1e-4);
        assert!(hedges_g(1.0, 1).is_err());
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(cov_smd(0.4, 0.9, 0.0, 20, 20).unwrap(), 0.0);
        assert_abs_diff_eq!(cov_smd(0.0, 0.0, 0.5, 20, 20).unwrap(), 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(cov_smd(0.4, 0.3, 0.7, 50, 50).unwrap(), 0.0286, epsilon = 1e-15);
        assert_eq!(cov_hedges_g(0.4, 0.3, 0.0, 50, 50).unwrap(), 0.0);
        // J(98)² · 0.0286 from mpmath
        assert_abs_diff_eq!(
            cov_hedges_g(0.4, 0.3, 0.7, 50, 50).unwrap(),
            0.0281626229019884,
            epsilon = 1e-14
        );
        let ratio = cov_hedges_g(0.4, 0.3, 0.7, 50_000, 50_000).unwrap()
            / cov_smd(0.4, 0.3, 0.7, 50_000, 50_000).unwrap();
        assert!((ratio - 1.0).abs() < 1e-4);
        assert!(cov_smd(0.1, 0.1, 1.5, 10, 10).is_err());
    }

    #[test]
    fn variance_examples() {
        assert_abs_diff_eq!(var_smd(0.0, 20, 20).unwrap(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(var_smd(0.0, 50, 50).unwrap(), 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(var_smd(0.5, 20, 20).unwrap(), 0.103125, epsilon = 1e-15);
        // balanced groups: both forms agree
        assert_abs_diff_eq!(
            var_smd(0.7, 30, 30).unwrap(),
            var_smd_average(0.7, 30.0).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn perfectly_correlated_identity() {
        let (d, nt, nc) = (0.35, 17, 23);
        let m = (nt + nc - 2) as f64;
        let expect = 1.0 / nt as f64 + 1.0 / nc as f64 + d * d / m;
        assert_abs_diff_eq!(cov_smd(d, d, 1.0, nt, nc).unwrap(), expect, epsilon = 1e-15);
    }

    #[test]
    fn correction_factor_monotone_below_one() {
        let js: Vec<f64> = (2..2000).map(|m| correction_factor(m).unwrap()).collect();
        assert!(js.iter().all(|&j| j > 0.0 && j < 1.0));
        assert!(js.windows(2).all(|w| w[1] > w[0]));
        assert!(1.0 - js.last().unwrap() < 1e-3);
    }

    #[test]
    fn g_is_unbiased() {
        let theta = 0.5;
        let n = 10;
        let reps = 100_000;
        let mut rng = RngStream::new(2024, 0).rng();
        let z = Normal::new(0.0, 1.0).unwrap();
        let mut gs = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut summarise = |shift: f64| {
                let xs: Vec<f64> = (0..n).map(|_| shift + z.sample(&mut rng)).collect();
                let mean = xs.iter().sum::<f64>() / n as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                grp(n, mean, var)
            };
            let t = summarise(theta);
            let c = summarise(0.0);
            gs.push(hedges_g(hedges_d(&t, &c).unwrap(), 2 * n - 2).unwrap());
        }
        let mean = gs.iter().sum::<f64>() / reps as f64;
        let sd = (gs.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0)).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!((mean - theta).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    proptest! {
        #[test]
        fn implied_correlation_bounded(d1 in -3.0f64..3.0, d2 in -3.0f64..3.0, rho in -1.0f64..1.0,
                                        nt in 2usize..200, nc in 2usize..200) {
            let pair = smd_pair(d1, d2, rho, nt, nc, VarianceForm::GroupSizes, 0.5 * (nt + nc) as f64).unwrap();
            let r = pair.cov12 / (pair.v1 * pair.v2).sqrt();
            prop_assert!(r.abs() <= 1.0 + 1e-12);
        }
    }
}
