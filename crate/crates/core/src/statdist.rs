//! Special functions, the four reference distributions used for inference
//! (normal, t, χ², F), and reproducible random streams.
//!
//! The incomplete beta/gamma, `erfc` and `ln Γ` kernels come from `statrs`
//! (its `ln_gamma` is the Lanczos approximation with the Pugh 2004
//! coefficient set). Quantiles are obtained here by bracketing followed by
//! safeguarded Newton iterations on the CDF, using the survival function in
//! the upper half so that tail probabilities keep their relative precision.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::{beta, erf, gamma};

use crate::error::{MetaError, Result};
use crate::linalg::{pivoted_cholesky, PivotedCholesky};

/// Degrees of freedom at or above this value are treated as infinite.
const DF_INFINITE: f64 = 1e10;

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(MetaError::Domain(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(gamma::ln_gamma(x))
}

/// Reference distributions used by the test and interval machinery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dist {
    Normal,
    StudentT { df: f64 },
    ChiSq { df: f64 },
    F { df1: f64, df2: f64 },
}

impl Dist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dist::Normal => true,
            Dist::StudentT { df } | Dist::ChiSq { df } => df > 0.0,
            Dist::F { df1, df2 } => df1 > 0.0 && df1.is_finite() && df2 > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(MetaError::Domain(format!("invalid degrees of freedom in {self:?}")))
        }
    }

    /// Reduce infinite-df members to their limits.
    fn canonical(self) -> Self {
        match self {
            Dist::StudentT { df } if df >= DF_INFINITE => Dist::Normal,
            other => other,
        }
    }

    fn positive_support(&self) -> bool {
        matches!(self, Dist::ChiSq { .. } | Dist::F { .. })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self.canonical() {
            Dist::Normal => 0.5 * erf::erfc(-x / std::f64::consts::SQRT_2),
            Dist::StudentT { df } => {
                let tail = 0.5 * beta::beta_reg(0.5 * df, 0.5, df / (df + x * x));
                if x >= 0.0 {
                    1.0 - tail
                } else {
                    tail
                }
            }
            Dist::ChiSq { df } => {
                if x <= 0.0 {
                    0.0
                } else {
                    gamma::gamma_lr(0.5 * df, 0.5 * x)
                }
            }
            Dist::F { df1, df2 } => {
                if x <= 0.0 {
                    0.0
                } else if df2 >= DF_INFINITE {
                    Dist::ChiSq { df: df1 }.cdf(df1 * x)
                } else {
                    beta::beta_reg(0.5 * df1, 0.5 * df2, df1 * x / (df1 * x + df2))
                }
            }
        }
    }

    /// Upper tail `1 − CDF(x)`, evaluated without cancellation.
    pub fn sf(&self, x: f64) -> f64 {
        match self.canonical() {
            Dist::Normal => 0.5 * erf::erfc(x / std::f64::consts::SQRT_2),
            d @ Dist::StudentT { .. } => d.cdf(-x),
            Dist::ChiSq { df } => {
                if x <= 0.0 {
                    1.0
                } else {
                    gamma::gamma_ur(0.5 * df, 0.5 * x)
                }
            }
            Dist::F { df1, df2 } => {
                if x <= 0.0 {
                    1.0
                } else if df2 >= DF_INFINITE {
                    Dist::ChiSq { df: df1 }.sf(df1 * x)
                } else {
                    beta::beta_reg(0.5 * df2, 0.5 * df1, df2 / (df2 + df1 * x))
                }
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        use std::f64::consts::PI;
        match self.canonical() {
            Dist::Normal => (-0.5 * x * x).exp() / (2.0 * PI).sqrt(),
            Dist::StudentT { df } => (gamma::ln_gamma(0.5 * (df + 1.0))
                - gamma::ln_gamma(0.5 * df)
                - 0.5 * (df * PI).ln()
                - 0.5 * (df + 1.0) * (x * x / df).ln_1p())
            .exp(),
            Dist::ChiSq { df } => {
                if x <= 0.0 {
                    return 0.0;
                }
                let k = 0.5 * df;
                ((k - 1.0) * x.ln() - 0.5 * x - k * std::f64::consts::LN_2 - gamma::ln_gamma(k)).exp()
            }
            Dist::F { df1, df2 } => {
                if x <= 0.0 {
                    return 0.0;
                }
                if df2 >= DF_INFINITE {
                    return df1 * Dist::ChiSq { df: df1 }.pdf(df1 * x);
                }
                let ln = 0.5 * (df1 * (df1 * x).ln() + df2 * df2.ln() - (df1 + df2) * (df1 * x + df2).ln())
                    - x.ln()
                    - beta::ln_beta(0.5 * df1, 0.5 * df2);
                ln.exp()
            }
        }
    }

    /// Inverse CDF. Absolute accuracy is well below 1e-8 for the parameter
    /// ranges used in this crate.
    pub fn quantile(&self, prob: f64) -> Result<f64> {
        self.validate()?;
        if !(prob > 0.0 && prob < 1.0) {
            return Err(MetaError::Domain(format!("probability must lie in (0,1), got {prob}")));
        }
        let dist = self.canonical();
        let upper = prob > 0.5;
        // residual on the more precise side of the distribution
        let resid = |x: f64| if upper { (1.0 - prob) - dist.sf(x) } else { dist.cdf(x) - prob };

        let (mut lo, mut hi) = if dist.positive_support() {
            let mut hi = 1.0;
            while resid(hi) < 0.0 {
                hi *= 2.0;
                if hi > 1e300 {
                    break;
                }
            }
            let mut lo = hi * 0.5;
            while resid(lo) > 0.0 && lo > 1e-300 {
                lo *= 0.5;
            }
            if resid(lo) > 0.0 {
                lo = 0.0;
            }
            (lo, hi)
        } else {
            let mut step = 1.0;
            let (mut lo, mut hi) = (-1.0, 1.0);
            while resid(hi) < 0.0 {
                lo = hi;
                step *= 2.0;
                hi += step;
            }
            step = 1.0;
            while resid(lo) > 0.0 {
                hi = lo;
                step *= 2.0;
                lo -= step;
            }
            (lo, hi)
        };

        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let r = resid(x);
            if r == 0.0 {
                return Ok(x);
            }
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let d = dist.pdf(x);
            let newton = if d > 0.0 && d.is_finite() { x - r / d } else { f64::NAN };
            let next = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - x).abs() <= 1e-14 * x.abs().max(1.0) || (hi - lo) <= 1e-15 * x.abs().max(1.0) {
                return Ok(next);
            }
            x = next;
        }
        Ok(x)
    }
}

/// A reproducible random stream identified by a master seed and a stream
/// index. Streams are ChaCha20 keyed by the seed with the stream index in
/// the nonce word, so distinct indices never overlap and need no shared state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Multivariate normal with a pre-factorised covariance.
#[derive(Debug, Clone)]
pub struct MvNormal {
    mean: DVector<f64>,
    factor: PivotedCholesky,
}

impl MvNormal {
    /// Factorises `cov` with a pivoted Cholesky (tolerance 1e-10), so
    /// singular PSD matrices are accepted and indefinite ones rejected.
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(MetaError::Domain("mean and covariance dimensions differ".into()));
        }
        let factor = pivoted_cholesky(cov, 1e-10)?;
        Ok(Self { mean, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z: Vec<f64> = (0..self.factor.rank).map(|_| rng.sample(StandardNormal)).collect();
        &self.mean + self.factor.apply(&z)
    }
}

/// One draw from N(mean, cov) using the given generator.
pub fn sample_mvnormal<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    Ok(MvNormal::new(mean.clone(), cov)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn log_gamma_reference_points() {
        assert_abs_diff_eq!(log_gamma(1.0).unwrap(), 0.0, epsilon = 1e-14);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert_abs_diff_eq!(log_gamma(0.5).unwrap(), sqrt_pi.ln(), epsilon = 1e-13);
        // 9! by integer product
        let fact9: u64 = (1..=9).product();
        let expect = (fact9 as f64).ln();
        assert!((log_gamma(10.0).unwrap() - expect).abs() / expect < 1e-12);
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(-1.5).is_err());
    }

    #[test]
    fn log_gamma_matches_factorials_over_range() {
        // ln((n-1)!) accumulated in f64 from exact logs of integers
        let mut acc = 0.0_f64;
        for n in 2..=170u32 {
            acc += ((n - 1) as f64).ln();
            let got = log_gamma(n as f64).unwrap();
            if acc > 1.0 {
                assert!((got - acc).abs() / acc < 1e-12, "n={n}: {got} vs {acc}");
            }
        }
    }

    #[test]
    fn quantile_table_values() {
        assert_abs_diff_eq!(Dist::Normal.quantile(0.975).unwrap(), 1.959963984540054, epsilon = 1e-8);
        assert_abs_diff_eq!(Dist::ChiSq { df: 4.0 }.quantile(0.95).unwrap(), 9.487729036781154, epsilon = 1e-8);
        assert_abs_diff_eq!(Dist::F { df1: 4.0, df2: 2.0 }.quantile(0.95).unwrap(), 19.246794344808947, epsilon = 1e-8);
        assert_abs_diff_eq!(Dist::StudentT { df: 8.0 }.quantile(0.975).unwrap(), 2.306004135204166, epsilon = 1e-8);
    }

    #[test]
    fn quantile_rejects_bad_inputs() {
        assert!(Dist::Normal.quantile(0.0).is_err());
        assert!(Dist::Normal.quantile(1.0).is_err());
        assert!(Dist::ChiSq { df: 0.0 }.quantile(0.5).is_err());
        assert!(Dist::F { df1: 2.0, df2: -1.0 }.quantile(0.5).is_err());
    }

    #[test]
    fn f_quantile_approaches_chisq_over_q() {
        let chi = Dist::ChiSq { df: 4.0 }.quantile(0.95).unwrap();
        let gaps: Vec<f64> = [10.0, 100.0, 10000.0]
            .iter()
            .map(|&n| (4.0 * Dist::F { df1: 4.0, df2: n }.quantile(0.95).unwrap() - chi).abs())
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    fn families() -> Vec<Dist> {
        let mut v = vec![Dist::Normal];
        for df in [1.0, 2.0, 3.5, 8.0, 40.0, 500.0] {
            v.push(Dist::StudentT { df });
            v.push(Dist::ChiSq { df });
        }
        for (a, b) in [(1.0, 1.0), (2.0, 3.0), (4.0, 2.0), (4.0, 36.0), (2.0, 38.0), (7.0, 500.0)] {
            v.push(Dist::F { df1: a, df2: b });
        }
        v
    }

    #[test]
    fn cdf_inverts_quantile_on_grid() {
        for d in families() {
            for p in [0.001, 0.01, 0.05, 0.2, 0.5, 0.8, 0.95, 0.99, 0.999] {
                let x = d.quantile(p).unwrap();
                assert!((d.cdf(x) - p).abs() < 1e-7, "{d:?} p={p} x={x}");
            }
        }
    }

    #[test]
    fn quantile_strictly_increasing_on_grid() {
        for d in families() {
            let xs: Vec<f64> = (1..100).map(|i| d.quantile(i as f64 / 100.0).unwrap()).collect();
            assert!(xs.windows(2).all(|w| w[1] > w[0]), "{d:?}");
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = RngStream::new(7, 3).rng().random_iter().take(16).collect();
        let b: Vec<u64> = RngStream::new(7, 3).rng().random_iter().take(16).collect();
        let c: Vec<u64> = RngStream::new(7, 4).rng().random_iter().take(16).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mvnormal_moments() {
        let mut rng = RngStream::new(11, 0).rng();
        let n = 100_000;
        let rho = 0.7;
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let mvn = MvNormal::new(DVector::zeros(2), &cov).unwrap();
        let draws: Vec<DVector<f64>> = (0..n).map(|_| mvn.sample(&mut rng)).collect();
        let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / n as f64;
        let m1 = draws.iter().map(|d| d[1]).sum::<f64>() / n as f64;
        let s00 = draws.iter().map(|d| (d[0] - m0).powi(2)).sum::<f64>();
        let s11 = draws.iter().map(|d| (d[1] - m1).powi(2)).sum::<f64>();
        let s01 = draws.iter().map(|d| (d[0] - m0) * (d[1] - m1)).sum::<f64>();
        let r = s01 / (s00 * s11).sqrt();
        assert!((r - rho).abs() < 0.01, "r = {r}");

        let id = MvNormal::new(DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
        let mut rng = RngStream::new(12, 0).rng();
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..n {
            let d = id.sample(&mut rng);
            a += d[0];
            b += d[1];
        }
        let tol = 3.0 / (n as f64).sqrt();
        assert!((a / n as f64).abs() < tol && (b / n as f64).abs() < tol);
    }

    #[test]
    fn mvnormal_degenerate_and_indefinite() {
        let mean = DVector::from_vec(vec![1.5, -2.0]);
        let mut rng = RngStream::new(1, 1).rng();
        let draw = sample_mvnormal(&mut rng, &mean, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(draw, mean);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = sample_mvnormal(&mut rng, &mean, &bad).unwrap_err();
        assert!(matches!(err, MetaError::NotPsd { .. }));
    }

    proptest! {
        #[test]
        fn quantile_monotone_random(df1 in 0.5f64..50.0, df2 in 0.5f64..200.0, p in 0.01f64..0.98) {
            let d = Dist::F { df1, df2 };
            let a = d.quantile(p).unwrap();
            let b = d.quantile(p + 0.01).unwrap();
            prop_assert!(b > a);
        }
    }
}
