//! Wald-type tests, small-sample reference distributions, confidence
//! intervals and confidence ellipsoids.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MetaError, Result};
use crate::fit::FitResult;
use crate::linalg::{sym_apply, symmetrize};
use crate::robust::{Adjustment, CovEstimate, CovKind};
use crate::statdist::{log_gamma, Dist};

/// Reported Hotelling df when the robust covariance has no sampling variance.
pub const ETA_CAP: f64 = 1e12;

/// Relative eigenvalue floor for inverting `Σ̂`.
const INVERT_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TestMethod {
    ChiSq,
    F,
    FAdjusted,
    Htz,
}

impl TestMethod {
    pub fn id(self) -> &'static str {
        match self {
            TestMethod::ChiSq => "chisq",
            TestMethod::F => "f",
            TestMethod::FAdjusted => "f-adjusted",
            TestMethod::Htz => "htz",
        }
    }
}

impl fmt::Display for TestMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TestMethod {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chisq" | "chi2" => Ok(TestMethod::ChiSq),
            "f" => Ok(TestMethod::F),
            "f-adjusted" | "f_adjusted" => Ok(TestMethod::FAdjusted),
            "htz" => Ok(TestMethod::Htz),
            _ => Err(MetaError::Input(format!("unknown test `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub method: TestMethod,
    pub df1: f64,
    /// Infinite for the χ² test.
    pub df2: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    pub estimator_kind: Option<CovKind>,
}

impl TestResult {
    pub fn with_kind(mut self, kind: CovKind) -> Self {
        self.estimator_kind = Some(kind);
        self
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(MetaError::Domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// `Σ̂⁻¹` by eigendecomposition, refusing near-singular or indefinite input.
pub fn invert_covariance(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(sigma));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min < INVERT_REL_TOL * max {
        return Err(MetaError::SingularCovariance { min_eigenvalue: min });
    }
    let inv = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| 1.0 / l));
    Ok(symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose())))
}

/// `(β̂ − β₀)' Σ̂⁻¹ (β̂ − β₀)`.
pub fn wald_q(beta_hat: &DVector<f64>, beta0: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if beta_hat.len() != beta0.len() || sigma.nrows() != beta_hat.len() {
        return Err(MetaError::Domain("dimension mismatch in Wald statistic".into()));
    }
    let inv = invert_covariance(sigma)?;
    let d = beta_hat - beta0;
    Ok(d.dot(&(inv * &d)).max(0.0))
}

/// `(Hβ̂ − c)' (H Σ̂ H')⁻¹ (Hβ̂ − c)` for a full-row-rank `H`.
pub fn wald_q_h(beta_hat: &DVector<f64>, h: &DMatrix<f64>, c: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if h.ncols() != beta_hat.len() || h.nrows() != c.len() || h.nrows() == 0 {
        return Err(MetaError::Domain("dimension mismatch in hypothesis matrix".into()));
    }
    if h.nrows() > h.ncols() {
        return Err(MetaError::Domain("hypothesis matrix has more rows than coefficients".into()));
    }
    let sv = h.clone().singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|s| **s > 1e-10 * smax).count();
    if rank < h.nrows() {
        return Err(MetaError::Domain(format!("hypothesis matrix has rank {rank} < {}", h.nrows())));
    }
    let inv = invert_covariance(&(h * sigma * h.transpose()))?;
    let d = h * beta_hat - c;
    Ok(d.dot(&(inv * &d)).max(0.0))
}

fn f_result(q_stat: f64, q: usize, df2: f64, alpha: f64, method: TestMethod) -> Result<TestResult> {
    check_alpha(alpha)?;
    if !(q_stat >= 0.0) {
        return Err(MetaError::Domain(format!("statistic must be non-negative, got {q_stat}")));
    }
    let dist = Dist::F { df1: q as f64, df2 };
    let crit = dist.quantile(1.0 - alpha)?;
    Ok(TestResult {
        statistic: q_stat,
        method,
        df1: q as f64,
        df2,
        p_value: dist.sf(q_stat / q as f64).clamp(0.0, 1.0),
        alpha,
        reject: q_stat > q as f64 * crit,
        estimator_kind: None,
    })
}

/// `Q/q ~ F(q, k − q)`.
pub fn f_test(q_stat: f64, q: usize, k: usize, alpha: f64) -> Result<TestResult> {
    if k <= q {
        return Err(MetaError::DegreesOfFreedom(format!("F test needs k > q (k = {k}, q = {q})")));
    }
    f_result(q_stat, q, (k - q) as f64, alpha, TestMethod::F)
}

/// Denominator df truncated below at two.
pub fn adjusted_df2(q: usize, k: usize) -> f64 {
    (k as f64 - q as f64).max(2.0)
}

/// `Q/q ~ F(q, max(2, k − q))`.
pub fn f_test_adjusted(q_stat: f64, q: usize, k: usize, alpha: f64) -> Result<TestResult> {
    if q == 0 || k == 0 {
        return Err(MetaError::Domain("q and k must be positive".into()));
    }
    f_result(q_stat, q, adjusted_df2(q, k), alpha, TestMethod::FAdjusted)
}

/// `Q ~ χ²_q`.
pub fn chisq_test(q_stat: f64, q: usize, alpha: f64) -> Result<TestResult> {
    check_alpha(alpha)?;
    if !(q_stat >= 0.0) {
        return Err(MetaError::Domain(format!("statistic must be non-negative, got {q_stat}")));
    }
    let dist = Dist::ChiSq { df: q as f64 };
    let crit = dist.quantile(1.0 - alpha)?;
    Ok(TestResult {
        statistic: q_stat,
        method: TestMethod::ChiSq,
        df1: q as f64,
        df2: f64::INFINITY,
        p_value: dist.sf(q_stat).clamp(0.0, 1.0),
        alpha,
        reject: q_stat > crit,
        estimator_kind: None,
    })
}

/// Hotelling approximation: `(η − q + 1)/(η q) · Q ~ F(q, η − q + 1)`.
pub fn htz_test(q_stat: f64, q: usize, eta: f64, alpha: f64) -> Result<TestResult> {
    check_alpha(alpha)?;
    let qf = q as f64;
    if !(eta > qf - 1.0) {
        return Err(MetaError::NotApplicable(format!(
            "Hotelling approximation needs eta > q - 1 (eta = {eta}, q = {q})"
        )));
    }
    if !(q_stat >= 0.0) {
        return Err(MetaError::Domain(format!("statistic must be non-negative, got {q_stat}")));
    }
    let df2 = eta - qf + 1.0;
    let scaled = (eta - qf + 1.0) / (eta * qf) * q_stat;
    let dist = Dist::F { df1: qf, df2 };
    let crit = dist.quantile(1.0 - alpha)?;
    Ok(TestResult {
        statistic: q_stat,
        method: TestMethod::Htz,
        df1: qf,
        df2,
        p_value: dist.sf(scaled).clamp(0.0, 1.0),
        alpha,
        reject: scaled > crit,
        estimator_kind: None,
    })
}

/// Hotelling degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZhangDf {
    pub eta: f64,
    /// Set when the estimator has (numerically) no sampling variance.
    pub capped: bool,
}

/// Quadratic-form matrices `Q_ab,i` such that `s_ab = Σ_i E_i' Q_ab,i E_i`,
/// where `s = L Σ̂ L'` and `L = transform · contrast`.
fn quadratic_forms(fit: &FitResult, cov: &CovEstimate, l: &DMatrix<f64>) -> Vec<Vec<Vec<DMatrix<f64>>>> {
    let s = l.nrows();
    let rows: Vec<DMatrix<f64>> = fit
        .x_blocks
        .iter()
        .zip(&fit.w_blocks)
        .map(|(x, w)| l * &fit.bread * x.transpose() * w)
        .collect();
    let mut out = vec![vec![Vec::with_capacity(fit.k()); s]; s];
    for (b, adj) in rows.iter().zip(&cov.adjustments) {
        for a1 in 0..s {
            for a2 in a1..s {
                let u = b.row(a1).transpose();
                let v = b.row(a2).transpose();
                let m = match adj {
                    Adjustment::Linear(a) => {
                        let au = a.transpose() * &u;
                        let av = a.transpose() * &v;
                        au * av.transpose()
                    }
                    Adjustment::Hadamard(c) => (&u * v.transpose()).component_mul(c),
                };
                let m = symmetrize(&m) * cov.meat_scale;
                out[a1][a2].push(m.clone());
                if a2 != a1 {
                    out[a2][a1].push(m);
                }
            }
        }
    }
    out
}

/// `E[E'QE] = tr(QΨ)` with `Ψ = Φ − X M X'`.
fn expectation(fit: &FitResult, phis: &[DMatrix<f64>], qs: &[DMatrix<f64>]) -> f64 {
    let mut tr = 0.0;
    let mut xqx = DMatrix::zeros(fit.q(), fit.q());
    for ((q, phi), x) in qs.iter().zip(phis).zip(&fit.x_blocks) {
        tr += (q * phi).trace();
        xqx += x.transpose() * q * x;
    }
    tr - (xqx * &fit.bread).trace()
}

/// `Var(E'QE) = 2 tr(QΨQΨ)` with `Ψ = Φ − X M X'` expanded blockwise.
fn variance(fit: &FitResult, phis: &[DMatrix<f64>], qs: &[DMatrix<f64>]) -> f64 {
    let m = &fit.bread;
    let mut t1 = 0.0;
    let mut t2 = DMatrix::zeros(fit.q(), fit.q());
    let mut xqx = DMatrix::zeros(fit.q(), fit.q());
    for ((q, phi), x) in qs.iter().zip(phis).zip(&fit.x_blocks) {
        let qp = q * phi;
        t1 += (&qp * &qp).trace();
        t2 += x.transpose() * &qp * q * x;
        xqx += x.transpose() * q * x;
    }
    let a = xqx * m;
    2.0 * (t1 - 2.0 * (t2 * m).trace() + (&a * &a).trace())
}

/// Expected value of `contrast · Σ̂ · contrast'` under the working model
/// `Y ~ N(Xβ, Ŵ⁻¹)`.
pub fn working_expectation(fit: &FitResult, cov: &CovEstimate, contrast: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let c = contrast.cloned().unwrap_or_else(|| DMatrix::identity(fit.q(), fit.q()));
    if cov.adjustments.is_empty() {
        return &c * &cov.sigma * c.transpose();
    }
    let phis = fit.phi_blocks();
    let qs = quadratic_forms(fit, cov, &c);
    let s = c.nrows();
    DMatrix::from_fn(s, s, |a, b| expectation(fit, &phis, &qs[a][b]))
}

/// Wishart-matching degrees of freedom `η̂ = s(s+1) / Σ_ab Var(s_ab)` for the
/// standardised robust covariance of `contrast · β̂` (all of `β̂` when `None`).
pub fn zhang_df(fit: &FitResult, cov: &CovEstimate, contrast: Option<&DMatrix<f64>>) -> Result<ZhangDf> {
    if cov.adjustments.is_empty() {
        return Ok(ZhangDf { eta: ETA_CAP, capped: true });
    }
    let c = contrast.cloned().unwrap_or_else(|| DMatrix::identity(fit.q(), fit.q()));
    let s = c.nrows();
    let omega = symmetrize(&working_expectation(fit, cov, Some(&c)));
    let eig = SymmetricEigen::new(omega.clone());
    if eig.eigenvalues.min() <= 0.0 {
        return Err(MetaError::Degenerate(format!(
            "expected robust covariance is not positive definite (min eigenvalue {})",
            eig.eigenvalues.min()
        )));
    }
    let inv_sqrt = sym_apply(&omega, |l| 1.0 / l.sqrt());
    let l = inv_sqrt * &c;
    let phis = fit.phi_blocks();
    let qs = quadratic_forms(fit, cov, &l);
    let mut total = 0.0;
    for a in 0..s {
        for b in 0..s {
            total += variance(fit, &phis, &qs[a][b]);
        }
    }
    let sf = s as f64;
    if !(total > 0.0) {
        return Err(MetaError::Degenerate(format!("total variance of the robust covariance is {total}")));
    }
    let eta = sf * (sf + 1.0) / total;
    if eta > ETA_CAP {
        return Ok(ZhangDf { eta: ETA_CAP, capped: true });
    }
    Ok(ZhangDf { eta, capped: false })
}

/// Quantile rule for single-coefficient intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DfRule {
    #[default]
    Normal,
    /// `t` with `p(k) − q` degrees of freedom.
    T,
}

impl FromStr for DfRule {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "normal" | "z" => Ok(DfRule::Normal),
            "t" => Ok(DfRule::T),
            _ => Err(MetaError::Input(format!("unknown df rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub quantile: f64,
}

/// `β̂_j ± quantile · √Σ̂_jj`.
pub fn coef_ci(fit: &FitResult, sigma: &DMatrix<f64>, j: usize, alpha: f64, rule: DfRule) -> Result<Interval> {
    check_alpha(alpha)?;
    if j >= fit.q() {
        return Err(MetaError::Domain(format!("coefficient index {j} out of range")));
    }
    let var = sigma[(j, j)];
    if !(var > 0.0) {
        return Err(MetaError::Domain(format!("variance of coefficient {j} is {var}")));
    }
    let dist = match rule {
        DfRule::Normal => Dist::Normal,
        DfRule::T => {
            let df = fit.total_effects() as f64 - fit.q() as f64;
            if df < 1.0 {
                return Err(MetaError::DegreesOfFreedom(format!("t rule needs p(k) > q, got df {df}")));
            }
            Dist::StudentT { df }
        }
    };
    let quantile = dist.quantile(1.0 - alpha / 2.0)?;
    let se = var.sqrt();
    let est = fit.beta_hat[j];
    Ok(Interval {
        lower: est - quantile * se,
        upper: est + quantile * se,
        estimate: est,
        std_error: se,
        quantile,
    })
}

/// Volume of an ellipsoid with the given half-axes.
pub fn ellipsoid_volume(half_axes: &[f64]) -> Result<f64> {
    let q = half_axes.len() as f64;
    if half_axes.is_empty() {
        return Err(MetaError::Domain("empty ellipsoid".into()));
    }
    let log_const = (2.0f64).ln() + 0.5 * q * PI.ln() - q.ln() - log_gamma(q / 2.0)?;
    Ok(log_const.exp() * half_axes.iter().product::<f64>())
}

#[derive(Debug, Clone)]
pub struct ConfidenceEllipsoid {
    pub center: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Ascending eigenvalues of `Σ̂`.
    pub eigenvalues: DVector<f64>,
    /// Matching unit eigenvectors in columns.
    pub eigenvectors: DMatrix<f64>,
    /// `√(q · F_crit)`.
    pub radius_scale: f64,
    pub axis_half_lengths: Vec<f64>,
    pub volume: f64,
    pub level: f64,
}

impl ConfidenceEllipsoid {
    /// Whether `beta` lies in the region `Q(β) ≤ q · F_crit`.
    pub fn contains(&self, beta: &DVector<f64>) -> Result<bool> {
        Ok(wald_q(&self.center, beta, &self.sigma)? <= self.radius_scale * self.radius_scale)
    }
}

/// Region of all `β` not rejected by the adjusted F-test at level `alpha`.
pub fn confidence_ellipsoid(beta_hat: &DVector<f64>, sigma: &DMatrix<f64>, k: usize, alpha: f64) -> Result<ConfidenceEllipsoid> {
    check_alpha(alpha)?;
    let q = beta_hat.len();
    invert_covariance(sigma)?;
    let eig = SymmetricEigen::new(symmetrize(sigma));
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let eigenvalues = DVector::from_iterator(q, order.iter().map(|&i| eig.eigenvalues[i]));
    let eigenvectors = DMatrix::from_fn(q, q, |r, c| eig.eigenvectors[(r, order[c])]);
    let fcrit = Dist::F { df1: q as f64, df2: adjusted_df2(q, k) }.quantile(1.0 - alpha)?;
    let r2 = q as f64 * fcrit;
    let axis_half_lengths: Vec<f64> = eigenvalues.iter().map(|l| (l * r2).sqrt()).collect();
    let volume = ellipsoid_volume(&axis_half_lengths)?;
    Ok(ConfidenceEllipsoid {
        center: beta_hat.clone(),
        sigma: symmetrize(sigma),
        eigenvalues,
        eigenvectors,
        radius_scale: r2.sqrt(),
        axis_half_lengths,
        volume,
        level: 1.0 - alpha,
    })
}

/// Wald test of `β = β₀` with the requested reference distribution.
pub fn wald_test(
    fit: &FitResult,
    cov: &CovEstimate,
    beta0: &DVector<f64>,
    method: TestMethod,
    alpha: f64,
) -> Result<TestResult> {
    let q_stat = wald_q(&fit.beta_hat, beta0, &cov.sigma)?;
    let q = fit.q();
    let res = match method {
        TestMethod::ChiSq => chisq_test(q_stat, q, alpha)?,
        TestMethod::F => f_test(q_stat, q, fit.k(), alpha)?,
        TestMethod::FAdjusted => f_test_adjusted(q_stat, q, fit.k(), alpha)?,
        TestMethod::Htz => htz_test(q_stat, q, zhang_df(fit, cov, None)?.eta, alpha)?,
    };
    Ok(res.with_kind(cov.kind))
}

/// Wald test of `Hβ = c`; F-type methods use `s = rows(H)` numerator df.
pub fn wald_test_h(
    fit: &FitResult,
    cov: &CovEstimate,
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    method: TestMethod,
    alpha: f64,
) -> Result<TestResult> {
    let q_stat = wald_q_h(&fit.beta_hat, h, c, &cov.sigma)?;
    let s = h.nrows();
    let res = match method {
        TestMethod::ChiSq => chisq_test(q_stat, s, alpha)?,
        TestMethod::F => f_test(q_stat, s, fit.k(), alpha)?,
        TestMethod::FAdjusted => f_test_adjusted(q_stat, s, fit.k(), alpha)?,
        TestMethod::Htz => htz_test(q_stat, s, zhang_df(fit, cov, Some(h))?.eta, alpha)?,
    };
    Ok(res.with_kind(cov.kind))
}
