//! Sandwich covariance estimators for the WLS coefficients.
//!
//! Every cluster-robust kind has the form
//! `M (Σ_i X_i' W_i Ω_i W_i X_i) M` with `M = (X'WX)⁻¹`; the kinds differ only
//! in how `Ω_i` is built from the residuals `E_i`. Two shapes cover them all:
//! a linear correction `Ω_i = A_i E_i E_i' A_i'` and an elementwise one
//! `Ω_i = (E_i E_i') ∘ C_i`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{MetaError, Result};
use crate::fit::{wls_fit, FitResult, HeterogeneityMatrix};
use crate::linalg::{sym_eigenvalues, sym_inv_sqrt_pinv, symmetrize, upper_cholesky};
use crate::metamodel::Dataset;

/// Leverages above `1 − LEVERAGE_LIMIT` are rejected.
const LEVERAGE_LIMIT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CovKind {
    St,
    Cr0,
    Cr1s,
    Cr2,
    Cr3,
    Cr3s,
    Cr4s,
}

impl CovKind {
    pub const ALL: [CovKind; 7] = [
        CovKind::St,
        CovKind::Cr0,
        CovKind::Cr1s,
        CovKind::Cr2,
        CovKind::Cr3,
        CovKind::Cr3s,
        CovKind::Cr4s,
    ];

    /// Short display label, e.g. `CR1*`.
    pub fn label(self) -> &'static str {
        match self {
            CovKind::St => "ST",
            CovKind::Cr0 => "CR0",
            CovKind::Cr1s => "CR1*",
            CovKind::Cr2 => "CR2",
            CovKind::Cr3 => "CR3",
            CovKind::Cr3s => "CR3*",
            CovKind::Cr4s => "CR4*",
        }
    }

    /// Identifier safe for CSV columns and command lines.
    pub fn id(self) -> &'static str {
        match self {
            CovKind::St => "ST",
            CovKind::Cr0 => "CR0",
            CovKind::Cr1s => "CR1s",
            CovKind::Cr2 => "CR2",
            CovKind::Cr3 => "CR3",
            CovKind::Cr3s => "CR3s",
            CovKind::Cr4s => "CR4s",
        }
    }
}

impl fmt::Display for CovKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for CovKind {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('*', "S");
        Ok(match norm.as_str() {
            "ST" => CovKind::St,
            "CR0" => CovKind::Cr0,
            "CR1S" => CovKind::Cr1s,
            "CR2" => CovKind::Cr2,
            "CR3" => CovKind::Cr3,
            "CR3S" => CovKind::Cr3s,
            "CR4S" => CovKind::Cr4s,
            _ => return Err(MetaError::Input(format!("unknown estimator `{s}`"))),
        })
    }
}

/// How the CR4* exponent is indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Cr4Exponent {
    /// `δ_j = min(4, h_jj / h̄)` for each observation.
    #[default]
    PerObservation,
    /// One `δ_i = min(4, mean_j h_jj / h̄)` per study.
    PerCluster,
}

impl FromStr for Cr4Exponent {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "per-observation" => Ok(Cr4Exponent::PerObservation),
            "per-cluster" => Ok(Cr4Exponent::PerCluster),
            _ => Err(MetaError::Input(format!("unknown CR4 exponent rule `{s}`"))),
        }
    }
}

/// Residual correction for one study.
#[derive(Debug, Clone, PartialEq)]
pub enum Adjustment {
    /// `Ω_i = A E E' A'`.
    Linear(DMatrix<f64>),
    /// `Ω_i = (E E') ∘ C`, `C` symmetric.
    Hadamard(DMatrix<f64>),
}

impl Adjustment {
    fn omega(&self, e: &nalgebra::DVector<f64>) -> DMatrix<f64> {
        let ee = e * e.transpose();
        match self {
            Adjustment::Linear(a) => a * ee * a.transpose(),
            Adjustment::Hadamard(c) => ee.component_mul(c),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovEstimate {
    pub kind: CovKind,
    pub sigma: DMatrix<f64>,
    /// Smallest eigenvalue of `sigma`.
    pub min_eigenvalue: f64,
    /// Set when `sigma` has an eigenvalue below `−1e-10`.
    pub indefinite: bool,
    /// Per-study corrections; empty for ST.
    pub adjustments: Vec<Adjustment>,
    /// Scalar applied to the summed meat (CR1* only, else 1).
    pub meat_scale: f64,
}

impl CovEstimate {
    fn finish(kind: CovKind, sigma: DMatrix<f64>, adjustments: Vec<Adjustment>, meat_scale: f64) -> Self {
        let sigma = symmetrize(&sigma);
        let min_eigenvalue = if sigma.nrows() > 0 { sym_eigenvalues(&sigma)[0] } else { 0.0 };
        Self {
            kind,
            indefinite: min_eigenvalue < -1e-10,
            min_eigenvalue,
            sigma,
            adjustments,
            meat_scale,
        }
    }

    /// Standard errors `√Σ̂_jj` (NaN for non-positive diagonals).
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.sigma.nrows())
            .map(|j| {
                let v = self.sigma[(j, j)];
                if v > 0.0 {
                    v.sqrt()
                } else {
                    f64::NAN
                }
            })
            .collect()
    }
}

/// Model-based covariance `(X'ŴX)⁻¹`.
pub fn cov_st(fit: &FitResult) -> CovEstimate {
    CovEstimate::finish(CovKind::St, fit.bread.clone(), Vec::new(), 1.0)
}

/// Cluster-robust covariance with the default CR4* exponent rule.
pub fn cov_cr(fit: &FitResult, kind: CovKind) -> Result<CovEstimate> {
    cov_cr_with(fit, kind, Cr4Exponent::default())
}

/// Any estimator kind, ST included.
pub fn covariance(fit: &FitResult, kind: CovKind, rule: Cr4Exponent) -> Result<CovEstimate> {
    match kind {
        CovKind::St => Ok(cov_st(fit)),
        _ => cov_cr_with(fit, kind, rule),
    }
}

pub fn cov_cr_with(fit: &FitResult, kind: CovKind, rule: Cr4Exponent) -> Result<CovEstimate> {
    if kind == CovKind::St {
        return Ok(cov_st(fit));
    }
    let k = fit.k();
    let q = fit.q();
    let meat_scale = if kind == CovKind::Cr1s {
        if k <= q {
            return Err(MetaError::DegreesOfFreedom(format!("CR1* needs k > q (k = {k}, q = {q})")));
        }
        k as f64 / (k - q) as f64
    } else {
        1.0
    };
    let adjustments = adjustments(fit, kind, rule)?;
    let mut meat = DMatrix::zeros(q, q);
    for (((x, w), e), adj) in fit.x_blocks.iter().zip(&fit.w_blocks).zip(&fit.e_blocks).zip(&adjustments) {
        let wx = w * x;
        meat += wx.transpose() * adj.omega(e) * &wx;
    }
    let sigma = symmetrize(&(&fit.bread * meat * &fit.bread)) * meat_scale;
    Ok(CovEstimate::finish(kind, sigma, adjustments, meat_scale))
}

/// Per-study residual corrections for a cluster-robust kind.
pub fn adjustments(fit: &FitResult, kind: CovKind, rule: Cr4Exponent) -> Result<Vec<Adjustment>> {
    let k = fit.k();
    match kind {
        CovKind::St => Ok(Vec::new()),
        CovKind::Cr0 | CovKind::Cr1s => Ok(fit
            .e_blocks
            .iter()
            .map(|e| Adjustment::Linear(DMatrix::identity(e.len(), e.len())))
            .collect()),
        CovKind::Cr2 => {
            let phis = fit.phi_blocks();
            (0..k)
                .map(|i| {
                    let phi = &phis[i];
                    let r = upper_cholesky(phi).ok_or_else(|| MetaError::Conditioning {
                        study: fit.study_ids[i].clone(),
                        min_eigenvalue: sym_eigenvalues(phi)[0],
                    })?;
                    let x = &fit.x_blocks[i];
                    let g = symmetrize(&(&r * (phi - x * &fit.bread * x.transpose()) * r.transpose()));
                    let g_isqrt = sym_inv_sqrt_pinv(&g, 1e-10);
                    Ok(Adjustment::Linear(symmetrize(&(r.transpose() * g_isqrt * &r))))
                })
                .collect()
        }
        CovKind::Cr3 => (0..k)
            .map(|i| {
                let h = &fit.h_blocks[i];
                let n = h.nrows();
                let ih = DMatrix::identity(n, n) - h;
                let smin = ih.clone().singular_values().min();
                if smin < 1e-10 {
                    return Err(MetaError::Conditioning {
                        study: fit.study_ids[i].clone(),
                        min_eigenvalue: smin,
                    });
                }
                ih.try_inverse()
                    .map(Adjustment::Linear)
                    .ok_or_else(|| MetaError::Conditioning {
                        study: fit.study_ids[i].clone(),
                        min_eigenvalue: smin,
                    })
            })
            .collect(),
        CovKind::Cr3s | CovKind::Cr4s => {
            let hbar = fit.q() as f64 / fit.total_effects() as f64;
            (0..k)
                .map(|i| {
                    let h = &fit.h_blocks[i];
                    let n = h.nrows();
                    for j in 0..n {
                        if h[(j, j)] > 1.0 - LEVERAGE_LIMIT {
                            return Err(MetaError::Leverage {
                                study: fit.study_ids[i].clone(),
                                row: j,
                                leverage: h[(j, j)],
                            });
                        }
                    }
                    let mean_h = (0..n).map(|j| h[(j, j)]).sum::<f64>() / n as f64;
                    let mut c = DMatrix::from_element(n, n, 1.0);
                    for j in 0..n {
                        let delta = match (kind, rule) {
                            (CovKind::Cr3s, _) => 2.0,
                            (_, Cr4Exponent::PerObservation) => (h[(j, j)] / hbar).min(4.0),
                            (_, Cr4Exponent::PerCluster) => (mean_h / hbar).min(4.0),
                        };
                        c[(j, j)] = (1.0 - h[(j, j)]).powf(-delta);
                    }
                    Ok(Adjustment::Hadamard(c))
                })
                .collect()
        }
    }
}

/// Centering of the delete-one-study jackknife.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JackknifeCentering {
    /// `Σ_i (β̂_(i) − β̂)(β̂_(i) − β̂)'`.
    FullSample,
    /// `(k−1)/k · Σ_i (β̂_(i) − β̄)(β̂_(i) − β̄)'` with `β̄` the mean of the deletes.
    LeaveOneOutMean,
}

/// Delete-one-study jackknife covariance of `β̂` with `T` held fixed.
pub fn cr3_jackknife_oracle(ds: &Dataset, t: &HeterogeneityMatrix, centering: JackknifeCentering) -> Result<DMatrix<f64>> {
    let k = ds.k();
    if k <= ds.q {
        return Err(MetaError::DegreesOfFreedom(format!("jackknife needs k > q (k = {k}, q = {})", ds.q)));
    }
    let full = wls_fit(ds, t)?;
    let mut deletes = Vec::with_capacity(k);
    for i in 0..k {
        let sub = ds.without_study(i)?;
        let fit = wls_fit(&sub, t).map_err(|e| match e {
            MetaError::RankDeficient { rank, q, .. } => MetaError::Input(format!(
                "design is rank deficient ({rank} < {q}) without study {}",
                ds.blocks[i].study_id
            )),
            other => other,
        })?;
        deletes.push(fit.beta_hat);
    }
    let center = match centering {
        JackknifeCentering::FullSample => full.beta_hat.clone(),
        JackknifeCentering::LeaveOneOutMean => deletes.iter().fold(nalgebra::DVector::zeros(ds.q), |a, b| a + b) / k as f64,
    };
    let mut acc = DMatrix::zeros(ds.q, ds.q);
    for b in &deletes {
        let d = b - &center;
        acc += &d * d.transpose();
    }
    if centering == JackknifeCentering::LeaveOneOutMean {
        acc *= (k - 1) as f64 / k as f64;
    }
    Ok(symmetrize(&acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{fit_model, TStructure};
    use crate::metamodel::{ingest_reader, IngestOptions, StudyBlock};
    use crate::statdist::{MvNormal, RngStream};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;

    const FIVE_STUDIES: &str = "study,yi,vi,outcome
1,-0.11,0.45,DFS
1,-0.14,0.66,OS
2,0.30,0.07,DFS
2,0.67,0.08,OS
3,0.41,0.77,DFS
3,0.43,0.66,OS
4,0.47,0.29,DFS
4,2.08,0.45,OS
5,0.76,0.24,DFS
5,0.70,0.31,OS
";

    fn five_study_fit() -> FitResult {
        let ds = ingest_reader(FIVE_STUDIES.as_bytes(), &IngestOptions::with_rho(0.5)).unwrap();
        fit_model(&ds, &TStructure::Unstructured).unwrap()
    }

    /// Bivariate design with a moderator and some missing outcomes.
    fn moderated(k: usize, seed: u64) -> (Dataset, HeterogeneityMatrix) {
        let mut rng = RngStream::new(seed, 0).rng();
        use rand::Rng;
        let t = DMatrix::from_row_slice(2, 2, &[0.1, 0.02, 0.02, 0.15]);
        let mut blocks = Vec::new();
        for i in 0..k {
            let x: f64 = rng.random();
            let outcomes = match i % 5 {
                3 => vec![0],
                4 => vec![1],
                _ => vec![0, 1],
            };
            let vs: Vec<f64> = outcomes.iter().map(|_| 0.05 + 0.3 * rng.random::<f64>()).collect();
            let v = crate::metamodel::assumed_v(&vs, 0.6);
            let xm = crate::metamodel::design_rows(&outcomes, 2, Some(x));
            let y = DVector::from_iterator(outcomes.len(), (0..outcomes.len()).map(|_| rng.random::<f64>() - 0.5));
            blocks.push(StudyBlock::new(format!("s{i}"), outcomes, xm, v, y).unwrap());
        }
        let labels = crate::metamodel::coef_labels(&["A".to_string(), "B".to_string()], true);
        (
            Dataset::new(blocks, vec!["A".into(), "B".into()], labels).unwrap(),
            HeterogeneityMatrix::fixed(t).unwrap(),
        )
    }

    #[test]
    fn st_single_weight() {
        let b = StudyBlock::new(
            "a",
            vec![0],
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.25),
            DVector::from_element(1, 0.3),
        )
        .unwrap();
        let ds = Dataset::new(vec![b], vec!["y".into()], vec!["mu".into()]).unwrap();
        let fit = wls_fit(&ds, &HeterogeneityMatrix::zero(1)).unwrap();
        assert_abs_diff_eq!(cov_st(&fit).sigma[(0, 0)], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn doubling_weights_halves_st() {
        let (ds, t) = moderated(12, 1);
        let fit = wls_fit(&ds, &t).unwrap();
        let mut half = ds.clone();
        for b in half.blocks.iter_mut() {
            b.v *= 0.5;
        }
        let fit2 = wls_fit(&half, &HeterogeneityMatrix::fixed(&t.t * 0.5).unwrap()).unwrap();
        assert_abs_diff_eq!(cov_st(&fit).sigma * 0.5, cov_st(&fit2).sigma, epsilon = 1e-12);
    }

    #[test]
    fn zero_residuals_give_zero() {
        let (ds, t) = moderated(10, 2);
        let beta = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
        let ds = ds.with_outcomes(ds.blocks.iter().map(|b| &b.x * &beta).collect());
        let fit = wls_fit(&ds, &t).unwrap();
        for kind in &CovKind::ALL[1..] {
            assert!(cov_cr(&fit, *kind).unwrap().sigma.amax() < 1e-20, "{kind}");
        }
    }

    #[test]
    fn leverage_free_limit_collapses_to_cr0() {
        let mut fit = five_study_fit();
        for h in fit.h_blocks.iter_mut() {
            h.fill(0.0);
        }
        let cr0 = cov_cr(&fit, CovKind::Cr0).unwrap().sigma;
        for kind in [CovKind::Cr3, CovKind::Cr3s, CovKind::Cr4s] {
            assert_eq!(cov_cr(&fit, kind).unwrap().sigma, cr0, "{kind}");
        }
    }

    #[test]
    fn cr1_ratio_is_exact() {
        let fit = five_study_fit();
        let a = cov_cr(&fit, CovKind::Cr0).unwrap().sigma;
        let b = cov_cr(&fit, CovKind::Cr1s).unwrap().sigma;
        let r = fit.k() as f64 / (fit.k() - fit.q()) as f64;
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((y - x * r).abs() <= 1e-15 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn cr1_needs_k_above_q() {
        let (ds, t) = moderated(4, 3);
        let fit = wls_fit(&ds, &t);
        if let Ok(fit) = fit {
            assert!(matches!(cov_cr(&fit, CovKind::Cr1s), Err(MetaError::DegreesOfFreedom(_))));
        }
    }

    #[test]
    fn estimator_shapes_and_symmetry() {
        let fit = five_study_fit();
        for kind in CovKind::ALL {
            let c = covariance(&fit, kind, Cr4Exponent::PerObservation).unwrap();
            assert_eq!(c.sigma.shape(), (2, 2));
            assert!((c.sigma.clone() - c.sigma.transpose()).amax() <= 1e-12);
            if !matches!(kind, CovKind::Cr3s | CovKind::Cr4s) {
                assert!(!c.indefinite, "{kind}");
            }
        }
    }

    #[test]
    fn cr3_meat_matches_written_form() {
        let fit = five_study_fit();
        let mut meat = DMatrix::zeros(2, 2);
        for i in 0..fit.k() {
            let a = (DMatrix::identity(2, 2) - &fit.h_blocks[i]).try_inverse().unwrap();
            let ae = a * &fit.e_blocks[i];
            let u = fit.x_blocks[i].transpose() * &fit.w_blocks[i] * ae;
            meat += &u * u.transpose();
        }
        let expect = &fit.bread * meat * &fit.bread;
        assert_abs_diff_eq!(cov_cr(&fit, CovKind::Cr3).unwrap().sigma, expect, epsilon = 1e-14);
    }

    #[test]
    fn cr3s_diagonal_only_adjustment() {
        let fit = five_study_fit();
        let adj = adjustments(&fit, CovKind::Cr3s, Cr4Exponent::PerObservation).unwrap();
        for (a, h) in adj.iter().zip(&fit.h_blocks) {
            let Adjustment::Hadamard(c) = a else { panic!() };
            assert_eq!(c[(0, 1)], 1.0);
            assert_abs_diff_eq!(c[(0, 0)], (1.0 - h[(0, 0)]).powi(-2), epsilon = 1e-12);
        }
    }

    #[test]
    fn cr4_exponent_rules() {
        let fit = five_study_fit();
        let hbar = fit.q() as f64 / fit.total_effects() as f64;
        let per_obs = adjustments(&fit, CovKind::Cr4s, Cr4Exponent::PerObservation).unwrap();
        let per_cl = adjustments(&fit, CovKind::Cr4s, Cr4Exponent::PerCluster).unwrap();
        for ((a, b), h) in per_obs.iter().zip(&per_cl).zip(&fit.h_blocks) {
            let (Adjustment::Hadamard(a), Adjustment::Hadamard(b)) = (a, b) else { panic!() };
            let d1 = (h[(1, 1)] / hbar).min(4.0);
            assert_abs_diff_eq!(a[(1, 1)], (1.0 - h[(1, 1)]).powf(-d1), epsilon = 1e-12);
            let dm = ((h[(0, 0)] + h[(1, 1)]) / 2.0 / hbar).min(4.0);
            assert_abs_diff_eq!(b[(0, 0)], (1.0 - h[(0, 0)]).powf(-dm), epsilon = 1e-12);
        }
    }

    #[test]
    fn near_one_leverage_is_rejected() {
        let mut fit = five_study_fit();
        fit.h_blocks[2][(1, 1)] = 1.0 - 1e-10;
        match cov_cr(&fit, CovKind::Cr4s) {
            Err(MetaError::Leverage { study, row, .. }) => {
                assert_eq!(study, "3");
                assert_eq!(row, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cr2_univariate_ols_matches_bell_mccaffrey() {
        // equal variances, T = 0: CR2 reduces to (I − H_ii)^{-1/2}
        let mut blocks = Vec::new();
        for (i, (x, y)) in [(0.0, 0.1), (0.5, 0.4), (1.0, 0.2), (1.5, 0.9), (3.0, 1.1)].iter().enumerate() {
            blocks.push(
                StudyBlock::new(
                    format!("{i}"),
                    vec![0],
                    DMatrix::from_row_slice(1, 2, &[1.0, *x]),
                    DMatrix::from_element(1, 1, 1.0),
                    DVector::from_element(1, *y),
                )
                .unwrap(),
            );
        }
        let ds = Dataset::new(blocks, vec!["y".into()], vec!["a".into(), "b".into()]).unwrap();
        let fit = wls_fit(&ds, &HeterogeneityMatrix::zero(1)).unwrap();
        let adj = adjustments(&fit, CovKind::Cr2, Cr4Exponent::PerObservation).unwrap();
        for (a, h) in adj.iter().zip(&fit.h_blocks) {
            let Adjustment::Linear(a) = a else { panic!() };
            assert_abs_diff_eq!(a[(0, 0)], (1.0 - h[(0, 0)]).powf(-0.5), epsilon = 1e-12);
        }
    }

    #[test]
    fn jackknife_full_sample_equals_cr3() {
        let (ds, t) = moderated(15, 4);
        let fit = wls_fit(&ds, &t).unwrap();
        let cr3 = cov_cr(&fit, CovKind::Cr3).unwrap().sigma;
        let jk = cr3_jackknife_oracle(&ds, &t, JackknifeCentering::FullSample).unwrap();
        assert!((&jk - &cr3).amax() <= 1e-10 * cr3.amax(), "{jk} {cr3}");
    }

    #[test]
    fn jackknife_balanced_identical_designs() {
        // identical designs and variances, varying outcomes only
        let mut rng = RngStream::new(9, 0).rng();
        use rand::Rng;
        let blocks: Vec<StudyBlock> = (0..8)
            .map(|i| {
                StudyBlock::new(
                    format!("{i}"),
                    vec![0, 1],
                    DMatrix::identity(2, 2),
                    crate::metamodel::assumed_v(&[0.2, 0.2], 0.5),
                    DVector::from_vec(vec![rng.random(), rng.random()]),
                )
                .unwrap()
            })
            .collect();
        let ds = Dataset::new(blocks, vec!["A".into(), "B".into()], vec!["A".into(), "B".into()]).unwrap();
        let t = HeterogeneityMatrix::fixed(DMatrix::from_row_slice(2, 2, &[0.05, 0.0, 0.0, 0.05])).unwrap();
        let fit = wls_fit(&ds, &t).unwrap();
        let cr3 = cov_cr(&fit, CovKind::Cr3).unwrap().sigma;
        let jk = cr3_jackknife_oracle(&ds, &t, JackknifeCentering::FullSample).unwrap();
        for (a, b) in jk.iter().zip(cr3.iter()) {
            assert!((a - b).abs() <= 1e-3 * b.abs().max(1e-12));
        }
        // with balanced designs the delete mean equals β̂, so both centerings differ only by (k−1)/k
        let tukey = cr3_jackknife_oracle(&ds, &t, JackknifeCentering::LeaveOneOutMean).unwrap();
        assert_abs_diff_eq!(tukey, &jk * (7.0 / 8.0), epsilon = 1e-12);
    }

    #[test]
    fn jackknife_minimal_case_runs() {
        let (ds, t) = moderated(20, 5);
        let keep: Vec<usize> = (0..ds.k()).filter(|i| i % 5 < 3).take(5).collect();
        let mut small = ds.clone();
        small.blocks = keep.iter().map(|&i| ds.blocks[i].clone()).collect();
        let small = Dataset::new(small.blocks, small.outcome_labels, small.coef_labels).unwrap();
        assert_eq!(small.k(), small.q + 1);
        assert!(cr3_jackknife_oracle(&small, &t, JackknifeCentering::FullSample).is_ok());
    }

    #[test]
    fn cr2_is_unbiased_under_working_model() {
        let (ds, t) = moderated(10, 6);
        let base = wls_fit(&ds, &t).unwrap();
        let truth = base.bread.clone();
        let beta = DVector::from_vec(vec![0.2, 0.3, -0.1, 0.5]);
        let dists: Vec<MvNormal> = ds
            .blocks
            .iter()
            .map(|b| MvNormal::new(&b.x * &beta, &(t.submatrix(&b.outcomes) + &b.v)).unwrap())
            .collect();
        let reps = 2000;
        let mut rng = RngStream::new(2024, 1).rng();
        let mut cr2s = Vec::with_capacity(reps);
        let mut cr0s = Vec::with_capacity(reps);
        let mut betas = Vec::with_capacity(reps);
        for _ in 0..reps {
            let ys: Vec<DVector<f64>> = dists.iter().map(|d| d.sample(&mut rng)).collect();
            let fit = wls_fit(&ds.with_outcomes(ys), &t).unwrap();
            cr2s.push(cov_cr(&fit, CovKind::Cr2).unwrap().sigma);
            cr0s.push(cov_cr(&fit, CovKind::Cr0).unwrap().sigma);
            betas.push(fit.beta_hat);
        }
        let n = reps as f64;
        let mean = |v: &[DMatrix<f64>]| v.iter().fold(DMatrix::zeros(4, 4), |a, b| a + b) / n;
        let m2 = mean(&cr2s);
        let m0 = mean(&cr0s);
        let bbar = betas.iter().fold(DVector::zeros(4), |a, b| a + b) / n;
        for a in 0..4 {
            for b in 0..4 {
                let sd = (cr2s.iter().map(|s| (s[(a, b)] - m2[(a, b)]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                let se_mean = sd / n.sqrt();
                assert!((m2[(a, b)] - truth[(a, b)]).abs() < 3.0 * se_mean, "CR2 ({a},{b}) {} vs {}", m2[(a, b)], truth[(a, b)]);
                // empirical covariance of β̂
                let prods: Vec<f64> = betas.iter().map(|x| (x[a] - bbar[a]) * (x[b] - bbar[b])).collect();
                let emp = prods.iter().sum::<f64>() / (n - 1.0);
                let emp_se = (prods.iter().map(|p| (p - emp).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
                let comb = (se_mean * se_mean + emp_se * emp_se).sqrt();
                assert!((m2[(a, b)] - emp).abs() < 3.0 * comb, "CR2 vs empirical ({a},{b})");
            }
            assert!(m0[(a, a)] < truth[(a, a)], "CR0 should be biased downward");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn permutation_invariance(seed in 0u64..1000, shift in 1usize..11) {
            let (ds, t) = moderated(12, seed);
            let mut perm = ds.clone();
            perm.blocks.rotate_left(shift % ds.k());
            perm.blocks.swap(0, 3);
            let a = wls_fit(&ds, &t).unwrap();
            let b = wls_fit(&perm, &t).unwrap();
            for kind in CovKind::ALL {
                let sa = covariance(&a, kind, Cr4Exponent::PerObservation).unwrap().sigma;
                let sb = covariance(&b, kind, Cr4Exponent::PerObservation).unwrap().sigma;
                prop_assert!((&sa - &sb).amax() <= 1e-10 * sa.amax().max(1e-300));
            }
        }

        #[test]
        fn cr1_ratio_random(seed in 0u64..1000) {
            let (ds, t) = moderated(9, seed);
            let fit = wls_fit(&ds, &t).unwrap();
            let a = cov_cr(&fit, CovKind::Cr0).unwrap().sigma;
            let b = cov_cr(&fit, CovKind::Cr1s).unwrap().sigma;
            let r = 9.0 / 5.0;
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((y - x * r).abs() <= 1e-14 * y.abs().max(1e-300));
            }
        }
    }
}
