//! Between-study heterogeneity estimation, inverse-variance weights, the
//! weighted least squares fit, and hat-matrix blocks.
//!
//! The restricted log-likelihood of `Y ~ N(Xβ, T ⊗ blocks + V)` is maximised
//! over the Cholesky factor of `T` (log-diagonal, free off-diagonal) with
//! BFGS on an analytic gradient. Two starts are tried (method of moments and
//! near zero) and the best optimum is kept.

use nalgebra::{DMatrix, DVector};

use crate::error::{MetaError, Result};
use crate::linalg::{pivoted_cholesky, spd_inverse, sym_apply, sym_eigenvalues, symmetrize};
use crate::metamodel::Dataset;

/// Minimum eigenvalue accepted for `T_i + V_i`.
const BLOCK_MIN_EIG: f64 = 1e-12;

/// Parameter space for the heterogeneity matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum TStructure {
    /// Any PSD matrix.
    Unstructured,
    /// `τ²·[[1, c1], [c1, c2]]` with a single free `τ²` (two outcomes only).
    Proportional { c1: f64, c2: f64 },
    /// Supplied matrix, not estimated.
    Fixed(DMatrix<f64>),
}

/// Between-study covariance `T` together with the structure it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityMatrix {
    pub t: DMatrix<f64>,
    pub structure: TStructure,
}

impl HeterogeneityMatrix {
    pub fn new(t: DMatrix<f64>, structure: TStructure) -> Result<Self> {
        if t.nrows() != t.ncols() {
            return Err(MetaError::Domain("heterogeneity matrix must be square".into()));
        }
        for r in 0..t.nrows() {
            for c in 0..r {
                if (t[(r, c)] - t[(c, r)]).abs() > 1e-12 {
                    return Err(MetaError::Domain("heterogeneity matrix is not symmetric".into()));
                }
            }
        }
        if t.nrows() > 0 {
            let lo = sym_eigenvalues(&t)[0];
            if lo < -1e-10 {
                return Err(MetaError::NotPsd { minor: t.nrows(), pivot: lo });
            }
        }
        Ok(Self { t, structure })
    }

    /// Known matrix used as-is.
    pub fn fixed(t: DMatrix<f64>) -> Result<Self> {
        Self::new(t.clone(), TStructure::Fixed(t))
    }

    pub fn zero(p: usize) -> Self {
        let t = DMatrix::zeros(p, p);
        Self {
            t: t.clone(),
            structure: TStructure::Fixed(t),
        }
    }

    /// Rows/columns of `T` for the observed outcomes of a study.
    pub fn submatrix(&self, outcomes: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(outcomes.len(), outcomes.len(), |r, c| self.t[(outcomes[r], outcomes[c])])
    }
}

/// Everything downstream estimators need from a fitted model.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub t_hat: HeterogeneityMatrix,
    /// `Ŵ_i = (T̂_i + V_i)⁻¹`.
    pub w_blocks: Vec<DMatrix<f64>>,
    /// Diagonal blocks `H_ii = X_i (X'ŴX)⁻¹ X_i' Ŵ_i` of the hat matrix.
    pub h_blocks: Vec<DMatrix<f64>>,
    /// Residuals `E_i = Y_i − X_i β̂`.
    pub e_blocks: Vec<DVector<f64>>,
    pub x_blocks: Vec<DMatrix<f64>>,
    pub study_ids: Vec<String>,
    /// `(X'ŴX)⁻¹`.
    pub bread: DMatrix<f64>,
    pub converged: bool,
    /// Set when `T̂` sits on the PSD boundary.
    pub boundary: bool,
    /// Restricted log-likelihood at `T̂` (constant terms dropped).
    pub reml_loglik: f64,
}

impl FitResult {
    pub fn k(&self) -> usize {
        self.e_blocks.len()
    }

    pub fn q(&self) -> usize {
        self.beta_hat.len()
    }

    /// `p(k)`, the number of observed effects.
    pub fn total_effects(&self) -> usize {
        self.e_blocks.iter().map(|e| e.len()).sum()
    }

    /// Working-model covariance blocks `Φ_i = Ŵ_i⁻¹ = T̂_i + V_i`.
    pub fn phi_blocks(&self) -> Vec<DMatrix<f64>> {
        self.w_blocks
            .iter()
            .map(|w| spd_inverse(w, 0.0).unwrap_or_else(|_| DMatrix::zeros(w.nrows(), w.ncols())))
            .collect()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.e_blocks
            .iter()
            .map(|e| {
                let o = acc;
                acc += e.len();
                o
            })
            .collect()
    }

    /// The full `p(k) × p(k)` hat matrix `X (X'ŴX)⁻¹ X' Ŵ`.
    pub fn hat_matrix(&self) -> DMatrix<f64> {
        let n = self.total_effects();
        let offs = self.offsets();
        let mut h = DMatrix::zeros(n, n);
        for (i, xi) in self.x_blocks.iter().enumerate() {
            let left = xi * &self.bread;
            for (j, xj) in self.x_blocks.iter().enumerate() {
                let block = &left * xj.transpose() * &self.w_blocks[j];
                h.view_mut((offs[i], offs[j]), (xi.nrows(), xj.nrows())).copy_from(&block);
            }
        }
        h
    }

    /// Stacked design matrix.
    pub fn design(&self) -> DMatrix<f64> {
        let n = self.total_effects();
        let mut x = DMatrix::zeros(n, self.q());
        for (o, xi) in self.offsets().into_iter().zip(&self.x_blocks) {
            x.view_mut((o, 0), (xi.nrows(), xi.ncols())).copy_from(xi);
        }
        x
    }

    /// `Σ_i X_i' Ŵ_i E_i`, zero at the WLS solution.
    pub fn score(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.q());
        for ((x, w), e) in self.x_blocks.iter().zip(&self.w_blocks).zip(&self.e_blocks) {
            s += x.transpose() * (w * e);
        }
        s
    }
}

/// Per-`T` quantities shared by the likelihood and the WLS fit.
struct Profile {
    w_blocks: Vec<DMatrix<f64>>,
    logdet_sigma: f64,
    bread: DMatrix<f64>,
    logdet_info: f64,
    beta: DVector<f64>,
}

fn logdet_spd(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).iter().map(|l| l.ln()).sum()
}

fn profile(ds: &Dataset, t: &HeterogeneityMatrix) -> Result<Profile> {
    let q = ds.q;
    let mut w_blocks = Vec::with_capacity(ds.k());
    let mut logdet_sigma = 0.0;
    let mut info = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for b in &ds.blocks {
        let sigma = t.submatrix(&b.outcomes) + &b.v;
        let w = spd_inverse(&sigma, BLOCK_MIN_EIG).map_err(|lo| MetaError::Conditioning {
            study: b.study_id.clone(),
            min_eigenvalue: lo,
        })?;
        logdet_sigma += logdet_spd(&sigma);
        let xtw = b.x.transpose() * &w;
        info += &xtw * &b.x;
        rhs += &xtw * &b.y;
        w_blocks.push(w);
    }
    let info = symmetrize(&info);
    let scale = (0..q).map(|j| info[(j, j)]).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    let piv = pivoted_cholesky(&info, 1e-12 * scale)?;
    if piv.rank < q {
        return Err(MetaError::RankDeficient {
            rank: piv.rank,
            q,
            dependent: piv.dependent_columns(),
        });
    }
    let chol = nalgebra::Cholesky::new(info.clone()).ok_or(MetaError::RankDeficient {
        rank: piv.rank,
        q,
        dependent: vec![],
    })?;
    let bread = symmetrize(&chol.inverse());
    let logdet_info = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let beta = &bread * rhs;
    Ok(Profile {
        w_blocks,
        logdet_sigma,
        bread,
        logdet_info,
        beta,
    })
}

/// Restricted log-likelihood (without the `2π` constant) and its gradient
/// with respect to the entries of `T` as a symmetric matrix `G`, so that
/// `dℓ = tr(G dT)`.
fn reml_value_and_gradient(ds: &Dataset, t: &HeterogeneityMatrix) -> Result<(f64, DMatrix<f64>)> {
    let prof = profile(ds, t)?;
    let mut quad = 0.0;
    let mut grad = DMatrix::zeros(ds.p, ds.p);
    for (b, w) in ds.blocks.iter().zip(&prof.w_blocks) {
        let r = &b.y - &b.x * &prof.beta;
        let a = w * &r;
        quad += r.dot(&a);
        let wx = w * &b.x;
        let p_ii = w - &wx * &prof.bread * wx.transpose();
        let inner = p_ii - &a * a.transpose();
        for (ri, &oi) in b.outcomes.iter().enumerate() {
            for (ci, &oc) in b.outcomes.iter().enumerate() {
                grad[(oi, oc)] -= 0.5 * inner[(ri, ci)];
            }
        }
    }
    let ll = -0.5 * (prof.logdet_sigma + prof.logdet_info + quad);
    Ok((ll, grad))
}

/// Restricted log-likelihood of the dataset at a given `T`.
pub fn reml_loglik(ds: &Dataset, t: &HeterogeneityMatrix) -> Result<f64> {
    reml_value_and_gradient(ds, t).map(|(ll, _)| ll)
}

/// Optimiser controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemlOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            step_tol: 1e-8,
        }
    }
}

/// Result of the heterogeneity optimisation.
#[derive(Debug, Clone)]
pub struct RemlFit {
    pub t: HeterogeneityMatrix,
    pub loglik: f64,
    pub converged: bool,
    pub boundary: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Maps unconstrained parameters to `T` and back-propagates `G`.
trait Parameterisation {
    fn dim(&self) -> usize;
    fn to_t(&self, theta: &[f64]) -> DMatrix<f64>;
    fn gradient(&self, theta: &[f64], g: &DMatrix<f64>) -> Vec<f64>;
    fn params_of(&self, t: &DMatrix<f64>) -> Vec<f64>;
}

struct CholeskyParams {
    p: usize,
}

impl CholeskyParams {
    fn lower(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.p, self.p);
        let mut idx = 0;
        for r in 0..self.p {
            for c in 0..=r {
                l[(r, c)] = if r == c { theta[idx].exp() } else { theta[idx] };
                idx += 1;
            }
        }
        l
    }
}

impl Parameterisation for CholeskyParams {
    fn dim(&self) -> usize {
        self.p * (self.p + 1) / 2
    }

    fn to_t(&self, theta: &[f64]) -> DMatrix<f64> {
        let l = self.lower(theta);
        symmetrize(&(&l * l.transpose()))
    }

    fn gradient(&self, theta: &[f64], g: &DMatrix<f64>) -> Vec<f64> {
        let l = self.lower(theta);
        let gl = (symmetrize(g) * &l) * 2.0;
        let mut out = Vec::with_capacity(self.dim());
        for r in 0..self.p {
            for c in 0..=r {
                out.push(if r == c { gl[(r, c)] * l[(r, c)] } else { gl[(r, c)] });
            }
        }
        out
    }

    fn params_of(&self, t: &DMatrix<f64>) -> Vec<f64> {
        let floor = 1e-8 * (0..self.p).map(|j| t[(j, j)]).fold(0.0_f64, f64::max).max(1e-12);
        let t = sym_apply(t, |l| l.max(floor));
        let l = nalgebra::Cholesky::new(t).map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(self.p, self.p));
        let mut out = Vec::with_capacity(self.dim());
        for r in 0..self.p {
            for c in 0..=r {
                out.push(if r == c { l[(r, c)].max(1e-150).ln() } else { l[(r, c)] });
            }
        }
        out
    }
}

struct ProportionalParams {
    shape: DMatrix<f64>,
}

impl Parameterisation for ProportionalParams {
    fn dim(&self) -> usize {
        1
    }

    fn to_t(&self, theta: &[f64]) -> DMatrix<f64> {
        &self.shape * (2.0 * theta[0]).exp()
    }

    fn gradient(&self, theta: &[f64], g: &DMatrix<f64>) -> Vec<f64> {
        let t = self.to_t(theta);
        vec![2.0 * (g.transpose() * t).trace()]
    }

    fn params_of(&self, t: &DMatrix<f64>) -> Vec<f64> {
        let tau2 = (t[(0, 0)] / self.shape[(0, 0)]).max(1e-12);
        vec![0.5 * tau2.ln()]
    }
}

struct BfgsOutcome {
    theta: Vec<f64>,
    value: f64,
    gradient_norm: f64,
    iterations: usize,
    converged: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Minimises `f` with BFGS and a backtracking Armijo line search.
fn bfgs<F>(f: F, start: Vec<f64>, opts: &RemlOptions) -> Result<BfgsOutcome>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = start.len();
    let mut x = start;
    let (mut fx, mut gx) = f(&x).ok_or_else(|| MetaError::Degenerate("REML objective undefined at start".into()))?;
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut resets = 0;

    for iter in 0..opts.max_iter {
        let gnorm = inf_norm(&gx);
        if gnorm < opts.grad_tol {
            return Ok(BfgsOutcome {
                theta: x,
                value: fx,
                gradient_norm: gnorm,
                iterations: iter,
                converged: true,
            });
        }
        let g = DVector::from_column_slice(&gx);
        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        // cap the step in log space
        let max_comp = dir.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if max_comp > 3.0 {
            dir *= 3.0 / max_comp;
        }
        let slope = dir.dot(&g);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-12 {
            let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + 1e-4 * alpha * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if resets == 0 {
                resets += 1;
                hinv = DMatrix::identity(n, n);
                continue;
            }
            return Ok(BfgsOutcome {
                theta: x,
                value: fx,
                gradient_norm: gnorm,
                iterations: iter,
                converged: gnorm < 1e-4,
            });
        };
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, gnew.iter().zip(&gx).map(|(a, b)| a - b));
        let step = inf_norm(s.as_slice());
        let df = fx - fnew;
        x = xn;
        fx = fnew;
        gx = gnew;
        if step < opts.step_tol && df.abs() <= 1e-14 * (1.0 + fx.abs()) {
            let gnorm = inf_norm(&gx);
            return Ok(BfgsOutcome {
                theta: x,
                value: fx,
                gradient_norm: gnorm,
                iterations: iter + 1,
                converged: gnorm < 1e-4,
            });
        }
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(n, n);
            let left = &id - &s * y.transpose() * rho;
            let right = &id - &y * s.transpose() * rho;
            hinv = &left * &hinv * &right + &s * s.transpose() * rho;
        }
    }
    Err(MetaError::NonConvergence {
        iterations: opts.max_iter,
        gradient_norm: inf_norm(&gx),
        best: x,
    })
}

/// Method-of-moments start: per-outcome excess residual variance after a
/// fixed-effect fit, zero correlation.
fn moment_start(ds: &Dataset) -> Result<DMatrix<f64>> {
    let fe = wls_fit(ds, &HeterogeneityMatrix::zero(ds.p))?;
    let mut sum_e2 = vec![0.0; ds.p];
    let mut sum_v = vec![0.0; ds.p];
    let mut count = vec![0usize; ds.p];
    for (b, e) in ds.blocks.iter().zip(&fe.e_blocks) {
        for (r, &o) in b.outcomes.iter().enumerate() {
            sum_e2[o] += e[r] * e[r];
            sum_v[o] += b.v[(r, r)];
            count[o] += 1;
        }
    }
    let mut t = DMatrix::zeros(ds.p, ds.p);
    for o in 0..ds.p {
        let n = count[o].max(1) as f64;
        let vbar = sum_v[o] / n;
        let adj = (n / (n - (ds.q as f64 / ds.p as f64)).max(1.0)).max(1.0);
        t[(o, o)] = (adj * sum_e2[o] / n - vbar).max(0.05 * vbar);
    }
    Ok(t)
}

fn mean_variance(ds: &Dataset) -> Vec<f64> {
    let mut sum = vec![0.0; ds.p];
    let mut count = vec![0usize; ds.p];
    for b in &ds.blocks {
        for (r, &o) in b.outcomes.iter().enumerate() {
            sum[o] += b.v[(r, r)];
            count[o] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 1.0 }).collect()
}

/// REML estimate of `T` under the given structure.
pub fn estimate_t_reml(ds: &Dataset, structure: &TStructure) -> Result<RemlFit> {
    estimate_t_reml_with(ds, structure, &RemlOptions::default())
}

pub fn estimate_t_reml_with(ds: &Dataset, structure: &TStructure, opts: &RemlOptions) -> Result<RemlFit> {
    if ds.k() < 2 {
        return Err(MetaError::Domain("heterogeneity estimation needs at least two studies".into()));
    }
    let params: Box<dyn Parameterisation> = match structure {
        TStructure::Fixed(t) => {
            let hm = HeterogeneityMatrix::new(t.clone(), structure.clone())?;
            if t.nrows() != ds.p {
                return Err(MetaError::Domain(format!("fixed T must be {}×{}", ds.p, ds.p)));
            }
            let loglik = reml_loglik(ds, &hm)?;
            return Ok(RemlFit {
                t: hm,
                loglik,
                converged: true,
                boundary: false,
                iterations: 0,
                gradient_norm: 0.0,
            });
        }
        TStructure::Unstructured => {
            if ds.p > 1 && !ds.blocks.iter().any(|b| b.p_i() > 1) {
                return Err(MetaError::Domain(
                    "an unstructured T needs at least one study reporting several outcomes".into(),
                ));
            }
            Box::new(CholeskyParams { p: ds.p })
        }
        TStructure::Proportional { c1, c2 } => {
            if ds.p != 2 {
                return Err(MetaError::Domain("proportional T is defined for two outcomes".into()));
            }
            let shape = DMatrix::from_row_slice(2, 2, &[1.0, *c1, *c1, *c2]);
            if sym_eigenvalues(&shape)[0] < -1e-12 {
                return Err(MetaError::Domain("proportional shape matrix is not PSD".into()));
            }
            Box::new(ProportionalParams { shape })
        }
    };

    let objective = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        let t = HeterogeneityMatrix {
            t: params.to_t(theta),
            structure: structure.clone(),
        };
        let (ll, g) = reml_value_and_gradient(ds, &t).ok()?;
        let grad = params.gradient(theta, &g);
        Some((-ll, grad.into_iter().map(|v| -v).collect()))
    };

    let vbar = mean_variance(ds);
    let small = DMatrix::from_diagonal(&DVector::from_iterator(ds.p, vbar.iter().map(|v| 1e-3 * v)));
    let mut starts = vec![params.params_of(&small)];
    if let Ok(mom) = moment_start(ds) {
        starts.insert(0, params.params_of(&mom));
    }

    let mut best: Option<BfgsOutcome> = None;
    let mut last_err = None;
    for start in starts {
        match bfgs(objective, start, opts) {
            Ok(out) => {
                let better = match &best {
                    None => true,
                    Some(b) => (out.converged && !b.converged) || (out.converged == b.converged && out.value < b.value),
                };
                if better {
                    best = Some(out);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let best = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or(MetaError::Degenerate("REML failed".into()))),
    };
    if !best.converged {
        return Err(MetaError::NonConvergence {
            iterations: best.iterations,
            gradient_norm: best.gradient_norm,
            best: best.theta,
        });
    }

    let raw = params.to_t(&best.theta);
    let boundary = sym_eigenvalues(&raw)[0] < 1e-10;
    let t = if boundary { sym_apply(&raw, |l| if l < 1e-10 { 0.0 } else { l }) } else { raw };
    let t = symmetrize(&t);
    let hm = HeterogeneityMatrix {
        t,
        structure: structure.clone(),
    };
    let loglik = reml_loglik(ds, &hm)?;
    Ok(RemlFit {
        t: hm,
        loglik,
        converged: true,
        boundary,
        iterations: best.iterations,
        gradient_norm: best.gradient_norm,
    })
}

/// Weighted least squares with weights `(T_i + V_i)⁻¹`.
pub fn wls_fit(ds: &Dataset, t: &HeterogeneityMatrix) -> Result<FitResult> {
    if t.t.nrows() != ds.p {
        return Err(MetaError::Domain(format!("T must be {}×{}", ds.p, ds.p)));
    }
    let prof = profile(ds, t)?;
    let mut h_blocks = Vec::with_capacity(ds.k());
    let mut e_blocks = Vec::with_capacity(ds.k());
    let mut quad = 0.0;
    for (b, w) in ds.blocks.iter().zip(&prof.w_blocks) {
        h_blocks.push(&b.x * &prof.bread * b.x.transpose() * w);
        let e = &b.y - &b.x * &prof.beta;
        quad += e.dot(&(w * &e));
        e_blocks.push(e);
    }
    Ok(FitResult {
        beta_hat: prof.beta,
        t_hat: t.clone(),
        w_blocks: prof.w_blocks,
        h_blocks,
        e_blocks,
        x_blocks: ds.blocks.iter().map(|b| b.x.clone()).collect(),
        study_ids: ds.blocks.iter().map(|b| b.study_id.clone()).collect(),
        bread: prof.bread,
        converged: true,
        boundary: false,
        reml_loglik: -0.5 * (prof.logdet_sigma + prof.logdet_info + quad),
    })
}

/// Estimates `T` under `structure`, then fits by WLS.
pub fn fit_model(ds: &Dataset, structure: &TStructure) -> Result<FitResult> {
    let reml = estimate_t_reml(ds, structure)?;
    let mut fit = wls_fit(ds, &reml.t)?;
    fit.converged = reml.converged;
    fit.boundary = reml.boundary;
    Ok(fit)
}
