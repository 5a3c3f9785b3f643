//! Monte Carlo coverage and power study for bivariate meta-regression with
//! standardized mean differences computed from simulated participant data.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Deserialize;

use crate::effects::{hedges_d, smd_pair, GroupSummary, SmdPair, VarianceForm};
use crate::error::{MetaError, Result};
use crate::fit::{fit_model, wls_fit, FitResult, HeterogeneityMatrix, TStructure};
use crate::inference::{adjusted_df2, wald_q, zhang_df};
use crate::metamodel::{coef_labels, design_rows, Dataset, StudyBlock};
use crate::robust::{covariance, Cr4Exponent, CovKind};
use crate::statdist::{Dist, MvNormal, RngStream};

/// Number of regression coefficients in the simulated model.
const Q: usize = 4;

/// Fraction of failed replications above which a scenario is rejected.
const MAX_FAILURE_RATE: f64 = 0.05;

/// Attempts to draw a non-degenerate replication before giving up.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TSetting {
    /// `τ²·[[1, 0.2], [0.2, 1]]`.
    A,
    /// `τ²·[[1, 0.4], [0.4, 2]]`.
    B,
}

impl TSetting {
    pub fn shape(self) -> (f64, f64) {
        match self {
            TSetting::A => (0.2, 1.0),
            TSetting::B => (0.4, 2.0),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            TSetting::A => "A",
            TSetting::B => "B",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(TSetting::A),
            "B" | "b" => Ok(TSetting::B),
            _ => Err(MetaError::Input(format!("unknown T setting `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModeratorDist {
    #[default]
    Uniform,
    StandardNormal,
}

impl ModeratorDist {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(ModeratorDist::Uniform),
            "standard-normal" | "normal" => Ok(ModeratorDist::StandardNormal),
            _ => Err(MetaError::Input(format!("unknown moderator distribution `{s}`"))),
        }
    }
}

/// Which heterogeneity matrix the per-replication fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TMode {
    /// REML with an unstructured `T`.
    #[default]
    Reml,
    /// The data-generating `T`.
    Oracle,
}

impl TMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "reml" => Ok(TMode::Reml),
            "oracle" => Ok(TMode::Oracle),
            _ => Err(MetaError::Input(format!("unknown t_mode `{s}`"))),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            TMode::Reml => "reml",
            TMode::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub k: usize,
    /// Average study size.
    pub n: usize,
    pub beta: [f64; 4],
    /// Participant-level correlation between the two outcomes.
    pub rho: f64,
    pub missing_ratio: f64,
    pub t_setting: TSetting,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub estimators: Vec<CovKind>,
    pub t_mode: TMode,
    pub moderator: ModeratorDist,
    pub variance_form: VarianceForm,
    pub cr4_exponent: Cr4Exponent,
}

impl SimScenario {
    /// Scenario with the given design and default engine settings.
    pub fn new(k: usize, n: usize, beta: [f64; 4], rho: f64, missing_ratio: f64, t_setting: TSetting) -> Self {
        Self {
            k,
            n,
            beta,
            rho,
            missing_ratio,
            t_setting,
            reps: 1000,
            alpha: 0.05,
            seed: 1,
            estimators: default_estimators(),
            t_mode: TMode::Reml,
            moderator: ModeratorDist::Uniform,
            variance_form: VarianceForm::GroupSizes,
            cr4_exponent: Cr4Exponent::PerObservation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(MetaError::Domain("k must be at least 2".into()));
        }
        if self.n < 8 {
            return Err(MetaError::Domain("average study size must be at least 8".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(MetaError::Domain("rho must lie in (-1, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.missing_ratio) {
            return Err(MetaError::Domain("missing ratio must lie in [0, 1)".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(MetaError::Domain("alpha must lie in (0, 1)".into()));
        }
        if self.reps == 0 {
            return Err(MetaError::Domain("reps must be positive".into()));
        }
        if self.estimators.is_empty() {
            return Err(MetaError::Domain("no estimators requested".into()));
        }
        Ok(())
    }

    /// `τ² = 4/N + β₀²/(2N)`.
    pub fn tau2(&self) -> f64 {
        let n = self.n as f64;
        4.0 / n + self.beta[0] * self.beta[0] / (2.0 * n)
    }

    pub fn t_matrix(&self) -> DMatrix<f64> {
        let (c1, c2) = self.t_setting.shape();
        DMatrix::from_row_slice(2, 2, &[1.0, c1, c1, c2]) * self.tau2()
    }

    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    /// Study sizes: `{0.8, 0.9, 1.0, 1.1, 1.2}·N` assigned round-robin and
    /// rounded to the nearest even integer.
    pub fn study_sizes(&self) -> Vec<usize> {
        const FACTORS: [f64; 5] = [0.8, 0.9, 1.0, 1.1, 1.2];
        (0..self.k)
            .map(|i| {
                let s = FACTORS[i % 5] * self.n as f64;
                (2.0 * (s / 2.0).round()) as usize
            })
            .collect()
    }

    /// Number of studies that lose one outcome.
    pub fn missing_count(&self) -> usize {
        (self.missing_ratio * self.k as f64).round() as usize
    }

    pub fn label(&self) -> String {
        format!(
            "k{}_N{}_b{}_{}_{}_{}_rho{}_m{}_T{}",
            self.k,
            self.n,
            self.beta[0],
            self.beta[1],
            self.beta[2],
            self.beta[3],
            self.rho,
            self.missing_ratio,
            self.t_setting.id()
        )
    }
}

pub fn default_estimators() -> Vec<CovKind> {
    vec![CovKind::Cr1s, CovKind::Cr3s, CovKind::Cr4s, CovKind::Cr2, CovKind::St]
}

/// Moderator values for one replication.
pub fn moderator_values<R: Rng + ?Sized>(scenario: &SimScenario, rng: &mut R) -> Vec<f64> {
    (0..scenario.k)
        .map(|_| match scenario.moderator {
            ModeratorDist::Uniform => rng.random::<f64>(),
            ModeratorDist::StandardNormal => rng.sample(StandardNormal),
        })
        .collect()
}

/// Running sums for one arm of one outcome pair.
#[derive(Default)]
struct Moments {
    n: usize,
    s1: f64,
    s2: f64,
    ss1: f64,
    ss2: f64,
    s12: f64,
}

impl Moments {
    fn push(&mut self, a: f64, b: f64) {
        self.n += 1;
        self.s1 += a;
        self.s2 += b;
        self.ss1 += a * a;
        self.ss2 += b * b;
        self.s12 += a * b;
    }

    fn means(&self) -> (f64, f64) {
        let n = self.n as f64;
        (self.s1 / n, self.s2 / n)
    }

    /// Centered sums of squares and cross products.
    fn centered(&self) -> (f64, f64, f64) {
        let n = self.n as f64;
        let (m1, m2) = self.means();
        (self.ss1 - n * m1 * m1, self.ss2 - n * m2 * m2, self.s12 - n * m1 * m2)
    }
}

fn draw_arm<R: Rng + ?Sized>(rng: &mut R, n: usize, mean: (f64, f64), rho: f64) -> Moments {
    let s = (1.0 - rho * rho).sqrt();
    let mut m = Moments::default();
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        m.push(mean.0 + z1, mean.1 + rho * z1 + s * z2);
    }
    m
}

/// Draws participant data for one two-arm study and returns the corrected
/// effect pair. Treatment ~ N(θ, P), control ~ N(0, P), `P = [[1, ρ], [ρ, 1]]`.
pub fn simulate_study<R: Rng + ?Sized>(
    rng: &mut R,
    theta: (f64, f64),
    size: usize,
    rho: f64,
    form: VarianceForm,
    avg_group_size: f64,
) -> Result<SmdPair> {
    let half = size / 2;
    let treat = draw_arm(rng, half, theta, rho);
    let control = draw_arm(rng, half, (0.0, 0.0), rho);
    let (t1, t2, t12) = treat.centered();
    let (c1, c2, c12) = control.centered();
    let df = (2 * half - 2) as f64;
    let (p1, p2, p12) = ((t1 + c1) / df, (t2 + c2) / df, (t12 + c12) / df);
    if !(p1 > 0.0 && p2 > 0.0) {
        return Err(MetaError::Degenerate("pooled standard deviation is zero".into()));
    }
    let rho_hat = (p12 / (p1 * p2).sqrt()).clamp(-1.0, 1.0);
    let nm1 = (half - 1) as f64;
    let (tm, cm) = (treat.means(), control.means());
    let d1 = hedges_d(
        &GroupSummary::new(half, tm.0, t1 / nm1)?,
        &GroupSummary::new(half, cm.0, c1 / nm1)?,
    )?;
    let d2 = hedges_d(
        &GroupSummary::new(half, tm.1, t2 / nm1)?,
        &GroupSummary::new(half, cm.1, c2 / nm1)?,
    )?;
    smd_pair(d1, d2, rho_hat, half, half, form, avg_group_size)
}

/// One simulated dataset.
#[derive(Debug, Clone)]
pub struct Replication {
    pub dataset: Dataset,
    pub moderators: Vec<f64>,
    /// Degenerate draws discarded before this one.
    pub redraws: usize,
}

/// Simulates one replication from its own random stream.
pub fn generate_replication(scenario: &SimScenario, stream: &RngStream) -> Result<Replication> {
    let mut rng = stream.rng();
    generate_with(scenario, &mut rng)
}

fn generate_with(scenario: &SimScenario, rng: &mut ChaCha20Rng) -> Result<Replication> {
    let mut redraws = 0;
    loop {
        match try_generate(scenario, rng) {
            Ok((dataset, moderators)) => {
                return Ok(Replication {
                    dataset,
                    moderators,
                    redraws,
                })
            }
            Err(MetaError::Degenerate(_)) if redraws < MAX_REDRAWS => redraws += 1,
            Err(e) => return Err(e),
        }
    }
}

fn try_generate(scenario: &SimScenario, rng: &mut ChaCha20Rng) -> Result<(Dataset, Vec<f64>)> {
    let sizes = scenario.study_sizes();
    let xs = moderator_values(scenario, rng);
    let u_dist = MvNormal::new(DVector::zeros(2), &scenario.t_matrix())?;
    let beta = scenario.beta_vector();
    let avg_group = scenario.n as f64 / 2.0;
    let mut pairs = Vec::with_capacity(scenario.k);
    for (&x, &size) in xs.iter().zip(&sizes) {
        let u = u_dist.sample(rng);
        let theta = design_rows(&[0, 1], 2, Some(x)) * &beta + u;
        pairs.push(simulate_study(rng, (theta[0], theta[1]), size, scenario.rho, scenario.variance_form, avg_group)?);
    }
    let mut drop = vec![None; scenario.k];
    for i in sample(rng, scenario.k, scenario.missing_count()).into_vec() {
        drop[i] = Some(rng.random_range(0..2usize));
    }
    let mut blocks = Vec::with_capacity(scenario.k);
    for (i, (pair, &x)) in pairs.iter().zip(&xs).enumerate() {
        let (outcomes, y, v) = match drop[i] {
            None => (
                vec![0, 1],
                DVector::from_vec(vec![pair.g1, pair.g2]),
                DMatrix::from_row_slice(2, 2, &[pair.v1, pair.cov12, pair.cov12, pair.v2]),
            ),
            Some(0) => (vec![1], DVector::from_element(1, pair.g2), DMatrix::from_element(1, 1, pair.v2)),
            Some(_) => (vec![0], DVector::from_element(1, pair.g1), DMatrix::from_element(1, 1, pair.v1)),
        };
        let xm = design_rows(&outcomes, 2, Some(x));
        blocks.push(StudyBlock::new(format!("{}", i + 1), outcomes, xm, v, y)?);
    }
    let labels = vec!["1".to_string(), "2".to_string()];
    let coefs = coef_labels(&labels, true);
    Ok((Dataset::new(blocks, labels, coefs)?, xs))
}

/// Outcome of one estimator in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutcome {
    pub covered: bool,
    pub rejected: bool,
    /// `None` when the Hotelling df could not be computed.
    pub eta: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub redraws: usize,
    /// Error class of the shared fit, if it failed.
    pub fit_error: Option<&'static str>,
    pub per_estimator: Vec<std::result::Result<EstimatorOutcome, &'static str>>,
}

fn fit_replication(scenario: &SimScenario, ds: &Dataset) -> Result<FitResult> {
    match scenario.t_mode {
        TMode::Reml => fit_model(ds, &TStructure::Unstructured),
        TMode::Oracle => wls_fit(ds, &HeterogeneityMatrix::fixed(scenario.t_matrix())?),
    }
}

/// Fits and tests one replication.
pub fn run_replication(scenario: &SimScenario, rep: usize, crit: f64) -> RepOutcome {
    let stream = RngStream::new(scenario.seed, rep as u64);
    let fail_all = |class: &'static str, redraws| RepOutcome {
        redraws,
        fit_error: Some(class),
        per_estimator: vec![Err(class); scenario.estimators.len()],
    };
    let repl = match generate_replication(scenario, &stream) {
        Ok(r) => r,
        Err(e) => return fail_all(e.class(), MAX_REDRAWS),
    };
    let fit = match fit_replication(scenario, &repl.dataset) {
        Ok(f) => f,
        Err(e) => return fail_all(e.class(), repl.redraws),
    };
    let truth = scenario.beta_vector();
    let zero = DVector::zeros(Q);
    let per_estimator = scenario
        .estimators
        .iter()
        .map(|&kind| {
            let cov = covariance(&fit, kind, scenario.cr4_exponent).map_err(|e| e.class())?;
            let q_true = wald_q(&fit.beta_hat, &truth, &cov.sigma).map_err(|e| e.class())?;
            let q_zero = wald_q(&fit.beta_hat, &zero, &cov.sigma).map_err(|e| e.class())?;
            let eta = zhang_df(&fit, &cov, None).ok().map(|z| z.eta);
            Ok(EstimatorOutcome {
                covered: q_true <= crit,
                rejected: q_zero > crit,
                eta,
            })
        })
        .collect();
    RepOutcome {
        redraws: repl.redraws,
        fit_error: None,
        per_estimator,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub kind: CovKind,
    pub coverage: f64,
    pub power: f64,
    pub mc_se_coverage: f64,
    pub mc_se_power: f64,
    /// Replications that produced a result for this estimator.
    pub valid: usize,
    /// Share of replications with a Hotelling df below `q − 1`.
    pub eta_below_rate: f64,
    pub eta_median: f64,
    pub eta_failures: usize,
    pub failures: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub scenario: SimScenario,
    pub estimators: Vec<EstimatorSummary>,
    pub redraws: usize,
    pub fit_failures: BTreeMap<String, usize>,
}

impl SimResult {
    pub fn estimator(&self, kind: CovKind) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.kind == kind)
    }
}

/// `√(p(1 − p)/reps)`.
pub fn mc_se(p: f64, reps: usize) -> f64 {
    (p * (1.0 - p) / reps as f64).sqrt()
}

/// Adjusted-F critical value for `Q` in this scenario.
pub fn critical_value(scenario: &SimScenario) -> Result<f64> {
    let df2 = adjusted_df2(Q, scenario.k);
    Ok(Q as f64 * Dist::F { df1: Q as f64, df2 }.quantile(1.0 - scenario.alpha)?)
}

/// Runs all replications on the global thread pool.
pub fn run_scenario(scenario: &SimScenario) -> Result<SimResult> {
    run_scenario_with_workers(scenario, None)
}

/// Runs all replications with a fixed number of worker threads. Results do
/// not depend on the worker count.
pub fn run_scenario_with_workers(scenario: &SimScenario, workers: Option<usize>) -> Result<SimResult> {
    scenario.validate()?;
    let crit = critical_value(scenario)?;
    let work = || -> Vec<RepOutcome> {
        (0..scenario.reps)
            .into_par_iter()
            .map(|rep| run_replication(scenario, rep, crit))
            .collect()
    };
    let outcomes = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| MetaError::Scenario(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    summarise(scenario, &outcomes)
}

fn summarise(scenario: &SimScenario, outcomes: &[RepOutcome]) -> Result<SimResult> {
    let reps = scenario.reps;
    let mut fit_failures = BTreeMap::new();
    for o in outcomes {
        if let Some(c) = o.fit_error {
            *fit_failures.entry(c.to_string()).or_insert(0) += 1;
        }
    }
    let mut estimators = Vec::with_capacity(scenario.estimators.len());
    let mut problems = Vec::new();
    for (j, &kind) in scenario.estimators.iter().enumerate() {
        let mut failures = BTreeMap::new();
        let (mut covered, mut rejected, mut valid) = (0usize, 0usize, 0usize);
        let mut etas = Vec::new();
        let mut eta_failures = 0;
        for o in outcomes {
            match &o.per_estimator[j] {
                Ok(r) => {
                    valid += 1;
                    covered += r.covered as usize;
                    rejected += r.rejected as usize;
                    match r.eta {
                        Some(e) => etas.push(e),
                        None => eta_failures += 1,
                    }
                }
                Err(c) => *failures.entry(c.to_string()).or_insert(0) += 1,
            }
        }
        let failed = reps - valid;
        if failed as f64 > MAX_FAILURE_RATE * reps as f64 {
            problems.push(format!("{}: {failed} of {reps} replications failed {failures:?}", kind.label()));
        }
        let coverage = if valid > 0 { covered as f64 / valid as f64 } else { f64::NAN };
        let power = if valid > 0 { rejected as f64 / valid as f64 } else { f64::NAN };
        let below = etas.iter().filter(|e| **e < (Q - 1) as f64).count();
        etas.sort_by(f64::total_cmp);
        let eta_median = if etas.is_empty() {
            f64::NAN
        } else if etas.len() % 2 == 1 {
            etas[etas.len() / 2]
        } else {
            0.5 * (etas[etas.len() / 2 - 1] + etas[etas.len() / 2])
        };
        estimators.push(EstimatorSummary {
            kind,
            coverage,
            power,
            mc_se_coverage: mc_se(coverage, reps),
            mc_se_power: mc_se(power, reps),
            valid,
            eta_below_rate: if etas.is_empty() { f64::NAN } else { below as f64 / etas.len() as f64 },
            eta_median,
            eta_failures,
            failures,
        });
    }
    if !problems.is_empty() {
        return Err(MetaError::Scenario(format!("{}: {}", scenario.label(), problems.join("; "))));
    }
    Ok(SimResult {
        scenario: scenario.clone(),
        estimators,
        redraws: outcomes.iter().map(|o| o.redraws).sum(),
        fit_failures,
    })
}

/// Scenario grid read from TOML. Missing keys fall back to the full design.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfigFile {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Forces 5000 replications per scenario.
    #[serde(default)]
    pub full: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub estimators: Option<Vec<String>>,
    #[serde(default = "default_t_mode")]
    pub t_mode: String,
    #[serde(default = "default_moderator")]
    pub moderator: String,
    #[serde(default = "default_variance_form")]
    pub variance_form: String,
    #[serde(default = "default_cr4")]
    pub cr4_exponent: String,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub grid: GridSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub k: Vec<usize>,
    pub n: Vec<usize>,
    pub beta: Vec<[f64; 4]>,
    pub rho: Vec<f64>,
    pub missing_ratio: Vec<f64>,
    pub t_setting: Vec<String>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            k: vec![5, 10, 20, 40],
            n: vec![40, 100],
            beta: vec![[0.0, 0.0, 0.0, 0.0], [0.2, 0.2, 0.1, 0.1], [0.4, 0.4, 0.2, 0.3]],
            rho: vec![0.0, 0.3, 0.7],
            missing_ratio: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            t_setting: vec!["A".into(), "B".into()],
        }
    }
}

fn default_seed() -> u64 {
    20240101
}
fn default_reps() -> usize {
    1000
}
fn default_alpha() -> f64 {
    0.05
}
fn default_t_mode() -> String {
    "reml".into()
}
fn default_moderator() -> String {
    "uniform".into()
}
fn default_variance_form() -> String {
    "group-sizes".into()
}
fn default_cr4() -> String {
    "per-observation".into()
}

/// Expanded list of scenarios plus engine settings.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub scenarios: Vec<SimScenario>,
    pub workers: Option<usize>,
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SimConfigFile = toml::from_str(text).map_err(|e| MetaError::Input(format!("scenario config: {e}")))?;
        file.expand()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| MetaError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }
}

impl SimConfigFile {
    /// Cartesian product of the grid; scenario `i` uses seed `seed + i`.
    pub fn expand(&self) -> Result<SimConfig> {
        let estimators = match &self.estimators {
            Some(list) => list.iter().map(|s| s.parse()).collect::<Result<Vec<CovKind>>>()?,
            None => default_estimators(),
        };
        let t_mode = TMode::parse(&self.t_mode)?;
        let moderator = ModeratorDist::parse(&self.moderator)?;
        let variance_form = match self.variance_form.as_str() {
            "group-sizes" => VarianceForm::GroupSizes,
            "average-group-size" => VarianceForm::AverageGroupSize,
            other => return Err(MetaError::Input(format!("unknown variance form `{other}`"))),
        };
        let cr4_exponent: Cr4Exponent = self.cr4_exponent.parse()?;
        let settings = self.grid.t_setting.iter().map(|s| TSetting::parse(s)).collect::<Result<Vec<_>>>()?;
        let reps = if self.full { 5000 } else { self.reps };
        let mut scenarios = Vec::new();
        for &k in &self.grid.k {
            for &n in &self.grid.n {
                for beta in &self.grid.beta {
                    for &rho in &self.grid.rho {
                        for &missing_ratio in &self.grid.missing_ratio {
                            for &t_setting in &settings {
                                let mut s = SimScenario::new(k, n, *beta, rho, missing_ratio, t_setting);
                                s.reps = reps;
                                s.alpha = self.alpha;
                                s.seed = self.seed.wrapping_add(scenarios.len() as u64);
                                s.estimators = estimators.clone();
                                s.t_mode = t_mode;
                                s.moderator = moderator;
                                s.variance_form = variance_form;
                                s.cr4_exponent = cr4_exponent;
                                s.validate()?;
                                scenarios.push(s);
                            }
                        }
                    }
                }
            }
        }
        if scenarios.is_empty() {
            return Err(MetaError::Input("scenario grid is empty".into()));
        }
        Ok(SimConfig {
            scenarios,
            workers: self.workers,
        })
    }
}

const SCENARIO_COLUMNS: [&str; 14] = [
    "scenario", "k", "n", "beta0", "beta1", "beta2", "beta3", "rho", "missing_ratio", "t_setting", "t_mode", "reps", "alpha", "seed",
];

fn scenario_fields(s: &SimScenario) -> Vec<String> {
    vec![
        s.label(),
        s.k.to_string(),
        s.n.to_string(),
        s.beta[0].to_string(),
        s.beta[1].to_string(),
        s.beta[2].to_string(),
        s.beta[3].to_string(),
        s.rho.to_string(),
        s.missing_ratio.to_string(),
        s.t_setting.id().to_string(),
        s.t_mode.id().to_string(),
        s.reps.to_string(),
        s.alpha.to_string(),
        s.seed.to_string(),
    ]
}

fn failure_string(map: &BTreeMap<String, usize>) -> String {
    map.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(";")
}

fn csv_err(e: csv::Error) -> MetaError {
    MetaError::Io(e.to_string())
}

/// One row per (scenario, estimator).
pub fn write_summary_csv<W: Write>(results: &[SimResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = SCENARIO_COLUMNS.to_vec();
    header.extend([
        "estimator",
        "coverage",
        "mc_se_coverage",
        "power",
        "mc_se_power",
        "valid",
        "eta_below_rate",
        "eta_median",
        "eta_failures",
        "failures",
        "fit_failures",
        "redraws",
    ]);
    w.write_record(&header).map_err(csv_err)?;
    for r in results {
        for e in &r.estimators {
            let mut row = scenario_fields(&r.scenario);
            row.extend([
                e.kind.id().to_string(),
                e.coverage.to_string(),
                e.mc_se_coverage.to_string(),
                e.power.to_string(),
                e.mc_se_power.to_string(),
                e.valid.to_string(),
                e.eta_below_rate.to_string(),
                e.eta_median.to_string(),
                e.eta_failures.to_string(),
                failure_string(&e.failures),
                failure_string(&r.fit_failures),
                r.redraws.to_string(),
            ]);
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long format: one row per (scenario, estimator, metric).
pub fn write_long_csv<W: Write>(results: &[SimResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = SCENARIO_COLUMNS.to_vec();
    header.extend(["estimator", "metric", "value", "mc_se"]);
    w.write_record(&header).map_err(csv_err)?;
    for r in results {
        for e in &r.estimators {
            for (metric, value, se) in [
                ("coverage", e.coverage, e.mc_se_coverage),
                ("power", e.power, e.mc_se_power),
                ("eta_below_rate", e.eta_below_rate, f64::NAN),
            ] {
                let mut row = scenario_fields(&r.scenario);
                row.extend([e.kind.id().to_string(), metric.to_string(), value.to_string(), se.to_string()]);
                w.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
