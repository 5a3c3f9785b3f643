//! Data model for a multivariate meta-regression dataset: per-study blocks,
//! stacking into `(X, y, V)`, and long-format CSV ingestion.
//!
//! Studies keep their first-appearance order everywhere; hat-matrix blocks
//! and residual blocks are indexed by that order.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{MetaError, Result};
use crate::linalg::{pivoted_cholesky, sym_eigenvalues};

/// One reported effect.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectRecord {
    pub study_id: String,
    /// Zero-based outcome index into the dataset's outcome labels.
    pub outcome: usize,
    pub estimate: f64,
    pub sampling_variance: f64,
    pub moderator: Option<f64>,
}

/// Observed effects of one study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyBlock {
    pub study_id: String,
    /// Zero-based outcome indices of the rows, strictly increasing.
    pub outcomes: Vec<usize>,
    /// `p_i × q` design rows.
    pub x: DMatrix<f64>,
    /// `p_i × p_i` within-study sampling covariance.
    pub v: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl StudyBlock {
    pub fn new(
        study_id: impl Into<String>,
        outcomes: Vec<usize>,
        x: DMatrix<f64>,
        v: DMatrix<f64>,
        y: DVector<f64>,
    ) -> Result<Self> {
        let study_id = study_id.into();
        let p_i = y.len();
        if p_i == 0 {
            return Err(MetaError::Input(format!("study '{study_id}' has no effects")));
        }
        if outcomes.len() != p_i || x.nrows() != p_i || v.nrows() != p_i || v.ncols() != p_i {
            return Err(MetaError::Input(format!("study '{study_id}': block dimensions disagree")));
        }
        if outcomes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetaError::Input(format!("study '{study_id}': duplicate or unordered outcomes")));
        }
        for r in 0..p_i {
            for c in 0..r {
                if (v[(r, c)] - v[(c, r)]).abs() > 1e-12 {
                    return Err(MetaError::Input(format!("study '{study_id}': V is not symmetric")));
                }
            }
        }
        let min_eig = sym_eigenvalues(&v)[0];
        if min_eig < -1e-10 {
            return Err(MetaError::NotPsd { minor: p_i, pivot: min_eig });
        }
        Ok(Self {
            study_id,
            outcomes,
            x,
            v,
            y,
        })
    }

    pub fn p_i(&self) -> usize {
        self.y.len()
    }
}

/// An ordered collection of study blocks sharing a design layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub blocks: Vec<StudyBlock>,
    /// Number of outcomes per study under complete data.
    pub p: usize,
    /// Number of regression coefficients.
    pub q: usize,
    pub coef_labels: Vec<String>,
    pub outcome_labels: Vec<String>,
}

/// Stacked view of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Stacked {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Dataset {
    pub fn new(
        blocks: Vec<StudyBlock>,
        outcome_labels: Vec<String>,
        coef_labels: Vec<String>,
    ) -> Result<Self> {
        let p = outcome_labels.len();
        let q = coef_labels.len();
        if blocks.is_empty() {
            return Err(MetaError::Input("dataset has no studies".into()));
        }
        for b in &blocks {
            if b.x.ncols() != q {
                return Err(MetaError::Input(format!(
                    "study '{}' has {} design columns, expected {q}",
                    b.study_id,
                    b.x.ncols()
                )));
            }
            if b.outcomes.iter().any(|&o| o >= p) {
                return Err(MetaError::Input(format!("study '{}' references an unknown outcome", b.study_id)));
            }
        }
        let ds = Self {
            blocks,
            p,
            q,
            coef_labels,
            outcome_labels,
        };
        ds.check_rank()?;
        Ok(ds)
    }

    /// Number of studies `k`.
    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    /// Total number of observed effects `p(k)`.
    pub fn total_effects(&self) -> usize {
        self.blocks.iter().map(StudyBlock::p_i).sum()
    }

    fn check_rank(&self) -> Result<()> {
        let n = self.total_effects();
        let mut xtx = DMatrix::zeros(self.q, self.q);
        for b in &self.blocks {
            xtx += b.x.transpose() * &b.x;
        }
        let scale = (0..self.q).map(|j| xtx[(j, j)]).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
        let chol = pivoted_cholesky(&xtx, 1e-10 * scale)?;
        if chol.rank < self.q || n < self.q {
            return Err(MetaError::RankDeficient {
                rank: chol.rank,
                q: self.q,
                dependent: chol.dependent_columns(),
            });
        }
        Ok(())
    }

    /// Stacks blocks in study order into `(X, y, V)`, `V` block diagonal.
    pub fn stack(&self) -> Result<Stacked> {
        self.check_rank()?;
        let n = self.total_effects();
        let mut x = DMatrix::zeros(n, self.q);
        let mut y = DVector::zeros(n);
        let mut v = DMatrix::zeros(n, n);
        let mut row = 0;
        for b in &self.blocks {
            let p_i = b.p_i();
            x.view_mut((row, 0), (p_i, self.q)).copy_from(&b.x);
            y.rows_mut(row, p_i).copy_from(&b.y);
            v.view_mut((row, row), (p_i, p_i)).copy_from(&b.v);
            row += p_i;
        }
        Ok(Stacked { x, y, v })
    }

    /// Splits a stacked `(y, V)` back into per-study pieces following this
    /// dataset's block layout.
    pub fn unstack(&self, stacked: &Stacked) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let mut row = 0;
        self.blocks
            .iter()
            .map(|b| {
                let p_i = b.p_i();
                let piece = (
                    stacked.y.rows(row, p_i).into_owned(),
                    stacked.v.view((row, row), (p_i, p_i)).into_owned(),
                );
                row += p_i;
                piece
            })
            .collect()
    }

    /// Copy of the dataset with new outcome vectors (same layout).
    pub fn with_outcomes(&self, ys: Vec<DVector<f64>>) -> Self {
        let mut out = self.clone();
        for (b, y) in out.blocks.iter_mut().zip(ys) {
            assert_eq!(b.y.len(), y.len());
            b.y = y;
        }
        out
    }

    /// Copy without study `idx`, for leave-one-out refits.
    pub fn without_study(&self, idx: usize) -> Result<Self> {
        let mut blocks = self.blocks.clone();
        blocks.remove(idx);
        Dataset::new(blocks, self.outcome_labels.clone(), self.coef_labels.clone())
    }
}

/// Design rows for a study: one indicator column per outcome, then (with a
/// moderator) one `x·indicator` column per outcome.
pub fn design_rows(outcomes: &[usize], p: usize, moderator: Option<f64>) -> DMatrix<f64> {
    let q = if moderator.is_some() { 2 * p } else { p };
    let mut x = DMatrix::zeros(outcomes.len(), q);
    for (r, &o) in outcomes.iter().enumerate() {
        x[(r, o)] = 1.0;
        if let Some(m) = moderator {
            x[(r, p + o)] = m;
        }
    }
    x
}

/// Coefficient names matching [`design_rows`].
pub fn coef_labels(outcome_labels: &[String], with_moderator: bool) -> Vec<String> {
    let mut labels = outcome_labels.to_vec();
    if with_moderator {
        labels.extend(outcome_labels.iter().map(|l| format!("x:{l}")));
    }
    labels
}

/// Within-study covariance from variances and an assumed correlation.
pub fn assumed_v(variances: &[f64], rho: f64) -> DMatrix<f64> {
    let n = variances.len();
    DMatrix::from_fn(n, n, |r, c| {
        if r == c {
            variances[r]
        } else {
            rho * (variances[r] * variances[c]).sqrt()
        }
    })
}

/// Options for CSV ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    /// Assumed correlation between outcomes within a study.
    pub rho: f64,
    /// Outcome labels in index order; first-appearance order when `None`.
    pub outcomes: Option<Vec<String>>,
}

impl IngestOptions {
    pub fn with_rho(rho: f64) -> Self {
        Self { rho, outcomes: None }
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    study: String,
    yi: f64,
    vi: f64,
    outcome: String,
    #[serde(default)]
    x: Option<f64>,
}

/// Reads a long-format CSV (`study,yi,vi,outcome[,x]`).
pub fn ingest_csv(path: impl AsRef<Path>, rho: f64) -> Result<Dataset> {
    ingest_csv_with(path, &IngestOptions::with_rho(rho))
}

pub fn ingest_csv_with(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| MetaError::Io(format!("{}: {e}", path.display())))?;
    ingest_reader(file, opts)
}

pub fn ingest_reader<R: Read>(reader: R, opts: &IngestOptions) -> Result<Dataset> {
    if !(opts.rho.abs() <= 1.0) {
        return Err(MetaError::Domain(format!("assumed correlation must lie in [-1,1], got {}", opts.rho)));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| MetaError::Input(e.to_string()))?.clone();
    for required in ["study", "yi", "vi", "outcome"] {
        if !headers.iter().any(|h| h == required) {
            return Err(MetaError::Input(format!("missing column '{required}'")));
        }
    }
    let has_x = headers.iter().any(|h| h == "x");

    let mut rows = Vec::new();
    for (line, rec) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = rec.map_err(|e| MetaError::Input(format!("row {}: {e}", line + 2)))?;
        if !(row.vi > 0.0) {
            return Err(MetaError::Input(format!(
                "row {}: sampling variance must be positive, got {}",
                line + 2,
                row.vi
            )));
        }
        if has_x && row.x.is_none() {
            return Err(MetaError::Input(format!("row {}: missing moderator value", line + 2)));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(MetaError::Input("no data rows".into()));
    }

    let labels: Vec<String> = match &opts.outcomes {
        Some(l) => l.clone(),
        None => {
            let mut seen: Vec<String> = Vec::new();
            for r in &rows {
                if !seen.contains(&r.outcome) {
                    seen.push(r.outcome.clone());
                }
            }
            seen
        }
    };
    let label_index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

    let mut records = Vec::with_capacity(rows.len());
    for r in &rows {
        let outcome = *label_index
            .get(r.outcome.as_str())
            .ok_or_else(|| MetaError::Input(format!("unknown outcome label '{}'", r.outcome)))?;
        records.push(EffectRecord {
            study_id: r.study.clone(),
            outcome,
            estimate: r.yi,
            sampling_variance: r.vi,
            moderator: r.x,
        });
    }
    from_records(&records, labels, opts.rho)
}

/// Groups records into study blocks (first-appearance order) and builds the
/// indicator design, plus moderator interactions when every record has one.
pub fn from_records(records: &[EffectRecord], outcome_labels: Vec<String>, rho: f64) -> Result<Dataset> {
    let p = outcome_labels.len();
    let with_moderator = records.iter().any(|r| r.moderator.is_some());
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<&EffectRecord>> = HashMap::new();
    for r in records {
        if !(r.sampling_variance > 0.0) {
            return Err(MetaError::Input(format!(
                "study '{}': sampling variance must be positive",
                r.study_id
            )));
        }
        if r.outcome >= p {
            return Err(MetaError::Input(format!("study '{}': outcome index out of range", r.study_id)));
        }
        let entry = grouped.entry(r.study_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(r.study_id.as_str());
        }
        if entry.iter().any(|e| e.outcome == r.outcome) {
            return Err(MetaError::Input(format!(
                "duplicate (study, outcome) pair ('{}', '{}')",
                r.study_id, outcome_labels[r.outcome]
            )));
        }
        entry.push(r);
    }

    let mut blocks = Vec::with_capacity(order.len());
    for study in order {
        let mut recs = grouped.remove(study).unwrap_or_default();
        recs.sort_by_key(|r| r.outcome);
        let moderator = if with_moderator {
            let m = recs[0]
                .moderator
                .ok_or_else(|| MetaError::Input(format!("study '{study}': missing moderator")))?;
            if recs.iter().any(|r| r.moderator != Some(m)) {
                return Err(MetaError::Input(format!("study '{study}': moderator varies within study")));
            }
            Some(m)
        } else {
            None
        };
        let outcomes: Vec<usize> = recs.iter().map(|r| r.outcome).collect();
        let variances: Vec<f64> = recs.iter().map(|r| r.sampling_variance).collect();
        let y = DVector::from_iterator(recs.len(), recs.iter().map(|r| r.estimate));
        let x = design_rows(&outcomes, p, moderator);
        blocks.push(StudyBlock::new(study, outcomes, x, assumed_v(&variances, rho), y)?);
    }
    let coefs = coef_labels(&outcome_labels, with_moderator);
    Dataset::new(blocks, outcome_labels, coefs)
}
