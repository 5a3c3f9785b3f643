//! Command-line front end: `fit`, `test`, `sensitivity` and `simulate`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::error::{MetaError, Result};
use crate::fit::{fit_model, FitResult, TStructure};
use crate::inference::{coef_ci, confidence_ellipsoid, wald_test, wald_test_h, zhang_df, DfRule, TestMethod, TestResult};
use crate::metamodel::{ingest_csv, Dataset};
use crate::robust::{covariance, Cr4Exponent, CovEstimate, CovKind};
use crate::simulate::{run_scenario_with_workers, write_long_csv, write_summary_csv, SimConfig, SimConfigFile};

#[derive(Debug, Parser)]
#[command(name = "mvmeta", version, about = "Bivariate meta-regression with cluster-robust inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model and report coefficients, covariances, tests, intervals and ellipsoids.
    Fit(ModelArgs),
    /// Wald tests of `β = 0` (or `--hypothesis`) for each estimator.
    Test(ModelArgs),
    /// p-values of the Wald test of `β = 0` across assumed within-study correlations.
    Sensitivity(ModelArgs),
    /// Monte Carlo coverage and power study.
    Simulate(SimArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Effect-size CSV with columns study, yi, vi, outcome and optional x.
    #[arg(long)]
    pub input: PathBuf,
    /// Assumed within-study correlation(s), comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub rho: Vec<f64>,
    /// Estimators, comma separated (ST, CR0, CR1s, CR2, CR3, CR3s, CR4s).
    #[arg(long, value_delimiter = ',')]
    pub estimators: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// unstructured | proportional:c1,c2 | fixed:<file>
    #[arg(long, default_value = "unstructured")]
    pub t_structure: String,
    /// normal | t
    #[arg(long, default_value = "normal")]
    pub df_rule: String,
    /// chisq | f | f-adjusted | htz
    #[arg(long, default_value = "f-adjusted")]
    pub test: String,
    /// Linear hypothesis such as `b3=0` or `b2=0,b3=0` (coefficients indexed from 0).
    #[arg(long)]
    pub hypothesis: Option<String>,
    /// per-observation | per-cluster
    #[arg(long, default_value = "per-observation")]
    pub cr4_exponent: String,
    /// Write the report as JSON (or CSV when the path ends in `.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print JSON instead of the text report.
    #[arg(long)]
    pub json: bool,
    /// Accepted for symmetry with `simulate`; model commands are deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Scenario grid in TOML; the full design is used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run 5000 replications per scenario.
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory for `sim_summary.csv` and `sim_long.csv`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub json: bool,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            1
        }
    }
}

pub fn error_json(e: &MetaError) -> Value {
    json!({ "error": { "class": e.class(), "message": e.to_string() } })
}

pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, false),
        Command::Test(a) => cmd_fit(a, true),
        Command::Sensitivity(a) => cmd_sensitivity(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

/// Six significant digits.
pub fn fmt6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let pad = widths[c] - s.chars().count();
                if c == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn parse_estimators(list: &[String], default: &[CovKind]) -> Result<Vec<CovKind>> {
    if list.is_empty() {
        return Ok(default.to_vec());
    }
    list.iter().map(|s| s.parse()).collect()
}

fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| MetaError::Io(format!("{}: {e}", path.display())))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| MetaError::Input(format!("bad number `{t}` in {}", path.display()))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(MetaError::Input(format!("{} must hold a square matrix", path.display())));
    }
    Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
}

pub fn parse_t_structure(s: &str) -> Result<TStructure> {
    let s = s.trim();
    if s == "unstructured" {
        return Ok(TStructure::Unstructured);
    }
    if let Some(rest) = s.strip_prefix("proportional:") {
        let parts: Vec<f64> = rest
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| MetaError::Input(format!("bad proportional shape `{rest}`"))))
            .collect::<Result<_>>()?;
        if parts.len() != 2 {
            return Err(MetaError::Input("proportional needs two values c1,c2".into()));
        }
        return Ok(TStructure::Proportional { c1: parts[0], c2: parts[1] });
    }
    if let Some(path) = s.strip_prefix("fixed:") {
        return Ok(TStructure::Fixed(read_matrix(Path::new(path))?));
    }
    Err(MetaError::Input(format!("unknown T structure `{s}`")))
}

/// Parses `b3=0,b2=0.1` or `x:OS=0` into `(H, c)`.
pub fn parse_hypothesis(text: &str, labels: &[String]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let q = labels.len();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for term in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (name, value) = term
            .split_once('=')
            .ok_or_else(|| MetaError::Input(format!("hypothesis term `{term}` needs `=`")))?;
        let name = name.trim();
        let idx = match labels.iter().position(|l| l == name) {
            Some(i) => i,
            None => name
                .strip_prefix('b')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&i| i < q)
                .ok_or_else(|| MetaError::Input(format!("unknown coefficient `{name}`")))?,
        };
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| MetaError::Input(format!("bad value in `{term}`")))?;
        let mut row = vec![0.0; q];
        row[idx] = 1.0;
        rows.push(row);
        values.push(value);
    }
    if rows.is_empty() {
        return Err(MetaError::Input("empty hypothesis".into()));
    }
    let h = DMatrix::from_fn(rows.len(), q, |r, c| rows[r][c]);
    Ok((h, DVector::from_vec(values)))
}

fn check_common(a: &ModelArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(MetaError::Input(format!("alpha must lie in (0, 1), got {}", a.alpha)));
    }
    if a.rho.is_empty() {
        return Err(MetaError::Input("--rho is required".into()));
    }
    if let Some(r) = a.rho.iter().find(|r| !(r.abs() <= 1.0)) {
        return Err(MetaError::Input(format!("rho must lie in [-1, 1], got {r}")));
    }
    Ok(())
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|r| json!((0..m.ncols()).map(|c| m[(r, c)]).collect::<Vec<_>>())).collect())
}

fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        Value::Null
    } else {
        json!(if x > 0.0 { "inf" } else { "-inf" })
    }
}

fn test_json(t: &TestResult) -> Value {
    json!({
        "method": t.method.id(),
        "statistic": num(t.statistic),
        "df1": num(t.df1),
        "df2": num(t.df2),
        "p_value": num(t.p_value),
        "reject": t.reject,
        "alpha": t.alpha,
    })
}

fn fit_dataset(a: &ModelArgs, rho: f64) -> Result<(Dataset, FitResult)> {
    let ds = ingest_csv(&a.input, rho)?;
    let fit = fit_model(&ds, &parse_t_structure(&a.t_structure)?)?;
    Ok((ds, fit))
}

fn run_test(a: &ModelArgs, fit: &FitResult, cov: &CovEstimate, ds: &Dataset, method: TestMethod) -> Result<TestResult> {
    match &a.hypothesis {
        Some(h) => {
            let (hm, c) = parse_hypothesis(h, &ds.coef_labels)?;
            wald_test_h(fit, cov, &hm, &c, method, a.alpha)
        }
        None => wald_test(fit, cov, &DVector::zeros(fit.q()), method, a.alpha),
    }
}

fn cmd_fit(a: &ModelArgs, test_only: bool) -> Result<String> {
    check_common(a)?;
    if a.rho.len() != 1 {
        return Err(MetaError::Input("fit and test take a single --rho value".into()));
    }
    let rho = a.rho[0];
    let kinds = parse_estimators(&a.estimators, &CovKind::ALL)?;
    let method: TestMethod = a.test.parse()?;
    let rule: DfRule = a.df_rule.parse()?;
    let cr4: Cr4Exponent = a.cr4_exponent.parse()?;
    let (ds, fit) = fit_dataset(a, rho)?;

    let mut text = String::new();
    text.push_str(&format!(
        "k = {}, p(k) = {}, q = {}, rho = {}, REML log-likelihood = {}{}\n\n",
        fit.k(),
        fit.total_effects(),
        fit.q(),
        fmt6(rho),
        fmt6(fit.reml_loglik),
        if fit.boundary { " (T on boundary)" } else { "" }
    ));
    let mut coef_rows = vec![vec!["coefficient".to_string(), "estimate".to_string()]];
    for (l, b) in ds.coef_labels.iter().zip(fit.beta_hat.iter()) {
        coef_rows.push(vec![l.clone(), fmt6(*b)]);
    }
    text.push_str(&table(&coef_rows));
    text.push_str("\nT:\n");
    let t_rows: Vec<Vec<String>> = (0..fit.t_hat.t.nrows())
        .map(|r| {
            std::iter::once(ds.outcome_labels[r].clone())
                .chain((0..fit.t_hat.t.ncols()).map(|c| fmt6(fit.t_hat.t[(r, c)])))
                .collect()
        })
        .collect();
    text.push_str(&table(&t_rows));

    let mut test_rows = vec![vec![
        "estimator".to_string(),
        "Q".to_string(),
        "df1".to_string(),
        "df2".to_string(),
        "p-value".to_string(),
        "eta_Z".to_string(),
    ]];
    let mut est_json = Vec::new();
    let mut csv_rows = vec![vec![
        "estimator".to_string(),
        "coefficient".to_string(),
        "estimate".to_string(),
        "std_error".to_string(),
        "lower".to_string(),
        "upper".to_string(),
    ]];
    let mut ci_text = String::new();
    for &kind in &kinds {
        let cov = match covariance(&fit, kind, cr4) {
            Ok(c) => c,
            Err(e) => {
                test_rows.push(vec![kind.label().into(), format!("error: {e}")]);
                est_json.push(json!({ "estimator": kind.label(), "error": error_json(&e)["error"] }));
                continue;
            }
        };
        let test = run_test(a, &fit, &cov, &ds, method);
        let eta = zhang_df(&fit, &cov, None);
        match &test {
            Ok(t) => test_rows.push(vec![
                kind.label().into(),
                fmt6(t.statistic),
                fmt6(t.df1),
                fmt6(t.df2),
                fmt6(t.p_value),
                eta.as_ref().map(|z| fmt6(z.eta)).unwrap_or_else(|_| "NA".into()),
            ]),
            Err(e) => test_rows.push(vec![kind.label().into(), format!("error: {e}")]),
        }
        let mut cis = Vec::new();
        let mut ci_rows = vec![vec![
            format!("{} coefficient", kind.label()),
            "estimate".to_string(),
            "std.err".to_string(),
            "lower".to_string(),
            "upper".to_string(),
        ]];
        for j in 0..fit.q() {
            match coef_ci(&fit, &cov.sigma, j, a.alpha, rule) {
                Ok(ci) => {
                    ci_rows.push(vec![
                        ds.coef_labels[j].clone(),
                        fmt6(ci.estimate),
                        fmt6(ci.std_error),
                        fmt6(ci.lower),
                        fmt6(ci.upper),
                    ]);
                    csv_rows.push(vec![
                        kind.label().into(),
                        ds.coef_labels[j].clone(),
                        ci.estimate.to_string(),
                        ci.std_error.to_string(),
                        ci.lower.to_string(),
                        ci.upper.to_string(),
                    ]);
                    cis.push(json!({
                        "coefficient": ds.coef_labels[j],
                        "estimate": ci.estimate,
                        "std_error": ci.std_error,
                        "lower": ci.lower,
                        "upper": ci.upper,
                        "quantile": ci.quantile,
                    }));
                }
                Err(e) => {
                    ci_rows.push(vec![ds.coef_labels[j].clone(), format!("error: {e}")]);
                    cis.push(json!({ "coefficient": ds.coef_labels[j], "error": e.to_string() }));
                }
            }
        }
        if !test_only {
            ci_text.push('\n');
            ci_text.push_str(&table(&ci_rows));
        }
        let ellipsoid = match confidence_ellipsoid(&fit.beta_hat, &cov.sigma, fit.k(), a.alpha) {
            Ok(e) => {
                if !test_only {
                    ci_text.push_str(&format!(
                        "  ellipsoid: half-axes [{}], volume {}\n",
                        e.axis_half_lengths.iter().map(|x| fmt6(*x)).collect::<Vec<_>>().join(", "),
                        fmt6(e.volume)
                    ));
                }
                json!({
                    "level": e.level,
                    "eigenvalues": e.eigenvalues.iter().copied().collect::<Vec<_>>(),
                    "eigenvectors": matrix_json(&e.eigenvectors),
                    "radius_scale": e.radius_scale,
                    "axis_half_lengths": e.axis_half_lengths,
                    "volume": e.volume,
                })
            }
            Err(e) => json!({ "error": e.to_string() }),
        };
        est_json.push(json!({
            "estimator": kind.label(),
            "sigma": matrix_json(&cov.sigma),
            "min_eigenvalue": cov.min_eigenvalue,
            "indefinite": cov.indefinite,
            "test": match &test { Ok(t) => test_json(t), Err(e) => error_json(e)["error"].clone() },
            "eta_z": match &eta { Ok(z) => json!({ "eta": z.eta, "capped": z.capped }), Err(e) => json!({ "error": e.to_string() }) },
            "intervals": cis,
            "ellipsoid": ellipsoid,
        }));
    }
    let hyp = a.hypothesis.clone().unwrap_or_else(|| "beta = 0".into());
    text.push_str(&format!("\nWald test of {hyp} ({}):\n", method.id()));
    text.push_str(&table(&test_rows));
    text.push_str(&ci_text);

    let report = json!({
        "command": if test_only { "test" } else { "fit" },
        "input": a.input.display().to_string(),
        "rho": rho,
        "k": fit.k(),
        "total_effects": fit.total_effects(),
        "q": fit.q(),
        "coefficients": ds.coef_labels,
        "outcomes": ds.outcome_labels,
        "beta_hat": fit.beta_hat.iter().copied().collect::<Vec<_>>(),
        "t_hat": matrix_json(&fit.t_hat.t),
        "converged": fit.converged,
        "boundary": fit.boundary,
        "reml_loglik": fit.reml_loglik,
        "alpha": a.alpha,
        "hypothesis": hyp,
        "estimators": est_json,
    });
    emit(a.out.as_deref(), a.json, &report, &csv_rows, text)
}

fn emit(out: Option<&Path>, as_json: bool, report: &Value, csv_rows: &[Vec<String>], text: String) -> Result<String> {
    let pretty = serde_json::to_string_pretty(report).map_err(|e| MetaError::Io(e.to_string()))? + "\n";
    if let Some(path) = out {
        if path.extension().is_some_and(|e| e == "csv") {
            let mut w = csv::Writer::from_path(path).map_err(|e| MetaError::Io(e.to_string()))?;
            for r in csv_rows {
                w.write_record(r).map_err(|e| MetaError::Io(e.to_string()))?;
            }
            w.flush()?;
        } else {
            fs::write(path, &pretty).map_err(|e| MetaError::Io(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(if as_json { pretty } else { text })
}

/// Table of default sensitivity estimators.
pub const SENSITIVITY_ESTIMATORS: [CovKind; 5] = [CovKind::Cr1s, CovKind::Cr3s, CovKind::Cr4s, CovKind::Cr2, CovKind::St];

fn cmd_sensitivity(a: &ModelArgs) -> Result<String> {
    check_common(a)?;
    let kinds = parse_estimators(&a.estimators, &SENSITIVITY_ESTIMATORS)?;
    let method: TestMethod = a.test.parse()?;
    let cr4: Cr4Exponent = a.cr4_exponent.parse()?;
    // cells[estimator][rho]
    let mut cells: Vec<Vec<std::result::Result<f64, MetaError>>> = vec![Vec::new(); kinds.len()];
    let mut fits = Vec::new();
    for &rho in &a.rho {
        match fit_dataset(a, rho) {
            Ok((ds, fit)) => {
                for (i, &kind) in kinds.iter().enumerate() {
                    let p = covariance(&fit, kind, cr4)
                        .and_then(|cov| run_test(a, &fit, &cov, &ds, method))
                        .map(|t| t.p_value);
                    cells[i].push(p);
                }
                fits.push(json!({
                    "rho": rho,
                    "beta_hat": fit.beta_hat.iter().copied().collect::<Vec<_>>(),
                    "t_hat": matrix_json(&fit.t_hat.t),
                    "boundary": fit.boundary,
                    "reml_loglik": fit.reml_loglik,
                }));
            }
            Err(e) => {
                for c in cells.iter_mut() {
                    c.push(Err(e.clone()));
                }
                fits.push(json!({ "rho": rho, "error": error_json(&e)["error"] }));
            }
        }
    }
    let mut rows = vec![std::iter::once("estimator".to_string())
        .chain(a.rho.iter().map(|r| format!("rho={}", fmt6(*r))))
        .collect::<Vec<_>>()];
    let mut csv_rows = vec![std::iter::once("estimator".to_string())
        .chain(a.rho.iter().map(|r| r.to_string()))
        .collect::<Vec<_>>()];
    let mut json_rows = Vec::new();
    for (kind, row) in kinds.iter().zip(&cells) {
        rows.push(
            std::iter::once(kind.label().to_string())
                .chain(row.iter().map(|c| match c {
                    Ok(p) => fmt6(*p),
                    Err(e) => format!("error({})", e.class()),
                }))
                .collect(),
        );
        csv_rows.push(
            std::iter::once(kind.label().to_string())
                .chain(row.iter().map(|c| match c {
                    Ok(p) => p.to_string(),
                    Err(e) => format!("error:{}", e.class()),
                }))
                .collect(),
        );
        json_rows.push(json!({
            "estimator": kind.label(),
            "p_values": row.iter().map(|c| match c { Ok(p) => num(*p), Err(_) => Value::Null }).collect::<Vec<_>>(),
            "errors": row.iter().map(|c| match c { Ok(_) => Value::Null, Err(e) => error_json(e)["error"].clone() }).collect::<Vec<_>>(),
        }));
    }
    let text = format!("p-values of the Wald test of beta = 0 ({}):\n{}", method.id(), table(&rows));
    let report = json!({
        "command": "sensitivity",
        "input": a.input.display().to_string(),
        "test": method.id(),
        "rho": a.rho,
        "rows": json_rows,
        "fits": fits,
    });
    emit(a.out.as_deref(), a.json, &report, &csv_rows, text)
}

fn cmd_simulate(a: &SimArgs) -> Result<String> {
    let mut file: SimConfigFile = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| MetaError::Io(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| MetaError::Input(format!("scenario config: {e}")))?
        }
        None => toml::from_str("").map_err(|e| MetaError::Input(e.to_string()))?,
    };
    if let Some(r) = a.reps {
        file.reps = r;
    }
    if let Some(s) = a.seed {
        file.seed = s;
    }
    if a.full {
        file.full = true;
    }
    if a.workers.is_some() {
        file.workers = a.workers;
    }
    let cfg: SimConfig = file.expand()?;
    let mut results = Vec::with_capacity(cfg.scenarios.len());
    for s in &cfg.scenarios {
        results.push(run_scenario_with_workers(s, cfg.workers)?);
    }
    fs::create_dir_all(&a.out).map_err(|e| MetaError::Io(format!("{}: {e}", a.out.display())))?;
    let summary = a.out.join("sim_summary.csv");
    let long = a.out.join("sim_long.csv");
    write_summary_csv(&results, fs::File::create(&summary)?)?;
    write_long_csv(&results, fs::File::create(&long)?)?;

    let mut rows = vec![["scenario", "estimator", "coverage", "mc_se", "power", "eta<q-1", "valid"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    let mut json_rows = Vec::new();
    for r in &results {
        for e in &r.estimators {
            rows.push(vec![
                r.scenario.label(),
                e.kind.label().into(),
                fmt6(e.coverage),
                fmt6(e.mc_se_coverage),
                fmt6(e.power),
                fmt6(e.eta_below_rate),
                e.valid.to_string(),
            ]);
            json_rows.push(json!({
                "scenario": r.scenario.label(),
                "estimator": e.kind.label(),
                "coverage": num(e.coverage),
                "mc_se_coverage": num(e.mc_se_coverage),
                "power": num(e.power),
                "mc_se_power": num(e.mc_se_power),
                "eta_below_rate": num(e.eta_below_rate),
                "valid": e.valid,
            }));
        }
    }
    if a.json {
        let report = json!({ "summary_csv": summary.display().to_string(), "long_csv": long.display().to_string(), "rows": json_rows });
        return Ok(serde_json::to_string_pretty(&report).map_err(|e| MetaError::Io(e.to_string()))? + "\n");
    }
    Ok(format!(
        "{}\nwrote {} and {}\n",
        table(&rows),
        summary.display(),
        long.display()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt6(0.0709123456), "0.0709123");
        assert_eq!(fmt6(1.0), "1.00000");
        assert_eq!(fmt6(123456.7), "123457");
        assert_eq!(fmt6(0.0), "0");
        assert_eq!(fmt6(1e-7), "1.00000e-7");
    }

    #[test]
    fn hypothesis_parsing() {
        let labels: Vec<String> = ["DFS", "OS", "x:DFS", "x:OS"].iter().map(|s| s.to_string()).collect();
        let (h, c) = parse_hypothesis("b3=0", &labels).unwrap();
        assert_eq!(h.shape(), (1, 4));
        assert_eq!(h[(0, 3)], 1.0);
        assert_eq!(c[0], 0.0);
        let (h, c) = parse_hypothesis("x:DFS=0.5, b1=0", &labels).unwrap();
        assert_eq!(h[(0, 2)], 1.0);
        assert_eq!(h[(1, 1)], 1.0);
        assert_eq!(c[0], 0.5);
        assert!(parse_hypothesis("b4=0", &labels).is_err());
        assert!(parse_hypothesis("b1", &labels).is_err());
    }

    #[test]
    fn t_structure_parsing() {
        assert_eq!(parse_t_structure("unstructured").unwrap(), TStructure::Unstructured);
        assert_eq!(
            parse_t_structure("proportional:0.2,1").unwrap(),
            TStructure::Proportional { c1: 0.2, c2: 1.0 }
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        fs::write(&p, "0.1, 0.02\n0.02 0.3\n").unwrap();
        match parse_t_structure(&format!("fixed:{}", p.display())).unwrap() {
            TStructure::Fixed(m) => assert_eq!(m[(1, 0)], 0.02),
            other => panic!("{other:?}"),
        }
        assert!(parse_t_structure("diagonal").is_err());
    }

    #[test]
    fn aligned_table() {
        let t = table(&[vec!["a".into(), "1".into()], vec!["long".into(), "22".into()]]);
        assert_eq!(t, "a      1\nlong  22\n");
    }

    fn five_studies() -> String {
        concat!(env!("CARGO_MANIFEST_DIR"), "/data/five_studies.csv").to_string()
    }

    fn exec(args: &[&str]) -> Result<String> {
        let cli = Cli::try_parse_from(std::iter::once("mvmeta").chain(args.iter().copied())).unwrap();
        execute(&cli)
    }

    #[test]
    fn single_rho_gives_single_column() {
        let path = five_studies();
        let out: Value = serde_json::from_str(&exec(&["sensitivity", "--input", &path, "--rho", "0.5", "--json"]).unwrap()).unwrap();
        for row in out["rows"].as_array().unwrap() {
            assert_eq!(row["p_values"].as_array().unwrap().len(), 1);
        }
        let text = exec(&["sensitivity", "--input", &path, "--rho", "0.5"]).unwrap();
        let header = text.lines().find(|l| l.contains("rho")).unwrap();
        assert_eq!(header.matches("rho").count(), 1, "{text}");
    }

    #[test]
    fn st_only_gives_one_row() {
        let path = five_studies();
        let out: Value =
            serde_json::from_str(&exec(&["sensitivity", "--input", &path, "--rho", "0.5,0.8", "--estimators", "ST", "--json"]).unwrap())
                .unwrap();
        let rows = out["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0]["estimator"], "ST");
        assert_eq!(rows[0]["p_values"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let path = five_studies();
        let args = ["fit", "--input", &path, "--rho", "0.5", "--json"];
        assert_eq!(exec(&args).unwrap(), exec(&args).unwrap());
    }

    #[test]
    fn errors_exit_with_code_one() {
        assert_eq!(run(["mvmeta", "fit", "--input", "/nonexistent/effects.csv", "--rho", "0.5"]), 1);
        let path = five_studies();
        assert_eq!(run(["mvmeta", "fit", "--input", path.as_str(), "--rho", "1.5"]), 1);
        assert_eq!(run(["mvmeta", "fit", "--input", path.as_str(), "--rho", "0.5", "--alpha", "1.2"]), 1);
        let e = error_json(&MetaError::Domain("bad".into()));
        assert!(e["error"]["message"].as_str().unwrap().contains("bad"));
        assert!(e["error"]["class"].is_string());
    }

    #[test]
    fn t_rule_uses_residual_df() {
        let path = five_studies();
        let out: Value = serde_json::from_str(
            &exec(&["fit", "--input", &path, "--rho", "0.5", "--estimators", "CR2", "--df-rule", "t", "--json"]).unwrap(),
        )
        .unwrap();
        let df = out["total_effects"].as_u64().unwrap() as f64 - out["q"].as_u64().unwrap() as f64;
        let want = crate::statdist::Dist::StudentT { df }.quantile(0.975).unwrap();
        let got = out["estimators"][0]["intervals"][0]["quantile"].as_f64().unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn scalar_hypothesis_has_one_numerator_df() {
        let path = five_studies();
        let out: Value = serde_json::from_str(
            &exec(&["test", "--input", &path, "--rho", "0.5", "--estimators", "CR2", "--hypothesis", "b1=0", "--json"]).unwrap(),
        )
        .unwrap();
        assert_eq!(out["estimators"][0]["test"]["df1"].as_f64().unwrap(), 1.0);
    }

    #[test]
    fn csv_output_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("p.csv");
        let path = five_studies();
        exec(&["sensitivity", "--input", &path, "--rho", "0.5,0.8", "--out", out.to_str().unwrap()]).unwrap();
        let body = fs::read_to_string(&out).unwrap();
        assert_eq!(body.lines().count(), 6, "{body}");
    }

    #[test]
    fn small_simulation_writes_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("sim.toml");
        fs::write(
            &cfg,
            "seed = 3\nreps = 20\nestimators = [\"CR2\", \"ST\"]\n[grid]\nk = [10]\nn = [40]\nbeta = [[0.0, 0.0, 0.0, 0.0]]\nrho = [0.3]\nmissing_ratio = [0.2]\nt_setting = [\"A\"]\n",
        )
        .unwrap();
        let out_dir = dir.path().to_str().unwrap();
        let a = exec(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out_dir, "--workers", "2"]).unwrap();
        let summary = fs::read_to_string(dir.path().join("sim_summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 3, "{summary}");
        assert!(dir.path().join("sim_long.csv").exists());
        let b = exec(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out_dir, "--workers", "1"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(summary, fs::read_to_string(dir.path().join("sim_summary.csv")).unwrap());
    }
}
