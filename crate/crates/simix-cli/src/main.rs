//! Command-line front end: fit mixture models on CSV data, predict and
//! cluster, select bandwidths, compare models, and run simulation studies.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use simix::mixlin::{fit_mixlinreg, MixlinFit, MixlinOptions};
use simix::mrsip::{estep_mrsip, fit_mrsip, predict_mrsip, MrsipFit, MrsipOptions};
use simix::msim::{fit_msim, predict_msim, FitMode, MsimFit, MsimOptions};
use simix::selection::{
    cv_bandwidth, default_candidates, dfold_compare, mccv_compare, CvModel, ModelSpec,
    PredictionComparison,
};
use simix::simlab::{run_replications, Estimator, ExampleId, ReplicationConfig};
use simix::sir::sir_direction;
use simix::PosteriorMatrix;

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "simix", version, about = "Semiparametric mixture-of-regressions estimation")]
struct Cli {
    /// Optional JSON config file supplying default values; flags override.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on CSV data and write fit artifacts.
    Fit(FitArgs),
    /// Predict and cluster new data from a saved fit artifact.
    Predict(PredictArgs),
    /// Select a bandwidth by repeated L-fold cross-validation.
    Cv(CvArgs),
    /// Compare models by d-fold or Monte-Carlo cross-validation.
    Compare(CompareArgs),
    /// Run a seeded replication study on a simulation design.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModelArg {
    Msim,
    Mrsip,
    Mixlin,
    Linear,
}

impl ModelArg {
    fn name(self) -> &'static str {
        match self {
            ModelArg::Msim => "msim",
            ModelArg::Mrsip => "mrsip",
            ModelArg::Mixlin => "mixlin",
            ModelArg::Linear => "linear",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Onestep,
    Fib,
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV with a header row.
    data: PathBuf,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Number of mixture components.
    #[arg(long)]
    k: Option<usize>,
    /// Fixed bandwidth for the kernel-smoothed fits.
    #[arg(long)]
    h: Option<f64>,
    /// Select the bandwidth by cross-validation instead of --h.
    #[arg(long)]
    cv_bandwidth: bool,
    /// Folds for --cv-bandwidth.
    #[arg(long)]
    cv_l: Option<usize>,
    /// Repetitions for --cv-bandwidth.
    #[arg(long)]
    cv_reps: Option<usize>,
    /// Candidate bandwidths for --cv-bandwidth (comma-separated, or "auto").
    #[arg(long)]
    cv_candidates: Option<String>,
    /// MSIM fitting mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Response column name.
    #[arg(long)]
    response: Option<String>,
    #[arg(long)]
    grid_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Divide every predictor column by its standard deviation before
    /// fitting.
    #[arg(long)]
    standardize: bool,
    /// Exit with code 4 when the fit did not converge.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// New-data CSV; predictor columns must match the fit.
    data: PathBuf,
    /// Saved fit artifact (fit.json from a fit run).
    #[arg(long = "fit")]
    fit_path: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    data: PathBuf,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated bandwidths, or "auto" for the default geometric grid.
    #[arg(long)]
    candidates: Option<String>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    response: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    data: PathBuf,
    /// Comma-separated model list: msim, mrsip, mixlin, linear, constant.
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    /// Monte-Carlo CV with test size --d; otherwise --folds d-fold CV.
    #[arg(long)]
    mccv: bool,
    /// MCCV test-set size.
    #[arg(long)]
    d: Option<usize>,
    /// MCCV repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Fold count for d-fold CV.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    response: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation design: 1 (MSIM) or 2 (MRSIP).
    #[arg(long)]
    example: Option<u8>,
    /// Comma-separated sample sizes.
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated estimators: sir, os, fib, fib_t, mrsip, mrsip_t,
    /// mixlin.
    #[arg(long)]
    estimators: Option<String>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    os_h: Option<f64>,
    #[arg(long)]
    grid_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    /// Exit 2: malformed input or arguments.
    Input(String),
    /// Exit 3: estimation failure.
    Estimation(String),
    /// Exit 4: fit did not converge under --strict.
    NonConvergence(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Estimation(_) => 3,
            CliError::NonConvergence(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Estimation(m) | CliError::NonConvergence(m) => m,
        }
    }
}

impl From<simix::SimixError> for CliError {
    fn from(e: simix::SimixError) -> Self {
        CliError::Estimation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let cfg = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    };
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args, &cfg),
        Command::Predict(args) => cmd_predict(args, &cfg),
        Command::Cv(args) => cmd_cv(args, &cfg),
        Command::Compare(args) => cmd_compare(args, &cfg),
        Command::Simulate(args) => cmd_simulate(args, &cfg),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}

/// Config file values, consulted for any flag left unset.
struct Cfg(serde_json::Value);

impl Cfg {
    fn f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(|v| v.as_f64())
    }
    fn usize(&self, key: &str) -> Option<usize> {
        self.0.get(key).and_then(|v| v.as_u64()).map(|v| v as usize)
    }
    fn u64(&self, key: &str) -> Option<u64> {
        self.0.get(key).and_then(|v| v.as_u64())
    }
    fn string(&self, key: &str) -> Option<String> {
        self.0.get(key).and_then(|v| v.as_str()).map(String::from)
    }
    fn flag(&self, key: &str) -> bool {
        self.0.get(key).and_then(|v| v.as_bool()).unwrap_or(false)
    }
}

fn load_config(path: Option<&Path>) -> CliResult<Cfg> {
    match path {
        None => Ok(Cfg(json!({}))),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?;
            if !value.is_object() {
                return Err(CliError::Input(format!(
                    "config {}: expected a JSON object",
                    p.display()
                )));
            }
            Ok(Cfg(value))
        }
    }
}

/// Read a CSV with a header row into predictors and the response column.
fn read_csv(path: &Path, response: &str) -> CliResult<(DMatrix<f64>, DVector<f64>, Vec<String>)> {
    let (mat, headers) = read_csv_matrix(path)?;
    let y_col = headers
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| CliError::Input(format!("response column '{response}' not found")))?;
    let pred_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != y_col).collect();
    let x = DMatrix::from_fn(mat.nrows(), pred_cols.len(), |r, c| mat[(r, pred_cols[c])]);
    let y = mat.column(y_col).into_owned();
    let names = pred_cols.iter().map(|&c| headers[c].clone()).collect();
    Ok((x, y, names))
}

fn read_csv_matrix(path: &Path) -> CliResult<(DMatrix<f64>, Vec<String>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Input(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if headers.is_empty() {
        return Err(CliError::Input(format!("{}: empty header row", path.display())));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Input(e.to_string()))?;
        if record.len() != headers.len() {
            return Err(CliError::Input(format!(
                "row {}: {} fields, header has {}",
                i + 1,
                record.len(),
                headers.len()
            )));
        }
        let mut row = Vec::with_capacity(headers.len());
        for (j, field) in record.iter().enumerate() {
            if field.trim().is_empty() {
                return Err(CliError::Input(format!(
                    "row {}, column '{}': missing value",
                    i + 1,
                    headers[j]
                )));
            }
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::Input(format!(
                    "row {}, column '{}': '{field}' is not numeric",
                    i + 1,
                    headers[j]
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: no data rows", path.display())));
    }
    let mat = DMatrix::from_fn(rows.len(), headers.len(), |r, c| rows[r][c]);
    Ok((mat, headers))
}

fn ensure_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_text(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Estimation(e.to_string()))?;
    write_text(dir, name, &text)
}

/// Divide every predictor column by its sample standard deviation.
fn standardize_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut scales = Vec::with_capacity(x.ncols());
    let mut out = x.clone();
    for c in 0..x.ncols() {
        let col = x.column(c);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        scales.push(sd);
        for r in 0..x.nrows() {
            out[(r, c)] /= sd;
        }
    }
    (out, scales)
}

/// The serialized fit artifact; enough to reproduce predictions exactly.
#[derive(Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
enum FitArtifact {
    Msim { fit: MsimFit },
    Mrsip { fit: MrsipFit },
    Mixlin { fit: MixlinFit },
    Linear { fit: MixlinFit },
}

#[derive(Serialize, Deserialize)]
struct SavedFit {
    schema_version: u32,
    /// Predictor column names in fit order.
    columns: Vec<String>,
    response: String,
    /// Per-column divisors applied before fitting (1s when not standardized).
    scales: Vec<f64>,
    seed: u64,
    #[serde(flatten)]
    artifact: FitArtifact,
}

fn index_csv(columns: &[String], index: &simix::IndexVector) -> String {
    let mut out = String::from("column,coefficient\n");
    for (name, v) in columns.iter().zip(index.coefficients().iter()) {
        out.push_str(&format!("{name},{v:.12}\n"));
    }
    out
}

fn curves_csv(curves: &simix::CurveSet) -> String {
    let mut out = String::from("grid_point,component,pi,m,sigma2\n");
    let k = curves.n_components();
    let has_mv = curves.means.nrows() == curves.grid.len();
    for (t, &u) in curves.grid.points().iter().enumerate() {
        for j in 0..k {
            if has_mv {
                out.push_str(&format!(
                    "{u:.12},{},{:.12},{:.12},{:.12}\n",
                    j + 1,
                    curves.proportions[(t, j)],
                    curves.means[(t, j)],
                    curves.variances[(t, j)]
                ));
            } else {
                out.push_str(&format!(
                    "{u:.12},{},{:.12},,\n",
                    j + 1,
                    curves.proportions[(t, j)]
                ));
            }
        }
    }
    out
}

fn linear_params_csv(columns: &[String], params: &simix::LinearMixtureParams) -> String {
    let mut out = String::from("component,term,value\n");
    let k = params.n_components();
    for j in 0..k {
        let mut c = 0;
        if params.intercept {
            out.push_str(&format!("{},intercept,{:.12}\n", j + 1, params.coefficients[(j, 0)]));
            c = 1;
        }
        for name in columns {
            out.push_str(&format!("{},{name},{:.12}\n", j + 1, params.coefficients[(j, c)]));
            c += 1;
        }
        out.push_str(&format!("{},sigma2,{:.12}\n", j + 1, params.variances[j]));
        out.push_str(&format!("{},pi,{:.12}\n", j + 1, params.proportions[j]));
    }
    out
}

fn posteriors_csv(post: &PosteriorMatrix) -> String {
    let k = post.k();
    let mut out = String::from("row");
    for j in 0..k {
        out.push_str(&format!(",p_{}", j + 1));
    }
    out.push('\n');
    for i in 0..post.n() {
        out.push_str(&format!("{}", i + 1));
        for j in 0..k {
            out.push_str(&format!(",{:.12}", post.matrix()[(i, j)]));
        }
        out.push('\n');
    }
    out
}

fn labels_csv(labels: &[usize]) -> String {
    let mut out = String::from("row,label\n");
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l + 1));
    }
    out
}

fn cmd_fit(args: FitArgs, cfg: &Cfg) -> CliResult<()> {
    let model = args
        .model
        .or_else(|| match cfg.string("model").as_deref() {
            Some("msim") => Some(ModelArg::Msim),
            Some("mrsip") => Some(ModelArg::Mrsip),
            Some("mixlin") => Some(ModelArg::Mixlin),
            Some("linear") => Some(ModelArg::Linear),
            _ => None,
        })
        .ok_or_else(|| CliError::Input("--model is required".into()))?;
    let k = match model {
        ModelArg::Linear => 1,
        _ => args.k.or_else(|| cfg.usize("k")).unwrap_or(2),
    };
    if k == 0 {
        return Err(CliError::Input("--k must be at least 1".into()));
    }
    let response = args
        .response
        .or_else(|| cfg.string("response"))
        .unwrap_or_else(|| "y".into());
    let grid_n = args.grid_n.or_else(|| cfg.usize("grid_n")).unwrap_or(100);
    let seed = args.seed.or_else(|| cfg.u64("seed")).unwrap_or(0);
    let standardize = args.standardize || cfg.flag("standardize");
    let strict = args.strict || cfg.flag("strict");
    let out = args
        .out
        .or_else(|| cfg.string("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("simix-out"));
    let use_cv = args.cv_bandwidth || cfg.flag("cv_bandwidth");
    let mode = match args.mode {
        Some(ModeArg::Onestep) => FitMode::OneStep,
        Some(ModeArg::Fib) => FitMode::Fib,
        None => match cfg.string("mode").as_deref() {
            Some("onestep") => FitMode::OneStep,
            _ => FitMode::Fib,
        },
    };
    let h_flag = args.h.or_else(|| cfg.f64("h"));
    let cv_l = args.cv_l.or_else(|| cfg.usize("cv_l")).unwrap_or(10);
    let cv_reps = args.cv_reps.or_else(|| cfg.usize("cv_reps")).unwrap_or(30);

    let (raw_x, y, columns) = read_csv(&args.data, &response)?;
    let (x, scales) = if standardize {
        standardize_columns(&raw_x)
    } else {
        (raw_x, vec![1.0; columns.len()])
    };

    let needs_h = matches!(model, ModelArg::Msim | ModelArg::Mrsip);
    let h = if !needs_h {
        None
    } else if use_cv {
        let cand_arg = args
            .cv_candidates
            .or_else(|| cfg.string("cv_candidates"))
            .unwrap_or_else(|| "auto".into());
        let candidates = if cand_arg == "auto" {
            let z_dir = sir_direction(&x, &y, 10).map_err(CliError::from)?;
            let z: Vec<f64> = z_dir.project(&x).iter().copied().collect();
            default_candidates(&z, x.nrows()).map_err(CliError::from)?
        } else {
            let mut v = Vec::new();
            for tok in cand_arg.split(',') {
                v.push(tok.trim().parse::<f64>().map_err(|_| {
                    CliError::Input(format!("candidate '{tok}' is not numeric"))
                })?);
            }
            v
        };
        let cv_model = match model {
            ModelArg::Msim => CvModel::Msim(FitMode::OneStep),
            _ => CvModel::Mrsip,
        };
        let report = cv_bandwidth(&x, &y, k, cv_model, &candidates, cv_l, cv_reps, seed)?;
        Some(report.selected)
    } else {
        Some(h_flag.ok_or_else(|| {
            CliError::Input("--h or --cv-bandwidth is required for this model".into())
        })?)
    };

    ensure_out(&out)?;
    write_json(
        &out,
        "config.json",
        &json!({
            "command": "fit",
            "data": args.data.display().to_string(),
            "model": model.name(),
            "k": k,
            "h": h,
            "cv_bandwidth": use_cv,
            "mode": if mode == FitMode::Fib { "fib" } else { "onestep" },
            "response": response,
            "grid_n": grid_n,
            "seed": seed,
            "standardize": standardize,
            "strict": strict,
            "out": out.display().to_string(),
        }),
    )?;

    let (artifact, summary, converged) = match model {
        ModelArg::Msim => {
            let opts = MsimOptions {
                mode,
                grid_n,
                seed,
                ..Default::default()
            };
            let fit = fit_msim(&x, &y, k, h.unwrap(), &opts)?;
            write_text(&out, "index.csv", &index_csv(&columns, &fit.index))?;
            write_text(&out, "curves.csv", &curves_csv(&fit.curves))?;
            write_text(&out, "posteriors.csv", &posteriors_csv(&fit.posteriors))?;
            write_text(&out, "labels.csv", &labels_csv(&fit.posteriors.hard_labels()))?;
            let summary = json!({
                "loglik": fit.loglik,
                "converged": fit.converged,
                "bandwidth": fit.bandwidth,
                "index": fit.index.coefficients().as_slice(),
                "em_iterations": fit.iterations.em_iterations,
                "backfit_rounds": fit.iterations.backfit_rounds,
            });
            let converged = fit.converged;
            (FitArtifact::Msim { fit }, summary, converged)
        }
        ModelArg::Mrsip => {
            let opts = MrsipOptions {
                grid_n,
                seed,
                ..Default::default()
            };
            let fit = fit_mrsip(&x, &y, k, h.unwrap(), &opts)?;
            write_text(&out, "index.csv", &index_csv(&columns, &fit.index))?;
            write_text(&out, "curves.csv", &curves_csv(&fit.proportion_curves))?;
            write_text(&out, "linear_params.csv", &linear_params_csv(&columns, &fit.linear))?;
            write_text(&out, "posteriors.csv", &posteriors_csv(&fit.posteriors))?;
            write_text(&out, "labels.csv", &labels_csv(&fit.posteriors.hard_labels()))?;
            let summary = json!({
                "loglik": fit.loglik,
                "converged": fit.converged,
                "bandwidth": fit.bandwidth,
                "index": fit.index.coefficients().as_slice(),
                "outer_rounds": fit.iterations.outer_rounds,
            });
            let converged = fit.converged;
            (FitArtifact::Mrsip { fit }, summary, converged)
        }
        ModelArg::Mixlin | ModelArg::Linear => {
            let opts = MixlinOptions {
                seed,
                ..Default::default()
            };
            let fit = fit_mixlinreg(&x, &y, k, &opts)?;
            write_text(&out, "linear_params.csv", &linear_params_csv(&columns, &fit.params))?;
            write_text(&out, "posteriors.csv", &posteriors_csv(&fit.posteriors))?;
            write_text(&out, "labels.csv", &labels_csv(&fit.posteriors.hard_labels()))?;
            let summary = json!({
                "loglik": fit.loglik,
                "converged": fit.converged,
                "iterations": fit.iterations,
            });
            let converged = fit.converged;
            let artifact = if model == ModelArg::Mixlin {
                FitArtifact::Mixlin { fit }
            } else {
                FitArtifact::Linear { fit }
            };
            (artifact, summary, converged)
        }
    };

    let saved = SavedFit {
        schema_version: SCHEMA_VERSION,
        columns: columns.clone(),
        response: response.clone(),
        scales,
        seed,
        artifact,
    };
    let text = serde_json::to_string(&saved).map_err(|e| CliError::Estimation(e.to_string()))?;
    write_text(&out, "fit.json", &text)?;

    let mut summary_value = json!({
        "schema_version": SCHEMA_VERSION,
        "model": model.name(),
        "k": k,
        "n": x.nrows(),
        "columns": columns,
        "response": response,
        "seed": seed,
        "standardize": standardize,
    });
    if let (Some(obj), Some(extra)) = (summary_value.as_object_mut(), summary.as_object()) {
        for (key, value) in extra {
            obj.insert(key.clone(), value.clone());
        }
    }
    write_json(&out, "summary.json", &summary_value)?;

    if strict && !converged {
        return Err(CliError::NonConvergence(
            "fit did not converge within the iteration budget".into(),
        ));
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs, cfg: &Cfg) -> CliResult<()> {
    let out = args
        .out
        .or_else(|| cfg.string("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("simix-out"));
    let text = fs::read_to_string(&args.fit_path)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.fit_path.display())))?;
    let saved: SavedFit = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.fit_path.display())))?;
    if saved.schema_version != SCHEMA_VERSION {
        return Err(CliError::Input(format!(
            "fit artifact schema_version {} unsupported (expected {SCHEMA_VERSION})",
            saved.schema_version
        )));
    }

    let (mat, headers) = read_csv_matrix(&args.data)?;
    let mut cols = Vec::with_capacity(saved.columns.len());
    for name in &saved.columns {
        let c = headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Input(format!("new data is missing predictor column '{name}'"))
        })?;
        cols.push(c);
    }
    let mut x = DMatrix::from_fn(mat.nrows(), cols.len(), |r, c| mat[(r, cols[c])]);
    for c in 0..x.ncols() {
        for r in 0..x.nrows() {
            x[(r, c)] /= saved.scales[c];
        }
    }
    let y_new: Option<DVector<f64>> = headers
        .iter()
        .position(|h| *h == saved.response)
        .map(|c| mat.column(c).into_owned());

    let (y_hat, posteriors, labels) = match &saved.artifact {
        FitArtifact::Msim { fit } => predict_msim(fit, &x, y_new.as_ref())?,
        FitArtifact::Mrsip { fit } => predict_mrsip(fit, &x, y_new.as_ref())?,
        FitArtifact::Mixlin { fit } | FitArtifact::Linear { fit } => {
            predict_mixlin(fit, &x, y_new.as_ref())?
        }
    };

    ensure_out(&out)?;
    write_json(
        &out,
        "config.json",
        &json!({
            "command": "predict",
            "data": args.data.display().to_string(),
            "fit": args.fit_path.display().to_string(),
            "out": out.display().to_string(),
        }),
    )?;
    let mut pred = String::from("row,y_hat,label\n");
    for i in 0..y_hat.len() {
        pred.push_str(&format!("{},{:.12},{}\n", i + 1, y_hat[i], labels[i] + 1));
    }
    write_text(&out, "predictions.csv", &pred)?;
    write_text(&out, "posteriors.csv", &posteriors_csv(&posteriors))?;
    write_text(&out, "labels.csv", &labels_csv(&labels))?;
    Ok(())
}

fn predict_mixlin(
    fit: &MixlinFit,
    x: &DMatrix<f64>,
    y_new: Option<&DVector<f64>>,
) -> CliResult<(DVector<f64>, PosteriorMatrix, Vec<usize>)> {
    let n = x.nrows();
    let k = fit.params.n_components();
    let q = fit.params.coefficients.ncols();
    let intercept = fit.params.intercept;
    if q != x.ncols() + usize::from(intercept) {
        return Err(CliError::Input(format!(
            "new data has {} predictors, fit expects {}",
            x.ncols(),
            q - usize::from(intercept)
        )));
    }
    let mut design = DMatrix::zeros(n, q);
    for i in 0..n {
        let mut c = 0;
        if intercept {
            design[(i, 0)] = 1.0;
            c = 1;
        }
        for j in 0..x.ncols() {
            design[(i, c + j)] = x[(i, j)];
        }
    }
    let means = &design * fit.params.coefficients.transpose();
    let posteriors = match y_new {
        Some(y) => {
            let pi = DMatrix::from_fn(n, k, |_, j| fit.params.proportions[j]);
            estep_mrsip(&pi, &design, y, &fit.params)?
        }
        None => PosteriorMatrix::new(DMatrix::from_fn(n, k, |_, j| fit.params.proportions[j]))?,
    };
    let mut y_hat = DVector::zeros(n);
    for i in 0..n {
        for j in 0..k {
            y_hat[i] += posteriors.matrix()[(i, j)] * means[(i, j)];
        }
    }
    let labels = posteriors.hard_labels();
    Ok((y_hat, posteriors, labels))
}

fn cmd_cv(args: CvArgs, cfg: &Cfg) -> CliResult<()> {
    let model = args
        .model
        .or_else(|| match cfg.string("model").as_deref() {
            Some("msim") => Some(ModelArg::Msim),
            Some("mrsip") => Some(ModelArg::Mrsip),
            _ => None,
        })
        .ok_or_else(|| CliError::Input("--model msim|mrsip is required".into()))?;
    let cv_model = match model {
        ModelArg::Msim => {
            let mode = match args.mode {
                Some(ModeArg::Fib) => FitMode::Fib,
                _ => FitMode::OneStep,
            };
            CvModel::Msim(mode)
        }
        ModelArg::Mrsip => CvModel::Mrsip,
        _ => return Err(CliError::Input("bandwidth CV applies to msim or mrsip".into())),
    };
    let k = args.k.or_else(|| cfg.usize("k")).unwrap_or(2);
    let response = args
        .response
        .or_else(|| cfg.string("response"))
        .unwrap_or_else(|| "y".into());
    let l = args.l.or_else(|| cfg.usize("l")).unwrap_or(10);
    let reps = args.reps.or_else(|| cfg.usize("reps")).unwrap_or(30);
    let seed = args.seed.or_else(|| cfg.u64("seed")).unwrap_or(0);
    let standardize = args.standardize || cfg.flag("standardize");
    let out = args
        .out
        .or_else(|| cfg.string("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("simix-out"));
    let cand_arg = args
        .candidates
        .or_else(|| cfg.string("candidates"))
        .unwrap_or_else(|| "auto".into());

    let (raw_x, y, _) = read_csv(&args.data, &response)?;
    let (x, _) = if standardize {
        standardize_columns(&raw_x)
    } else {
        (raw_x, vec![])
    };

    let candidates: Vec<f64> = if cand_arg == "auto" {
        let dir = sir_direction(&x, &y, 10).map_err(CliError::from)?;
        let z: Vec<f64> = dir.project(&x).iter().copied().collect();
        default_candidates(&z, x.nrows()).map_err(CliError::from)?
    } else {
        let mut v = Vec::new();
        for tok in cand_arg.split(',') {
            v.push(tok.trim().parse::<f64>().map_err(|_| {
                CliError::Input(format!("candidate '{tok}' is not numeric"))
            })?);
        }
        v
    };

    let report = cv_bandwidth(&x, &y, k, cv_model, &candidates, l, reps, seed)?;

    ensure_out(&out)?;
    write_json(
        &out,
        "config.json",
        &json!({
            "command": "cv",
            "data": args.data.display().to_string(),
            "model": model.name(),
            "k": k,
            "candidates": report.candidates,
            "l": l,
            "reps": reps,
            "seed": seed,
            "standardize": standardize,
            "out": out.display().to_string(),
        }),
    )?;
    let mut scores = String::from("repetition,candidate,cv\n");
    for (r, row) in report.cv_scores.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let cell = if v.is_nan() { String::new() } else { format!("{v:.12}") };
            scores.push_str(&format!("{},{:.12},{cell}\n", r + 1, report.candidates[c]));
        }
    }
    write_text(&out, "cv_scores.csv", &scores)?;
    let (under, appropriate, over) = report.policy;
    write_json(
        &out,
        "summary.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "selected": report.selected,
            "policy": { "under": under, "appropriate": appropriate, "over": over },
            "dropped_candidates": report.dropped,
        }),
    )?;
    write_text(
        &out,
        "bandwidth.csv",
        &format!("under,appropriate,over\n{under:.12},{appropriate:.12},{over:.12}\n"),
    )?;
    Ok(())
}

fn parse_model_specs(list: &str, k: usize, h: Option<f64>) -> CliResult<Vec<ModelSpec>> {
    let mut specs = Vec::new();
    for tok in list.split(',') {
        let spec = match tok.trim() {
            "msim" => ModelSpec::Msim {
                k,
                bandwidth: h,
                mode: FitMode::OneStep,
            },
            "mrsip" => ModelSpec::Mrsip { k, bandwidth: h },
            "mixlin" => ModelSpec::MixLin { k },
            "linear" => ModelSpec::Linear,
            "constant" => ModelSpec::Constant,
            other => return Err(CliError::Input(format!("unknown model '{other}'"))),
        };
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(CliError::Input("--models list is empty".into()));
    }
    Ok(specs)
}

fn cmd_compare(args: CompareArgs, cfg: &Cfg) -> CliResult<()> {
    let models = args
        .models
        .or_else(|| cfg.string("models"))
        .ok_or_else(|| CliError::Input("--models is required".into()))?;
    let k = args.k.or_else(|| cfg.usize("k")).unwrap_or(2);
    let h = args.h.or_else(|| cfg.f64("h"));
    let response = args
        .response
        .or_else(|| cfg.string("response"))
        .unwrap_or_else(|| "y".into());
    let seed = args.seed.or_else(|| cfg.u64("seed")).unwrap_or(0);
    let standardize = args.standardize || cfg.flag("standardize");
    let mccv = args.mccv || cfg.flag("mccv");
    let d = args.d.or_else(|| cfg.usize("d")).unwrap_or(10);
    let reps = args.reps.or_else(|| cfg.usize("reps")).unwrap_or(500);
    let folds = args.folds.or_else(|| cfg.usize("folds")).unwrap_or(5);
    let out = args
        .out
        .or_else(|| cfg.string("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("simix-out"));

    let specs = parse_model_specs(&models, k, h)?;
    let (raw_x, y, _) = read_csv(&args.data, &response)?;
    let (x, _) = if standardize {
        standardize_columns(&raw_x)
    } else {
        (raw_x, vec![])
    };

    let comparison: PredictionComparison = if mccv {
        mccv_compare(&x, &y, &specs, d, reps, seed)?
    } else {
        dfold_compare(&x, &y, &specs, folds, seed)?
    };

    ensure_out(&out)?;
    write_json(
        &out,
        "config.json",
        &json!({
            "command": "compare",
            "data": args.data.display().to_string(),
            "models": comparison.models,
            "k": k,
            "h": h,
            "mccv": mccv,
            "d": d,
            "reps": reps,
            "folds": folds,
            "seed": seed,
            "standardize": standardize,
            "out": out.display().to_string(),
        }),
    )?;

    let splits = comparison.mspe.first().map(|v| v.len()).unwrap_or(0);
    let mut csv_out = String::from("split");
    for m in &comparison.models {
        csv_out.push_str(&format!(",{m}"));
    }
    csv_out.push('\n');
    for s in 0..splits {
        csv_out.push_str(&format!("{}", s + 1));
        for row in &comparison.mspe {
            if row[s].is_nan() {
                csv_out.push(',');
            } else {
                csv_out.push_str(&format!(",{:.12}", row[s]));
            }
        }
        csv_out.push('\n');
    }
    write_text(&out, "mspe.csv", &csv_out)?;
    write_json(
        &out,
        "summary.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "models": comparison.models,
            "median_mspe": comparison.medians(),
            "failures": comparison.failures.len(),
        }),
    )?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, cfg: &Cfg) -> CliResult<()> {
    let example = match args.example.or_else(|| cfg.usize("example").map(|v| v as u8)) {
        Some(1) => ExampleId::Example1,
        Some(2) => ExampleId::Example2,
        Some(other) => return Err(CliError::Input(format!("unknown example {other}"))),
        None => return Err(CliError::Input("--example 1|2 is required".into())),
    };
    let n_list = args.n.or_else(|| cfg.string("n")).unwrap_or_else(|| "200,400".into());
    let mut n_values = Vec::new();
    for tok in n_list.split(',') {
        n_values.push(tok.trim().parse::<usize>().map_err(|_| {
            CliError::Input(format!("sample size '{tok}' is not an integer"))
        })?);
    }
    let reps = args.reps.or_else(|| cfg.usize("reps")).unwrap_or(100);
    let est_list = args
        .estimators
        .or_else(|| cfg.string("estimators"))
        .unwrap_or_else(|| match example {
            ExampleId::Example1 => "sir,os,fib".into(),
            ExampleId::Example2 => "mixlin,mrsip".into(),
        });
    let mut estimators = Vec::new();
    for tok in est_list.split(',') {
        let e = Estimator::parse(tok.trim())
            .ok_or_else(|| CliError::Input(format!("unknown estimator '{tok}'")))?;
        estimators.push(e);
    }
    let seed = args.seed.or_else(|| cfg.u64("seed")).unwrap_or(0);
    let workers = args.workers.or_else(|| cfg.usize("workers")).unwrap_or(1);
    let grid_n = args.grid_n.or_else(|| cfg.usize("grid_n")).unwrap_or(100);
    let out = args
        .out
        .or_else(|| cfg.string("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("simix-out"));

    let config = ReplicationConfig {
        example,
        n_values: n_values.clone(),
        replications: reps,
        estimators: estimators.clone(),
        bandwidth: args.h.or_else(|| cfg.f64("h")),
        os_bandwidth: args.os_h.or_else(|| cfg.f64("os_h")),
        grid_n,
        seed,
        workers,
    };
    let table = run_replications(&config)?;

    ensure_out(&out)?;
    let tables_dir = out.join("tables");
    fs::create_dir_all(&tables_dir)?;
    write_json(
        &out,
        "config.json",
        &serde_json::to_value(&config).map_err(|e| CliError::Estimation(e.to_string()))?,
    )?;
    let example_no = if example == ExampleId::Example1 { 1 } else { 2 };
    fs::write(tables_dir.join(format!("example{example_no}.csv")), table.to_csv())?;
    fs::write(tables_dir.join(format!("example{example_no}.txt")), table.to_pretty_string())?;
    let mut failures = String::from("n,replication,seed,estimator,message\n");
    for f in &table.failures {
        failures.push_str(&format!(
            "{},{},{},{},\"{}\"\n",
            f.n, f.replication, f.seed, f.estimator, f.message.replace('"', "'")
        ));
    }
    write_text(&out, "failures.csv", &failures)?;
    write_json(
        &out,
        "summary.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "example": example_no,
            "n_values": n_values,
            "replications": reps,
            "estimators": estimators.iter().map(|e| e.name()).collect::<Vec<_>>(),
            "failures": table.failures.len(),
            "fit_seconds": table.fit_seconds,
        }),
    )?;
    Ok(())
}
