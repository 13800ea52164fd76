//! Command-line surface: `select` (model selection + effect estimation from
//! a config file), `simulate` (synthetic-scenario replication), `ballcor`
//! (dependence check between two columns), and `fit` (one GPS model,
//! reported).
//!
//! Conventions shared by all commands: stdout carries the summary, stderr
//! carries diagnostics; artifacts are byte-identical for a given config and
//! seed regardless of `--threads`; a missing `--seed` is drawn from entropy
//! and echoed to stderr so the run can be reproduced; exit code 0 means
//! success, 2 a validation problem, 3 a numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::ball;
use crate::dataset::{self, CsvSchema, Dataset};
use crate::error::{Error, Result};
use crate::mnlogit::{self, GpsModelSpec};
use crate::pipeline::{self, CandidateModel, MeasureId, RhoOptions, RunOptions, SelectionResult};
use crate::simlab::{self, OutcomeForm, Scenario, SimResult};

/// Report files carry a schema version so downstream readers can detect
/// layout changes.
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Parser)]
#[command(
    name = "gpsmatch",
    version,
    about = "Generalized propensity score model selection, matching estimation, and simulation"
)]
struct Cli {
    /// Worker threads for fitting and replication (default: all cores).
    /// Results never depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select a GPS model per arm by a balance measure and estimate all
    /// pairwise treatment effects.
    Select(SelectArgs),
    /// Run a synthetic scenario and aggregate bias, MSE, selection, and
    /// coverage over replicates.
    Simulate(SimulateArgs),
    /// Ball correlation and permutation p-value between two columns.
    Ballcor(BallcorArgs),
    /// Fit a single GPS model and report its coefficients.
    Fit(FitArgs),
}

#[derive(Args)]
struct SelectArgs {
    /// TOML run configuration (see the documented schema).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's input CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Override the config's output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the config's balance measure.
    #[arg(long)]
    measure: Option<String>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Instrument strength (1 or 2).
    #[arg(long, default_value_t = 2)]
    u: u8,
    /// Precision strength (1 or 2).
    #[arg(long, default_value_t = 2)]
    v: u8,
    /// Outcome form: linear or nonlinear.
    #[arg(long, default_value = "linear")]
    outcome: String,
    /// Number of replicates.
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Units retained per arm.
    #[arg(long, default_value_t = 500)]
    n_per_arm: usize,
    /// Comma-separated selection measures to run through the pipeline.
    #[arg(long, default_value = "oabm_ols,amd", value_delimiter = ',')]
    measures: Vec<String>,
    /// Output directory for the result artifacts.
    #[arg(long, default_value = "gpsmatch-sim")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BallcorArgs {
    /// CSV file holding the two columns.
    #[arg(long)]
    input: PathBuf,
    /// First column name.
    #[arg(long)]
    x: String,
    /// Second column name.
    #[arg(long)]
    y: String,
    /// Permutation count for the independence test.
    #[arg(long, default_value_t = 199)]
    permutations: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV.
    #[arg(long)]
    input: PathBuf,
    /// Outcome column name.
    #[arg(long)]
    outcome: String,
    /// Treatment column name.
    #[arg(long)]
    treatment: String,
    /// Comma-separated covariate columns to include (empty: intercept only).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    covariates: Vec<String>,
    /// Columns to drop entirely.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    exclude: Vec<String>,
    /// Directory to write fit.json into (stdout only if absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses arguments, sets up the worker pool, and dispatches. Returns the
/// process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: could not size the worker pool: {e}");
            return 2;
        }
    }
    let result = match cli.command {
        Command::Select(args) => cmd_select(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Ballcor(args) => cmd_ballcor(&args),
        Command::Fit(args) => cmd_fit(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// On-disk run configuration for `select`. Unknown keys are rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Input CSV path (flag-overridable).
    pub input: Option<PathBuf>,
    /// Output directory (flag-overridable; default `gpsmatch-out`).
    pub output: Option<PathBuf>,
    pub outcome: String,
    pub treatment: String,
    /// Columns dropped before modeling (ids, bookkeeping).
    #[serde(default)]
    pub exclude: Vec<String>,
    /// String columns to dummy-code.
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Balance measure id (default `oabm_ols`).
    pub measure: Option<String>,
    /// Root seed (flag-overridable; drawn from entropy if absent).
    pub seed: Option<u64>,
    /// Candidate models, each a named covariate list.
    #[serde(rename = "model")]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub rho: RhoConfig,
    #[serde(default)]
    pub variance: VarianceConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub covariates: Vec<String>,
}

/// Relevance-profile settings (`[rho]` table).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RhoConfig {
    pub permutations: usize,
    pub alpha: f64,
    /// Fixed exclusion penalty overriding the built-in rate.
    pub delta: Option<f64>,
}

impl Default for RhoConfig {
    fn default() -> RhoConfig {
        let d = RhoOptions::default();
        RhoConfig {
            permutations: d.permutations,
            alpha: d.alpha,
            delta: d.delta_override,
        }
    }
}

/// Variance-estimation settings (`[variance]` table).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceConfig {
    /// Neighbors for the local outcome-variance estimate.
    pub l_sigma: usize,
    /// Neighbors for the coefficient-sensitivity covariances.
    pub l_cov: usize,
}

impl Default for VarianceConfig {
    fn default() -> VarianceConfig {
        let d = RunOptions::default();
        VarianceConfig {
            l_sigma: d.l_sigma,
            l_cov: d.l_cov,
        }
    }
}

/// Parses a TOML run configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    if cfg.models.is_empty() {
        return Err(Error::Config(
            "config must define at least one [[model]]".into(),
        ));
    }
    Ok(cfg)
}

/// Maps named covariate lists to column-index model specs against the
/// loaded dataset's covariate names.
pub fn resolve_models(ds: &Dataset, models: &[ModelConfig]) -> Result<Vec<CandidateModel>> {
    models
        .iter()
        .map(|m| {
            let cols =
                m.covariates
                    .iter()
                    .map(|name| {
                        ds.names.iter().position(|n| n == name).ok_or_else(|| {
                            Error::MissingColumn {
                                column: name.clone(),
                            }
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?;
            Ok(CandidateModel::new(&m.name, GpsModelSpec::new(cols)))
        })
        .collect()
}

/// Uses the explicit seed when given; otherwise draws one from entropy and
/// echoes it to stderr so the run can be reproduced.
fn resolve_seed(explicit: Option<u64>) -> u64 {
    match explicit {
        Some(s) => s,
        None => {
            let s: u64 = rand::rng().random();
            eprintln!("seed: {s} (drawn from entropy; pass --seed {s} to reproduce)");
            s
        }
    }
}

/// Wraps a serializable body with the report schema version.
#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema: u32,
    #[serde(flatten)]
    body: &'a T,
}

fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let doc = Versioned {
        schema: REPORT_SCHEMA,
        body,
    };
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::InvalidInput(format!("serializing report: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// select

fn cmd_select(args: &SelectArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)?;
    let cfg = parse_config(&text)?;

    let input = args
        .input
        .clone()
        .or(cfg.input)
        .ok_or_else(|| Error::Config("no input file (config `input` or --input)".into()))?;
    let output = args
        .output
        .clone()
        .or(cfg.output)
        .unwrap_or_else(|| PathBuf::from("gpsmatch-out"));
    let measure_name = args
        .measure
        .clone()
        .or(cfg.measure)
        .unwrap_or_else(|| "oabm_ols".to_string());
    let measure = MeasureId::from_str(&measure_name)?;
    let seed = resolve_seed(args.seed.or(cfg.seed));

    let schema = CsvSchema {
        outcome: cfg.outcome.clone(),
        treatment: cfg.treatment.clone(),
        exclude: cfg.exclude.clone(),
        categorical: cfg.categorical.clone(),
    };
    let ds = dataset::load_csv(&input, &schema)?;
    let candidates = resolve_models(&ds, &cfg.models)?;
    let opts = RunOptions {
        rho: RhoOptions {
            permutations: cfg.rho.permutations,
            alpha: cfg.rho.alpha,
            delta_override: cfg.rho.delta,
        },
        l_sigma: cfg.variance.l_sigma,
        l_cov: cfg.variance.l_cov,
        seed,
    };

    let result = pipeline::run(&ds, &candidates, measure, &opts)?;
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    write_select_artifacts(&result, &output)?;
    print_select_summary(&result);
    eprintln!("artifacts written to {}", output.display());
    Ok(())
}

fn write_select_artifacts(result: &SelectionResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), result)?;

    let mut w = csv::Writer::from_path(dir.join("balance.csv"))?;
    w.write_record(["arm", "rank", "model", "value", "n_covariates", "selected"])?;
    for sel in &result.arms {
        for row in &sel.ranking {
            w.write_record([
                sel.arm.to_string(),
                row.rank.to_string(),
                row.model.clone(),
                row.value.to_string(),
                row.n_covariates.to_string(),
                (row.index == sel.selected_index).to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("ate.csv"))?;
    w.write_record(["from", "to", "estimate", "se", "ci_lower", "ci_upper"])?;
    for p in &result.report.pairs {
        w.write_record([
            p.from.to_string(),
            p.to.to_string(),
            p.tau.to_string(),
            p.se.to_string(),
            p.ci_lower.to_string(),
            p.ci_upper.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn print_select_summary(result: &SelectionResult) {
    println!("measure: {}", result.measure);
    println!("selected models:");
    for sel in &result.arms {
        println!("  arm {}: {}", sel.arm, sel.selected);
    }
    println!("pairwise effects:");
    println!(
        "  {:>4} {:>4} {:>12} {:>10} {:>22}",
        "from", "to", "estimate", "se", "95% CI"
    );
    for p in &result.report.pairs {
        println!(
            "  {:>4} {:>4} {:>12.4} {:>10.4} [{:>9.4}, {:>9.4}]",
            p.from, p.to, p.tau, p.se, p.ci_lower, p.ci_upper
        );
    }
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let measures = args
        .measures
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| MeasureId::from_str(s))
        .collect::<Result<Vec<MeasureId>>>()?;
    let mut sc = Scenario::new(args.u, args.v, OutcomeForm::from_str(&args.outcome)?);
    sc.n_per_arm = args.n_per_arm;
    sc.replicates = args.reps;
    sc.base_seed = resolve_seed(args.seed);
    sc.measures = measures;

    let res = simlab::run_scenario(&sc)?;
    simlab::write_artifacts(&res, &args.out)?;
    print_simulate_summary(&res);
    eprintln!("artifacts written to {}", args.out.display());
    Ok(())
}

fn print_simulate_summary(res: &SimResult) {
    println!(
        "scenario: u={} v={} outcome={} n_per_arm={} replicates={} (failures: {})",
        res.scenario.u,
        res.scenario.v,
        res.scenario.outcome,
        res.scenario.n_per_arm,
        res.replicates_done,
        res.failures
    );
    println!(
        "{:<10} {:>4} {:>4} {:>9} {:>9} {:>9} {:>9}",
        "source", "from", "to", "bias", "variance", "mse", "coverage"
    );
    for s in &res.sources {
        for p in &s.pairs {
            println!(
                "{:<10} {:>4} {:>4} {:>9.4} {:>9.4} {:>9.4} {:>9.3}",
                s.source, p.from, p.to, p.bias, p.variance, p.mse, p.coverage
            );
        }
    }
    for s in &res.sources {
        if let Some(stats) = &s.selection {
            println!("selection proportions ({}):", s.source);
            for st in stats {
                println!("  {:<8} {:>7.3}", st.model, st.proportion);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// ballcor

/// Reads the named numeric columns from a headed CSV file.
fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let idx = names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn {
                    column: name.to_string(),
                })
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (k, &i) in idx.iter().enumerate() {
            let raw = record.get(i).unwrap_or("");
            let value: f64 = raw.trim().parse().map_err(|_| Error::NonNumeric {
                row,
                column: names[k].to_string(),
                value: raw.to_string(),
            })?;
            cols[k].push(value);
        }
    }
    Ok(cols)
}

fn cmd_ballcor(args: &BallcorArgs) -> Result<()> {
    let cols = read_columns(&args.input, &[&args.x, &args.y])?;
    let (x, y) = (&cols[0], &cols[1]);
    let r = ball::ball_cor(x, y)?;
    let seed = resolve_seed(args.seed);
    let p = ball::ball_test(x, y, args.permutations, seed)?;
    println!("n = {}", x.len());
    println!("ball_cor({}, {}) = {}", args.x, args.y, r);
    println!("permutation p = {} ({} permutations)", p, args.permutations);
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

#[derive(Serialize)]
struct FitReport {
    columns: Vec<String>,
    levels: usize,
    /// Rows are levels 2..=t; columns are (intercept, covariates...), on
    /// the standardized covariate scale.
    beta: Vec<Vec<f64>>,
    se: Vec<Vec<f64>>,
    loglik: f64,
    iterations: usize,
    converged: bool,
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let schema = CsvSchema {
        outcome: args.outcome.clone(),
        treatment: args.treatment.clone(),
        exclude: args
            .exclude
            .iter()
            .filter(|s| !s.is_empty())
            .cloned()
            .collect(),
        categorical: vec![],
    };
    let raw = dataset::load_csv(&args.input, &schema)?;
    let covariates: Vec<&String> = args.covariates.iter().filter(|s| !s.is_empty()).collect();
    let cols = covariates
        .iter()
        .map(|name| {
            raw.names
                .iter()
                .position(|n| &n == name)
                .ok_or_else(|| Error::MissingColumn {
                    column: (*name).clone(),
                })
        })
        .collect::<Result<Vec<usize>>>()?;
    let spec = GpsModelSpec::new(cols);
    let ds = if spec.columns().is_empty() {
        raw
    } else {
        dataset::standardize(&raw)?
    };
    let fit = mnlogit::fit(&ds, &spec)?;

    let b = spec.width();
    let mut names = vec!["intercept".to_string()];
    names.extend(spec.columns().iter().map(|&j| ds.names[j].clone()));
    let mut beta = Vec::with_capacity(ds.t - 1);
    let mut se = Vec::with_capacity(ds.t - 1);
    for l in 0..ds.t - 1 {
        beta.push((0..b).map(|c| fit.beta[(l, c)]).collect::<Vec<f64>>());
        se.push(
            (0..b)
                .map(|c| fit.vcov[(l * b + c, l * b + c)].sqrt())
                .collect::<Vec<f64>>(),
        );
    }
    let report = FitReport {
        columns: names.clone(),
        levels: ds.t,
        beta,
        se,
        loglik: fit.loglik,
        iterations: fit.iterations,
        converged: fit.converged,
    };

    println!(
        "fitted {} units, {} levels, log-likelihood {:.6} ({} iterations)",
        ds.n, ds.t, fit.loglik, fit.iterations
    );
    if !spec.columns().is_empty() {
        println!("coefficients are on the standardized covariate scale");
    }
    println!(
        "{:<12} {:>6} {:>12} {:>12}",
        "column", "level", "estimate", "se"
    );
    for l in 0..ds.t - 1 {
        for (c, name) in names.iter().enumerate() {
            println!(
                "{:<12} {:>6} {:>12.5} {:>12.5}",
                name,
                l + 2,
                report.beta[l][c],
                report.se[l][c]
            );
        }
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("fit.json"), &report)?;
        eprintln!("report written to {}", dir.join("fit.json").display());
    }
    Ok(())
}
