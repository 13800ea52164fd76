//! Synthetic-data laboratory: a three-arm design with known effects, the
//! six benchmark GPS models evaluated against it, and a replication driver
//! that aggregates bias, MSE, selection proportions, and CI coverage.
//!
//! The design draws nine independent standard-normal covariates per unit.
//! Columns 1–2 drive both treatment and outcome (confounders), columns 3–5
//! drive treatment only (instruments), columns 6–8 drive the outcome only
//! (precision covariates), and column 9 drives nothing. Treatment is
//! assigned by a multinomial logit whose instrument strength is `u`;
//! outcomes are linear or quadratic in the covariates with precision
//! strength `v` and a shared N(0,1) disturbance across the three potential
//! outcomes. The true pairwise effects are −1.5, 3, and 4.5 regardless of
//! `u`, `v`, and the outcome form.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, CovariateRole, Dataset};
use crate::error::{Error, Result};
use crate::estimate::{self, AteReport};
use crate::mnlogit::{self, FittedGps, GpsModelSpec};
use crate::pipeline::{self, CandidateModel, MeasureId, RhoOptions, RunOptions};
use crate::seeding;

/// Number of treatment levels in the synthetic design.
pub const T: usize = 3;
/// Number of covariates in the synthetic design.
pub const D: usize = 9;

/// The true pairwise effects `(from, to, value)`, identical across every
/// `(u, v, outcome form)` combination: the outcome-coefficient contrasts
/// load only on the intercept and on covariates independent of treatment.
pub const TRUE_ATES: [(usize, usize, f64); 3] = [(1, 2, -1.5), (1, 3, 3.0), (2, 3, 4.5)];

/// The true effect for a pair of levels.
pub fn true_ate(from: usize, to: usize) -> Option<f64> {
    TRUE_ATES
        .iter()
        .find(|&&(f, t, _)| f == from && t == to)
        .map(|&(_, _, v)| v)
}

/// How the outcome depends on the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeForm {
    /// Y(w) = (1, X)ᵀθ_w + η.
    Linear,
    /// Y(w) = (1, (X²−1)/2)ᵀθ_w + η, leaving all coefficient means intact.
    Nonlinear,
}

impl OutcomeForm {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeForm::Linear => "linear",
            OutcomeForm::Nonlinear => "nonlinear",
        }
    }
}

impl fmt::Display for OutcomeForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutcomeForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<OutcomeForm> {
        match s {
            "linear" => Ok(OutcomeForm::Linear),
            "nonlinear" => Ok(OutcomeForm::Nonlinear),
            other => Err(Error::Config(format!(
                "unknown outcome form {other:?}; expected linear or nonlinear"
            ))),
        }
    }
}

/// Role labels for the nine design columns.
pub fn covariate_roles() -> [CovariateRole; D] {
    [
        CovariateRole::Confounder,
        CovariateRole::Confounder,
        CovariateRole::Instrument,
        CovariateRole::Instrument,
        CovariateRole::Instrument,
        CovariateRole::Precision,
        CovariateRole::Precision,
        CovariateRole::Precision,
        CovariateRole::Noise,
    ]
}

/// Column names `x1..x9` matching the 1-based design indices.
pub fn covariate_names() -> Vec<String> {
    (1..=D).map(|j| format!("x{j}")).collect()
}

/// Treatment-assignment coefficients for levels 2 and 3 (level 1 is the
/// softmax reference with all-zero coefficients). Each vector is
/// (intercept, x1..x9); `u` scales the instrument entries.
pub fn assignment_coefficients(u: f64) -> [DVector<f64>; 2] {
    let pattern = [0.0, 1.5, 1.5, u, u, u, 0.0, 0.0, 0.0, 0.0];
    let beta2 = DVector::from_iterator(D + 1, pattern.iter().map(|p| 0.7 * p));
    let beta3 = DVector::from_iterator(D + 1, pattern.iter().map(|p| 0.4 * p));
    [beta2, beta3]
}

/// Outcome coefficients θ₁, θ₂, θ₃, each (intercept, x1..x9); `v` scales
/// the precision entries. The intercept contrasts −1.5/3/4.5 are the true
/// effects.
pub fn outcome_coefficients(v: f64) -> [DVector<f64>; 3] {
    let base = |int: f64, prec: f64| {
        let mut th = DVector::zeros(D + 1);
        th[0] = int;
        th[1] = 1.5;
        th[2] = 1.5;
        th[6] = prec;
        th[7] = prec;
        th[8] = prec;
        th
    };
    [base(-1.5, v), base(-3.0, v), base(1.5, -v)]
}

/// The six benchmark GPS models, in reporting order: confounders only,
/// instruments+confounders, confounders+precision, everything, and the two
/// odd/even index sets (each missing one confounder).
pub fn benchmarks() -> Vec<CandidateModel> {
    vec![
        CandidateModel::new("pC", GpsModelSpec::new([0, 1])),
        CandidateModel::new("pIC", GpsModelSpec::new([0, 1, 2, 3, 4])),
        CandidateModel::new("pCP", GpsModelSpec::new([0, 1, 5, 6, 7])),
        CandidateModel::new("pAll", GpsModelSpec::new(0..9)),
        CandidateModel::new("p1357", GpsModelSpec::new([0, 2, 4, 6])),
        CandidateModel::new("p2468", GpsModelSpec::new([1, 3, 5, 7])),
    ]
}

/// One simulation scenario: design knobs, replication count, seed, and
/// which selection measures to run alongside the fixed benchmark models.
#[derive(Debug, Clone, Serialize)]
pub struct Scenario {
    /// Instrument strength; the design grid uses 1 or 2.
    pub u: u8,
    /// Precision strength; the design grid uses 1 or 2.
    pub v: u8,
    pub outcome: OutcomeForm,
    /// Units retained per arm (the dataset holds 3× this).
    pub n_per_arm: usize,
    pub replicates: usize,
    pub base_seed: u64,
    /// Selection measures evaluated through the full pipeline. The
    /// ball-correlation measure costs orders of magnitude more than the
    /// rest (permutation tests per covariate per arm); it is opt-in.
    pub measures: Vec<MeasureId>,
    /// Candidate list for the pipeline and the fixed-model comparisons.
    pub benchmarks: Vec<CandidateModel>,
    pub rho: RhoOptions,
    pub l_sigma: usize,
    pub l_cov: usize,
}

impl Scenario {
    /// A scenario with the standard defaults: 500 units per arm, 200
    /// replicates, the six benchmark models, and the regression-weighted
    /// measure plus the unweighted mean-gap measure.
    pub fn new(u: u8, v: u8, outcome: OutcomeForm) -> Scenario {
        Scenario {
            u,
            v,
            outcome,
            n_per_arm: 500,
            replicates: 200,
            base_seed: 0,
            measures: vec![MeasureId::OabmOls, MeasureId::Amd],
            benchmarks: benchmarks(),
            rho: RhoOptions::default(),
            l_sigma: 1,
            l_cov: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.u) || !(1..=2).contains(&self.v) {
            return Err(Error::Config(format!(
                "scenario strengths must be 1 or 2, got u={}, v={}",
                self.u, self.v
            )));
        }
        if self.n_per_arm < 50 {
            return Err(Error::Config(format!(
                "n_per_arm must be at least 50, got {}",
                self.n_per_arm
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be positive".into()));
        }
        if self.benchmarks.is_empty() {
            return Err(Error::Config("benchmark model list is empty".into()));
        }
        let mut names: Vec<&str> = self.benchmarks.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.benchmarks.len() {
            return Err(Error::Config("benchmark model names must be unique".into()));
        }
        let mut ms = self.measures.clone();
        ms.sort_by_key(|m| m.code());
        ms.dedup();
        if ms.len() != self.measures.len() {
            return Err(Error::Config("measures must be unique".into()));
        }
        Ok(())
    }
}

/// A generated dataset together with the potential outcomes of the
/// retained units (column w−1 holds Y(w)).
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub ds: Dataset,
    pub potential: DMatrix<f64>,
}

/// One unit: covariates, assigned level, and all three potential outcomes
/// sharing a single disturbance.
fn draw_unit(
    rng: &mut ChaCha8Rng,
    beta: &[DVector<f64>; 2],
    theta: &[DVector<f64>; 3],
    form: OutcomeForm,
) -> ([f64; D], usize, [f64; T]) {
    let mut x = [0.0f64; D];
    for v in &mut x {
        *v = rng.sample(StandardNormal);
    }
    let mut eta = [0.0f64; 2];
    for (k, b) in beta.iter().enumerate() {
        let mut s = b[0];
        for (j, &xj) in x.iter().enumerate() {
            s += b[j + 1] * xj;
        }
        eta[k] = s;
    }
    // Softmax over (0, eta2, eta3), numerically shifted by the max score.
    let max = eta[0].max(eta[1]).max(0.0);
    let e = [(-max).exp(), (eta[0] - max).exp(), (eta[1] - max).exp()];
    let denom = e[0] + e[1] + e[2];
    let cut: f64 = rng.random();
    let w = if cut < e[0] / denom {
        1
    } else if cut < (e[0] + e[1]) / denom {
        2
    } else {
        3
    };
    let noise: f64 = rng.sample(StandardNormal);
    let mut po = [0.0f64; T];
    for (lvl, th) in theta.iter().enumerate() {
        let mut yv = th[0];
        for (j, &xj) in x.iter().enumerate() {
            let basis = match form {
                OutcomeForm::Linear => xj,
                OutcomeForm::Nonlinear => (xj * xj - 1.0) / 2.0,
            };
            yv += th[j + 1] * basis;
        }
        po[lvl] = yv + noise;
    }
    (x, w, po)
}

/// Assembles a dataset from raw unit draws.
fn assemble(
    xs: &[[f64; D]],
    ws: &[usize],
    pos: &[[f64; T]],
    keep: &[usize],
) -> Result<GeneratedData> {
    let n = keep.len();
    let mut x = DMatrix::zeros(n, D);
    let mut y = DVector::zeros(n);
    let mut w = Vec::with_capacity(n);
    let mut potential = DMatrix::zeros(n, T);
    for (row, &i) in keep.iter().enumerate() {
        for j in 0..D {
            x[(row, j)] = xs[i][j];
        }
        w.push(ws[i]);
        y[row] = pos[i][ws[i] - 1];
        for lvl in 0..T {
            potential[(row, lvl)] = pos[i][lvl];
        }
    }
    let ds = Dataset::new(y, w, x, covariate_names(), "y", "w")?;
    Ok(GeneratedData { ds, potential })
}

/// Draws units i.i.d. until every arm holds at least `quota`, then
/// uniformly subsamples each arm to exactly `quota`, preserving draw order.
fn draw_with_quota(
    rng: &mut ChaCha8Rng,
    beta: &[DVector<f64>; 2],
    theta: &[DVector<f64>; 3],
    form: OutcomeForm,
    quota: usize,
) -> Result<GeneratedData> {
    let budget = 100 * T * quota;
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    let mut pos = Vec::new();
    let mut counts = [0usize; T];
    while counts.iter().any(|&c| c < quota) {
        if xs.len() >= budget {
            let arm = (0..T).min_by_key(|&a| counts[a]).unwrap();
            return Err(Error::DrawBudgetExhausted {
                arm: arm + 1,
                needed: quota,
                got: counts[arm],
            });
        }
        let (x, w, po) = draw_unit(rng, beta, theta, form);
        counts[w - 1] += 1;
        xs.push(x);
        ws.push(w);
        pos.push(po);
    }
    let mut keep = Vec::with_capacity(T * quota);
    for arm in 1..=T {
        let members: Vec<usize> = (0..ws.len()).filter(|&i| ws[i] == arm).collect();
        if members.len() == quota {
            keep.extend(members);
        } else {
            let chosen = rand::seq::index::sample(rng, members.len(), quota);
            let mut sel: Vec<usize> = chosen.iter().map(|k| members[k]).collect();
            sel.sort_unstable();
            keep.extend(sel);
        }
    }
    keep.sort_unstable();
    assemble(&xs, &ws, &pos, &keep)
}

/// Generates replicate `rep` of a scenario with its potential outcomes.
/// The seed is derived from `(base_seed, rep)`, so replicates are
/// reproducible in any execution order.
pub fn generate_full(sc: &Scenario, rep: usize) -> Result<GeneratedData> {
    sc.validate()?;
    let seed = seeding::derive_seed(sc.base_seed, rep as u64);
    let mut rng = seeding::rng_for(seed, 0);
    let beta = assignment_coefficients(sc.u as f64);
    let theta = outcome_coefficients(sc.v as f64);
    draw_with_quota(&mut rng, &beta, &theta, sc.outcome, sc.n_per_arm)
}

/// Generates replicate `rep` of a scenario (dataset only).
pub fn generate(sc: &Scenario, rep: usize) -> Result<Dataset> {
    Ok(generate_full(sc, rep)?.ds)
}

/// Draws exactly `n` units i.i.d. with no per-arm quota or subsampling —
/// arm sizes are random. Suited to large-sample checks of the assignment
/// model itself, where quota subsampling would distort the intercepts.
/// Fails if some arm happens to receive no units (use a generous `n`).
pub fn generate_iid(
    u: f64,
    v: f64,
    form: OutcomeForm,
    n: usize,
    seed: u64,
) -> Result<GeneratedData> {
    let mut rng = seeding::rng_for(seed, 0);
    let beta = assignment_coefficients(u);
    let theta = outcome_coefficients(v);
    let mut xs = Vec::with_capacity(n);
    let mut ws = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, w, po) = draw_unit(&mut rng, &beta, &theta, form);
        xs.push(x);
        ws.push(w);
        pos.push(po);
    }
    let keep: Vec<usize> = (0..n).collect();
    assemble(&xs, &ws, &pos, &keep)
}

/// Replicate-aggregated accuracy of one estimate source at one pair.
#[derive(Debug, Clone, Serialize)]
pub struct PairStats {
    pub from: usize,
    pub to: usize,
    pub truth: f64,
    /// Mean of the replicate estimates.
    pub mean: f64,
    /// Monte Carlo standard error of `mean`.
    pub mean_se: f64,
    pub bias: f64,
    /// Population variance of the replicate estimates (so that
    /// `mse = bias² + variance` exactly).
    pub variance: f64,
    pub mse: f64,
    /// Share of replicates whose CI contained the truth.
    pub coverage: f64,
}

/// Where a set of estimates came from: a fixed benchmark model applied to
/// every arm, or per-arm selection by a balance measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Benchmark,
    Measure,
}

/// How often one benchmark model was selected (over replicates × arms).
#[derive(Debug, Clone, Serialize)]
pub struct SelectionStat {
    pub model: String,
    pub count: usize,
    pub proportion: f64,
}

/// Aggregated results for one estimate source.
#[derive(Debug, Clone, Serialize)]
pub struct SourceStats {
    pub source: String,
    pub kind: SourceKind,
    pub pairs: Vec<PairStats>,
    /// Present for measure sources: selection proportions over the
    /// benchmark list, summing to 1.
    pub selection: Option<Vec<SelectionStat>>,
}

impl SourceStats {
    pub fn pair(&self, from: usize, to: usize) -> Option<&PairStats> {
        self.pairs.iter().find(|p| p.from == from && p.to == to)
    }

    /// Selection proportion of one model (0 if absent).
    pub fn selected_proportion(&self, model: &str) -> f64 {
        self.selection
            .as_ref()
            .and_then(|s| s.iter().find(|r| r.model == model))
            .map_or(0.0, |r| r.proportion)
    }
}

/// One replicate-level estimate, the raw material behind the aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub source: String,
    pub from: usize,
    pub to: usize,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// One replicate-level selection decision.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionRecord {
    pub rep: usize,
    pub measure: MeasureId,
    pub arm: usize,
    pub model: String,
}

/// Everything a scenario run produces.
#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub scenario: Scenario,
    pub replicates_done: usize,
    pub failures: usize,
    /// Up to five failure messages, for diagnostics.
    pub failure_examples: Vec<String>,
    pub sources: Vec<SourceStats>,
    pub estimates: Vec<ReplicateRecord>,
    pub selections: Vec<SelectionRecord>,
}

impl SimResult {
    pub fn source(&self, name: &str) -> Option<&SourceStats> {
        self.sources.iter().find(|s| s.source == name)
    }
}

#[derive(Debug, Clone, Copy)]
struct PairSnapshot {
    from: usize,
    to: usize,
    tau: f64,
    se: f64,
    lo: f64,
    hi: f64,
}

struct RepOutput {
    rep: usize,
    /// One entry per source, in the fixed order benchmarks-then-measures.
    pair_rows: Vec<(String, Vec<PairSnapshot>)>,
    /// Per measure: the model selected for each arm 1..=T.
    selections: Vec<(MeasureId, Vec<String>)>,
}

fn snapshot(report: &AteReport) -> Vec<PairSnapshot> {
    report
        .pairs
        .iter()
        .map(|p| PairSnapshot {
            from: p.from,
            to: p.to,
            tau: p.tau,
            se: p.se,
            lo: p.ci_lower,
            hi: p.ci_upper,
        })
        .collect()
}

fn run_replicate(sc: &Scenario, rep: usize) -> Result<RepOutput> {
    let raw = generate(sc, rep)?;
    let ds = dataset::standardize(&raw)?;
    let rep_seed = seeding::derive_seed(sc.base_seed, rep as u64);

    let mut pair_rows = Vec::with_capacity(sc.benchmarks.len() + sc.measures.len());
    for cand in &sc.benchmarks {
        let fit = mnlogit::fit(&ds, &cand.spec)?;
        let models: Vec<(String, &FittedGps)> =
            (0..ds.t).map(|_| (cand.name.clone(), &fit)).collect();
        let report = estimate::ate_report(&ds, &models, sc.l_sigma, sc.l_cov)?;
        pair_rows.push((cand.name.clone(), snapshot(&report)));
    }

    let mut selections = Vec::with_capacity(sc.measures.len());
    for &measure in &sc.measures {
        let opts = RunOptions {
            rho: sc.rho.clone(),
            l_sigma: sc.l_sigma,
            l_cov: sc.l_cov,
            // A stream per measure, offset past the per-arm streams the
            // pipeline derives internally.
            seed: seeding::derive_seed(rep_seed, 100 + measure.code()),
        };
        let res = pipeline::run(&ds, &sc.benchmarks, measure, &opts)?;
        pair_rows.push((measure.as_str().to_string(), snapshot(&res.report)));
        selections.push((
            measure,
            res.arms.iter().map(|a| a.selected.clone()).collect(),
        ));
    }
    Ok(RepOutput {
        rep,
        pair_rows,
        selections,
    })
}

/// More than 5% failed replicates abort the scenario.
fn failure_gate(failures: usize, total: usize) -> Result<()> {
    if failures * 20 > total {
        Err(Error::TooManyFailures(failures, total))
    } else {
        Ok(())
    }
}

/// Runs every replicate of a scenario (in parallel) and aggregates.
///
/// Replicates are seeded independently from `(base_seed, rep)` and folded
/// in replicate order, so the result is bit-identical for any thread
/// count. Failed replicates are excluded and counted; more than 5% aborts.
pub fn run_scenario(sc: &Scenario) -> Result<SimResult> {
    sc.validate()?;
    let outcomes: Vec<(usize, Result<RepOutput>)> = (0..sc.replicates)
        .into_par_iter()
        .map(|rep| (rep, run_replicate(sc, rep)))
        .collect();

    let mut oks = Vec::new();
    let mut failures = 0usize;
    let mut failure_examples = Vec::new();
    for (rep, out) in outcomes {
        match out {
            Ok(o) => oks.push(o),
            Err(e) => {
                failures += 1;
                if failure_examples.len() < 5 {
                    failure_examples.push(format!("replicate {rep}: {e}"));
                }
            }
        }
    }
    failure_gate(failures, sc.replicates)?;
    let done = oks.len();
    let donef = done as f64;

    let mut source_axis: Vec<(String, SourceKind)> = sc
        .benchmarks
        .iter()
        .map(|c| (c.name.clone(), SourceKind::Benchmark))
        .collect();
    source_axis.extend(
        sc.measures
            .iter()
            .map(|m| (m.as_str().to_string(), SourceKind::Measure)),
    );

    let mut sources = Vec::with_capacity(source_axis.len());
    for (si, (name, kind)) in source_axis.iter().enumerate() {
        let n_pairs = oks.first().map_or(0, |o| o.pair_rows[si].1.len());
        let mut pairs = Vec::with_capacity(n_pairs);
        for pi in 0..n_pairs {
            let (from, to) = {
                let s = oks[0].pair_rows[si].1[pi];
                (s.from, s.to)
            };
            let truth = true_ate(from, to).ok_or_else(|| {
                Error::InvalidInput(format!("no known truth for pair ({from},{to})"))
            })?;
            let mut sum = 0.0;
            let mut covered = 0usize;
            for o in &oks {
                let s = o.pair_rows[si].1[pi];
                sum += s.tau;
                if s.lo <= truth && truth <= s.hi {
                    covered += 1;
                }
            }
            let mean = sum / donef;
            let mut var_sum = 0.0;
            let mut mse_sum = 0.0;
            for o in &oks {
                let tau = o.pair_rows[si].1[pi].tau;
                var_sum += (tau - mean) * (tau - mean);
                mse_sum += (tau - truth) * (tau - truth);
            }
            let variance = var_sum / donef;
            let mean_se = if done > 1 {
                (var_sum / (donef * (donef - 1.0))).sqrt()
            } else {
                f64::NAN
            };
            pairs.push(PairStats {
                from,
                to,
                truth,
                mean,
                mean_se,
                bias: mean - truth,
                variance,
                mse: mse_sum / donef,
                coverage: covered as f64 / donef,
            });
        }

        let selection = if *kind == SourceKind::Measure {
            let mi = si - sc.benchmarks.len();
            let mut stats: Vec<SelectionStat> = sc
                .benchmarks
                .iter()
                .map(|c| SelectionStat {
                    model: c.name.clone(),
                    count: 0,
                    proportion: 0.0,
                })
                .collect();
            let mut total = 0usize;
            for o in &oks {
                for chosen in &o.selections[mi].1 {
                    total += 1;
                    let stat = stats
                        .iter_mut()
                        .find(|s| &s.model == chosen)
                        .expect("selected model is in the benchmark list");
                    stat.count += 1;
                }
            }
            for s in &mut stats {
                s.proportion = s.count as f64 / total as f64;
            }
            Some(stats)
        } else {
            None
        };

        sources.push(SourceStats {
            source: name.clone(),
            kind: *kind,
            pairs,
            selection,
        });
    }

    let mut estimates = Vec::new();
    let mut selections = Vec::new();
    for o in &oks {
        for (source, snaps) in &o.pair_rows {
            for s in snaps {
                estimates.push(ReplicateRecord {
                    rep: o.rep,
                    source: source.clone(),
                    from: s.from,
                    to: s.to,
                    estimate: s.tau,
                    se: s.se,
                    ci_lower: s.lo,
                    ci_upper: s.hi,
                });
            }
        }
        for (measure, chosen) in &o.selections {
            for (arm0, model) in chosen.iter().enumerate() {
                selections.push(SelectionRecord {
                    rep: o.rep,
                    measure: *measure,
                    arm: arm0 + 1,
                    model: model.clone(),
                });
            }
        }
    }

    Ok(SimResult {
        scenario: sc.clone(),
        replicates_done: done,
        failures,
        failure_examples,
        sources,
        estimates,
        selections,
    })
}

/// Writes `simresult.json`, `estimates.csv`, `selection.csv`, and
/// `coverage.csv` under `dir` (created if needed). Output bytes are a pure
/// function of the result.
pub fn write_artifacts(res: &SimResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(res)
        .map_err(|e| Error::InvalidInput(format!("serializing results: {e}")))?;
    json.push('\n');
    fs::write(dir.join("simresult.json"), json)?;

    let mut w = csv::Writer::from_path(dir.join("estimates.csv"))?;
    w.write_record([
        "replicate",
        "source",
        "from",
        "to",
        "estimate",
        "se",
        "ci_lower",
        "ci_upper",
    ])?;
    for r in &res.estimates {
        w.write_record([
            r.rep.to_string(),
            r.source.clone(),
            r.from.to_string(),
            r.to.to_string(),
            r.estimate.to_string(),
            r.se.to_string(),
            r.ci_lower.to_string(),
            r.ci_upper.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("selection.csv"))?;
    w.write_record(["measure", "model", "proportion"])?;
    for s in &res.sources {
        if let Some(stats) = &s.selection {
            for st in stats {
                w.write_record([
                    s.source.clone(),
                    st.model.clone(),
                    st.proportion.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("coverage.csv"))?;
    w.write_record(["source", "from", "to", "coverage"])?;
    for s in &res.sources {
        for p in &s.pairs {
            w.write_record([
                s.source.clone(),
                p.from.to_string(),
                p.to.to_string(),
                p.coverage.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scenario() -> Scenario {
        let mut sc = Scenario::new(2, 2, OutcomeForm::Linear);
        sc.n_per_arm = 50;
        sc.replicates = 8;
        sc.base_seed = 7;
        sc.measures = vec![MeasureId::OabmOls, MeasureId::Amd];
        sc
    }

    #[test]
    fn zero_assignment_coefficients_give_uniform_arms() {
        let beta = [DVector::zeros(D + 1), DVector::zeros(D + 1)];
        let theta = outcome_coefficients(1.0);
        let mut rng = seeding::rng_for(11, 0);
        let n = 9000;
        let mut counts = [0usize; T];
        for _ in 0..n {
            let (_, w, _) = draw_unit(&mut rng, &beta, &theta, OutcomeForm::Linear);
            counts[w - 1] += 1;
        }
        // 3 binomial SDs around n/3.
        let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for (arm, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 / 3.0).abs();
            assert!(
                dev < 3.0 * sd,
                "arm {} count {} off by {:.1}",
                arm + 1,
                c,
                dev
            );
        }
    }

    #[test]
    fn noise_column_is_uncorrelated_with_outcome_but_confounder_is_not() {
        let ds = generate(&small_scenario(), 0).unwrap();
        let corr = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let mut num = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for i in 0..a.len() {
                num += (a[i] - ma) * (b[i] - mb);
                va += (a[i] - ma).powi(2);
                vb += (b[i] - mb).powi(2);
            }
            num / (va.sqrt() * vb.sqrt())
        };
        let y: Vec<f64> = ds.y.iter().copied().collect();
        let noise: Vec<f64> = ds.x.column(8).iter().copied().collect();
        let conf: Vec<f64> = ds.x.column(0).iter().copied().collect();
        // ≈ 4/√n for the null column; the confounder enters the outcome
        // with a large coefficient.
        assert!(
            corr(&noise, &y).abs() < 0.33,
            "noise corr {}",
            corr(&noise, &y)
        );
        assert!(corr(&conf, &y) > 0.2, "confounder corr {}", corr(&conf, &y));
    }

    #[test]
    fn potential_outcome_contrasts_match_the_declared_truths() {
        // The (1,2) contrast is degenerate at −1.5 (coefficients differ only
        // in intercept); the others fluctuate via precision covariates only.
        let mut sc = small_scenario();
        sc.n_per_arm = 100;
        let reps = 40;
        let mut m13 = Vec::new();
        let mut m23 = Vec::new();
        for rep in 0..reps {
            let gd = generate_full(&sc, rep).unwrap();
            let col = |k: usize| gd.potential.column(k).mean();
            assert!(
                (col(1) - col(0) + 1.5).abs() < 1e-10,
                "degenerate contrast drifted: {}",
                col(1) - col(0)
            );
            m13.push(col(2) - col(0));
            m23.push(col(2) - col(1));
        }
        for (samples, truth) in [(&m13, 3.0), (&m23, 4.5)] {
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!(
                (mean - truth).abs() < 3.0 * se.max(1e-6),
                "contrast mean {mean} vs truth {truth} (se {se})"
            );
        }
    }

    #[test]
    fn benchmark_models_cover_the_declared_column_sets() {
        let b = benchmarks();
        let names: Vec<&str> = b.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["pC", "pIC", "pCP", "pAll", "p1357", "p2468"]);
        assert_eq!(b[0].spec.columns(), &[0, 1]);
        assert_eq!(b[1].spec.columns(), &[0, 1, 2, 3, 4]);
        assert_eq!(b[2].spec.columns(), &[0, 1, 5, 6, 7]);
        assert_eq!(b[3].spec.columns(), &[0, 1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(b[4].spec.columns(), &[0, 2, 4, 6]);
        assert_eq!(b[5].spec.columns(), &[1, 3, 5, 7]);
        let roles = covariate_roles();
        assert_eq!(roles[0], CovariateRole::Confounder);
        assert_eq!(roles[4], CovariateRole::Instrument);
        assert_eq!(roles[7], CovariateRole::Precision);
        assert_eq!(roles[8], CovariateRole::Noise);
    }

    #[test]
    fn generation_is_deterministic_per_replicate() {
        let sc = small_scenario();
        let a = generate_full(&sc, 3).unwrap();
        let b = generate_full(&sc, 3).unwrap();
        assert_eq!(a.ds.x, b.ds.x);
        assert_eq!(a.ds.y, b.ds.y);
        assert_eq!(a.ds.w, b.ds.w);
        assert_eq!(a.potential, b.potential);
        let c = generate_full(&sc, 4).unwrap();
        assert_ne!(a.ds.y, c.ds.y);
    }

    #[test]
    fn every_arm_is_subsampled_to_the_quota() {
        let sc = small_scenario();
        let ds = generate(&sc, 1).unwrap();
        assert_eq!(ds.n, T * sc.n_per_arm);
        for arm in 1..=T {
            let c = ds.w.iter().filter(|&&w| w == arm).count();
            assert_eq!(c, sc.n_per_arm, "arm {arm}");
        }
    }

    #[test]
    fn iid_pool_columns_pass_the_mean_sanity_bound() {
        let n = 9000;
        let gd = generate_iid(2.0, 2.0, OutcomeForm::Linear, n, 5).unwrap();
        let bound = 4.0 / (n as f64).sqrt();
        for j in 0..D {
            let m = gd.ds.x.column(j).mean();
            assert!(m.abs() < bound, "column {} mean {}", j + 1, m);
        }
    }

    #[test]
    fn scenario_validation_rejects_bad_settings() {
        let mut sc = small_scenario();
        sc.u = 3;
        assert!(sc.validate().is_err());
        let mut sc = small_scenario();
        sc.n_per_arm = 49;
        assert!(sc.validate().is_err());
        let mut sc = small_scenario();
        sc.replicates = 0;
        assert!(sc.validate().is_err());
        let mut sc = small_scenario();
        sc.benchmarks[1] = sc.benchmarks[0].clone();
        assert!(sc.validate().is_err());
        let mut sc = small_scenario();
        sc.measures = vec![MeasureId::Amd, MeasureId::Amd];
        assert!(sc.validate().is_err());
        assert!(small_scenario().validate().is_ok());
    }

    #[test]
    fn failure_gate_trips_above_five_percent() {
        assert!(failure_gate(0, 100).is_ok());
        assert!(failure_gate(5, 100).is_ok());
        assert!(matches!(
            failure_gate(6, 100),
            Err(Error::TooManyFailures(6, 100))
        ));
        assert!(failure_gate(1, 20).is_ok());
        assert!(failure_gate(2, 20).is_err());
    }

    #[test]
    fn scenario_run_aggregates_consistently() {
        let sc = small_scenario();
        let res = run_scenario(&sc).unwrap();
        assert_eq!(res.replicates_done, sc.replicates);
        assert_eq!(res.failures, 0);
        assert_eq!(res.sources.len(), sc.benchmarks.len() + sc.measures.len());
        assert_eq!(
            res.estimates.len(),
            sc.replicates * res.sources.len() * TRUE_ATES.len()
        );
        assert_eq!(res.selections.len(), sc.replicates * sc.measures.len() * T);
        for s in &res.sources {
            assert_eq!(s.pairs.len(), 3);
            for p in &s.pairs {
                assert!((0.0..=1.0).contains(&p.coverage));
                assert!(p.variance >= 0.0 && p.mse >= 0.0);
                // Population-variance identity.
                assert!((p.mse - (p.bias * p.bias + p.variance)).abs() < 1e-10);
            }
            match s.kind {
                SourceKind::Benchmark => assert!(s.selection.is_none()),
                SourceKind::Measure => {
                    let stats = s.selection.as_ref().unwrap();
                    let total: f64 = stats.iter().map(|r| r.proportion).sum();
                    assert!((total - 1.0).abs() < 1e-12, "proportions sum {total}");
                }
            }
        }
        // Estimates from fitted models should be in a sane range around the
        // truths at this tiny scale.
        let pall = res.source("pAll").unwrap().pair(1, 3).unwrap();
        assert!((pall.mean - 3.0).abs() < 1.5, "pAll mean {}", pall.mean);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut sc = small_scenario();
        sc.replicates = 4;
        let run_with = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| run_scenario(&sc).unwrap())
        };
        let a = serde_json::to_string(&run_with(1)).unwrap();
        let b = serde_json::to_string(&run_with(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn artifacts_round_trip_to_disk() {
        let mut sc = small_scenario();
        sc.replicates = 2;
        sc.measures = vec![MeasureId::Amd];
        let res = run_scenario(&sc).unwrap();
        let dir = std::env::temp_dir().join(format!("simlab-test-{}", std::process::id()));
        write_artifacts(&res, &dir).unwrap();
        for f in [
            "simresult.json",
            "estimates.csv",
            "selection.csv",
            "coverage.csv",
        ] {
            let path = dir.join(f);
            assert!(path.exists(), "{f} missing");
            assert!(fs::metadata(&path).unwrap().len() > 0, "{f} empty");
        }
        let sel = fs::read_to_string(dir.join("selection.csv")).unwrap();
        assert!(sel.starts_with("measure,model,proportion"));
        assert_eq!(sel.lines().count(), 1 + sc.benchmarks.len());
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("simresult.json")).unwrap()).unwrap();
        assert_eq!(json["replicates_done"], 2);
        fs::remove_dir_all(&dir).unwrap();
    }
}
