//! End-to-end model selection: standardize, fit every candidate GPS model,
//! score each one per arm with a balance measure, pick the per-arm
//! minimizer, and estimate all pairwise effects with the selections.
//!
//! The run proceeds in four steps:
//!
//! 0. covariates are standardized (idempotent if already done);
//! 1. every candidate model is fitted by maximum likelihood — candidates
//!    that fail to fit are dropped with a recorded warning, and only a
//!    total wipeout aborts the run;
//! 2. for each arm, every surviving candidate's scores drive a matching
//!    pass, the chosen balance measure is evaluated, and candidates are
//!    ranked ascending (ties: fewer covariates, then earlier list position);
//! 3. each arm's winner supplies the scores for that arm in the final
//!    pairwise-effect estimates.
//!
//! Outcome-relevance profiles are computed once per arm and shared across
//! candidates: a candidate influences its weighted balance value only
//! through which covariates it includes.

use rayon::prelude::*;
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

use crate::balance;
use crate::correlation::{self, RhoMetric, RhoProfile};
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::estimate::{self, AteReport};
use crate::matching::{self, MatchSet};
use crate::mnlogit::{self, FittedGps, GpsModelSpec};
use crate::seeding;

/// A named candidate GPS model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidateModel {
    pub name: String,
    pub spec: GpsModelSpec,
}

impl CandidateModel {
    pub fn new(name: &str, spec: GpsModelSpec) -> CandidateModel {
        CandidateModel {
            name: name.to_string(),
            spec,
        }
    }
}

/// The balance measure driving selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureId {
    /// Sum of absolute imputed-vs-sample mean gaps.
    Amd,
    /// Summed two-sample Kolmogorov–Smirnov distances.
    Ks,
    /// Mahalanobis form of the mean gaps.
    #[serde(rename = "mdist")]
    MDist,
    /// Gaps weighted by pooled outcome-regression coefficients.
    Wbm,
    /// Outcome-adjusted measure with regression relevance.
    OabmOls,
    /// Outcome-adjusted measure with ball-correlation relevance.
    OabmBcor,
}

impl MeasureId {
    /// All six measures in reporting order.
    pub fn all() -> [MeasureId; 6] {
        [
            MeasureId::Amd,
            MeasureId::Ks,
            MeasureId::MDist,
            MeasureId::Wbm,
            MeasureId::OabmOls,
            MeasureId::OabmBcor,
        ]
    }

    /// Which relevance metric the measure needs, if any.
    pub fn metric(self) -> Option<RhoMetric> {
        match self {
            MeasureId::OabmOls => Some(RhoMetric::Ols),
            MeasureId::OabmBcor => Some(RhoMetric::Ball),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MeasureId::Amd => "amd",
            MeasureId::Ks => "ks",
            MeasureId::MDist => "mdist",
            MeasureId::Wbm => "wbm",
            MeasureId::OabmOls => "oabm_ols",
            MeasureId::OabmBcor => "oabm_bcor",
        }
    }

    /// Stable small integer used to derive per-measure seed streams.
    pub fn code(self) -> u64 {
        match self {
            MeasureId::Amd => 1,
            MeasureId::Ks => 2,
            MeasureId::MDist => 3,
            MeasureId::Wbm => 4,
            MeasureId::OabmOls => 5,
            MeasureId::OabmBcor => 6,
        }
    }
}

impl fmt::Display for MeasureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MeasureId {
    type Err = Error;
    fn from_str(s: &str) -> Result<MeasureId> {
        match s {
            "amd" => Ok(MeasureId::Amd),
            "ks" => Ok(MeasureId::Ks),
            "mdist" => Ok(MeasureId::MDist),
            "wbm" => Ok(MeasureId::Wbm),
            "oabm_ols" => Ok(MeasureId::OabmOls),
            "oabm_bcor" => Ok(MeasureId::OabmBcor),
            other => Err(Error::Config(format!(
                "unknown balance measure {other:?}; expected one of \
                 amd, ks, mdist, wbm, oabm_ols, oabm_bcor"
            ))),
        }
    }
}

/// Settings for the outcome-relevance profiles.
#[derive(Debug, Clone, Serialize)]
pub struct RhoOptions {
    /// Permutation replicas for the ball independence test.
    pub permutations: usize,
    /// Level of the ball independence test.
    pub alpha: f64,
    /// Fixed exclusion penalty replacing the metric's own δ rule.
    pub delta_override: Option<f64>,
}

impl Default for RhoOptions {
    fn default() -> RhoOptions {
        RhoOptions {
            permutations: 199,
            alpha: 0.05,
            delta_override: None,
        }
    }
}

/// Settings for one selection run.
#[derive(Debug, Clone, Serialize)]
pub struct RunOptions {
    pub rho: RhoOptions,
    /// Neighbors for the local outcome-variance estimate.
    pub l_sigma: usize,
    /// Neighbors for the coefficient-sensitivity covariances.
    pub l_cov: usize,
    /// Root of all randomness in the run.
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> RunOptions {
        RunOptions {
            rho: RhoOptions::default(),
            l_sigma: 1,
            l_cov: 2,
            seed: 0,
        }
    }
}

/// One candidate's position in an arm's ranking.
#[derive(Debug, Clone, Serialize)]
pub struct RankedModel {
    /// 1-based position after sorting.
    pub rank: usize,
    pub model: String,
    /// The candidate's index in the submitted list.
    pub index: usize,
    pub value: f64,
    pub n_covariates: usize,
}

/// What one arm selected and why.
#[derive(Debug, Clone, Serialize)]
pub struct ArmSelection {
    pub arm: usize,
    /// Ascending by (value, covariate count, list position).
    pub ranking: Vec<RankedModel>,
    pub selected: String,
    pub selected_index: usize,
    /// The relevance profile used, for weighted measures.
    pub rho: Option<RhoProfile>,
}

/// Full audit trail of one selection run.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionResult {
    pub measure: MeasureId,
    pub options: RunOptions,
    /// Candidates dropped in the fitting step, with reasons.
    pub warnings: Vec<String>,
    pub arms: Vec<ArmSelection>,
    /// Pairwise effects estimated with each arm's selected model.
    pub report: AteReport,
}

impl SelectionResult {
    /// The selected model name for an arm.
    pub fn selected_for(&self, arm: usize) -> &str {
        &self.arms[arm - 1].selected
    }
}

/// Standardizes unless the dataset already is.
fn standardized(ds: &Dataset) -> Result<Dataset> {
    if ds.standardized {
        Ok(ds.clone())
    } else {
        dataset::standardize(ds)
    }
}

/// Fits all candidates, returning per-candidate outcomes and warnings for
/// the failures.
fn fit_candidates(
    ds: &Dataset,
    candidates: &[CandidateModel],
) -> Result<(Vec<Option<FittedGps>>, Vec<String>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate models supplied".into()));
    }
    let fits: Vec<Option<FittedGps>> = candidates
        .par_iter()
        .map(|c| mnlogit::fit(ds, &c.spec).ok())
        .collect();
    let mut warnings = Vec::new();
    for (c, f) in candidates.iter().zip(&fits) {
        if f.is_none() {
            // Refit serially only to recover the error message.
            let msg = match mnlogit::fit(ds, &c.spec) {
                Err(e) => e.to_string(),
                Ok(_) => "non-deterministic fit failure".to_string(),
            };
            warnings.push(format!("model {} dropped: {}", c.name, msg));
        }
    }
    if fits.iter().all(Option::is_none) {
        return Err(Error::AllCandidatesFailed(candidates.len()));
    }
    Ok((fits, warnings))
}

/// The relevance profile for one arm under the given measure, if it needs
/// one. The ball metric consumes a seed stream derived per arm.
fn profile_for(
    ds: &Dataset,
    arm: usize,
    measure: MeasureId,
    opts: &RunOptions,
) -> Result<Option<RhoProfile>> {
    let metric = match measure.metric() {
        Some(m) => m,
        None => return Ok(None),
    };
    let mut profile = match metric {
        RhoMetric::Ols => correlation::rho_ols(ds, arm)?,
        RhoMetric::Ball => correlation::rho_ball(
            ds,
            arm,
            opts.rho.permutations,
            opts.rho.alpha,
            seeding::derive_seed(opts.seed, arm as u64),
        )?,
    };
    if let Some(delta) = opts.rho.delta_override {
        if delta.is_nan() || delta <= 0.0 {
            return Err(Error::Config(format!(
                "delta override must be positive, got {delta}"
            )));
        }
        profile.delta = delta;
    }
    Ok(Some(profile))
}

/// One candidate's balance value at one arm.
fn measure_value(
    ds: &Dataset,
    ms: &MatchSet,
    spec: &GpsModelSpec,
    measure: MeasureId,
    profile: Option<&RhoProfile>,
) -> Result<f64> {
    match measure {
        MeasureId::Amd => balance::amd(ds, ms),
        MeasureId::Ks => balance::ks_dist(ds, ms),
        MeasureId::MDist => balance::m_dist(ds, ms),
        MeasureId::Wbm => balance::wbm(ds, ms),
        MeasureId::OabmOls | MeasureId::OabmBcor => {
            let profile = profile.expect("weighted measure requires a profile");
            Ok(balance::oabm(ds, ms, spec, profile)?.0)
        }
    }
}

/// Ranks the surviving candidates at one arm. `fitted` pairs each original
/// candidate index with its fit.
fn rank_arm(
    ds: &Dataset,
    candidates: &[CandidateModel],
    fitted: &[(usize, &FittedGps)],
    measure: MeasureId,
    arm: usize,
    profile: Option<&RhoProfile>,
) -> Result<Vec<RankedModel>> {
    let mut rows = Vec::with_capacity(fitted.len());
    for &(index, fit) in fitted {
        let candidate = &candidates[index];
        let ms = matching::match_arm(ds, &fit.arm_scores(arm), arm)?;
        let value = measure_value(ds, &ms, &candidate.spec, measure, profile)?;
        rows.push(RankedModel {
            rank: 0,
            model: candidate.name.clone(),
            index,
            value,
            n_covariates: candidate.spec.columns().len(),
        });
    }
    rows.sort_by(|a, b| {
        a.value
            .partial_cmp(&b.value)
            .expect("balance values are finite")
            .then(a.n_covariates.cmp(&b.n_covariates))
            .then(a.index.cmp(&b.index))
    });
    for (pos, row) in rows.iter_mut().enumerate() {
        row.rank = pos + 1;
    }
    Ok(rows)
}

/// Ranks every fittable candidate at one arm by the chosen measure,
/// ascending. Candidates that fail to fit are skipped, mirroring [`run`];
/// the values are bit-identical to what [`run`] reports for that arm.
pub fn rank_models(
    ds: &Dataset,
    candidates: &[CandidateModel],
    measure: MeasureId,
    arm: usize,
    opts: &RunOptions,
) -> Result<Vec<RankedModel>> {
    let ds = standardized(ds)?;
    let (fits, _) = fit_candidates(&ds, candidates)?;
    let fitted: Vec<(usize, &FittedGps)> = fits
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.as_ref().map(|f| (i, f)))
        .collect();
    let profile = profile_for(&ds, arm, measure, opts)?;
    rank_arm(&ds, candidates, &fitted, measure, arm, profile.as_ref())
}

/// Runs the full selection pipeline and estimates all pairwise effects.
pub fn run(
    ds: &Dataset,
    candidates: &[CandidateModel],
    measure: MeasureId,
    opts: &RunOptions,
) -> Result<SelectionResult> {
    let ds = standardized(ds)?;
    let (fits, warnings) = fit_candidates(&ds, candidates)?;
    let fitted: Vec<(usize, &FittedGps)> = fits
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.as_ref().map(|f| (i, f)))
        .collect();

    let mut arms = Vec::with_capacity(ds.t);
    for arm in 1..=ds.t {
        let profile = profile_for(&ds, arm, measure, opts)?;
        let ranking = rank_arm(&ds, candidates, &fitted, measure, arm, profile.as_ref())?;
        let best = &ranking[0];
        arms.push(ArmSelection {
            arm,
            selected: best.model.clone(),
            selected_index: best.index,
            ranking,
            rho: profile,
        });
    }

    let models: Vec<(String, &FittedGps)> = arms
        .iter()
        .map(|sel| {
            let fit = fits[sel.selected_index]
                .as_ref()
                .expect("selected model was fitted");
            (sel.selected.clone(), fit)
        })
        .collect();
    let report = estimate::ate_report(&ds, &models, opts.l_sigma, opts.l_cov)?;

    Ok(SelectionResult {
        measure,
        options: opts.clone(),
        warnings,
        arms,
        report,
    })
}

/// Every covariate subset of a `d`-column dataset as a candidate list,
/// named by their column sets (`m_empty`, `m_0`, `m_0_2`, ...). Capped at
/// d ≤ 12 to keep the enumeration within 4096 models.
pub fn enumerate_subsets(d: usize) -> Result<Vec<CandidateModel>> {
    if d > 12 {
        return Err(Error::InvalidInput(format!(
            "subset enumeration supports at most 12 covariates, got {d}"
        )));
    }
    let mut out = Vec::with_capacity(1 << d);
    for mask in 0u32..(1 << d) {
        let cols: Vec<usize> = (0..d).filter(|j| mask >> j & 1 == 1).collect();
        let name = if cols.is_empty() {
            "m_empty".to_string()
        } else {
            format!(
                "m_{}",
                cols.iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join("_")
            )
        };
        out.push(CandidateModel::new(&name, GpsModelSpec::new(cols)));
    }
    Ok(out)
}
