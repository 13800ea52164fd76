//! Pairwise treatment-effect estimation on matched samples, with a
//! variance estimator that accounts for matching with replacement and for
//! the estimated (rather than known) propensity model.
//!
//! The point estimate for a pair (w, w′) is the difference of imputed-
//! outcome means. Its variance has three ingredients:
//!
//! 1. the spread of per-unit imputed contrasts around the estimate;
//! 2. a penalty for reusing donors — units matched K times contribute a
//!    (1+K)K-weighted estimate of their local outcome variance, obtained by
//!    contrasting each donor with its nearest same-arm neighbors in
//!    propensity score;
//! 3. a subtraction for the precision *gained* by matching on a fitted
//!    score: the quadratic form (Δĉ)ᵀ·Vcov(β̂)·(Δĉ), where ĉ estimates how
//!    the matched means move with the model coefficients.
//!
//! The adjusted variance is floored at 1% of the unadjusted value so the
//! subtraction can never produce a nonpositive variance.

use nalgebra::DVector;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matching::{self, MatchSet};
use crate::mnlogit::FittedGps;

/// Critical value for the reported 95% confidence intervals.
const CI_Z: f64 = 1.96;

/// Fraction of the unadjusted variance kept as a floor after subtracting
/// the estimated-score adjustment.
const VARIANCE_FLOOR: f64 = 0.01;

/// Mean imputed outcome μ̂(w) = N⁻¹ Σ_i Ŷ_i(w).
pub fn mean_po(ms: &MatchSet) -> f64 {
    ms.y_imputed.mean()
}

/// Pairwise effect τ̂(w, w′) = μ̂(w′) − μ̂(w).
pub fn pairwise_ate(ms_w: &MatchSet, ms_wp: &MatchSet) -> f64 {
    mean_po(ms_wp) - mean_po(ms_w)
}

/// Local outcome variance at donor i: contrast Y_i with the mean of its
/// `l` nearest same-arm neighbors in matched score, scaled by l/(l+1).
fn sigma2_unit(
    ds: &Dataset,
    ms: &MatchSet,
    index: &matching::NeighborIndex,
    i: usize,
    l_sigma: usize,
) -> Result<f64> {
    let nbrs = index.nearest(ms.gps_used[i], l_sigma, Some(i))?;
    let lf = l_sigma as f64;
    let ybar = nbrs.iter().map(|&k| ds.y[k]).sum::<f64>() / lf;
    Ok(lf / (lf + 1.0) * (ds.y[i] - ybar).powi(2))
}

/// N⁻¹ Σ_{i: W_i = arm} (1+K_i)K_i σ̄̂²_i — the donor-reuse penalty of one
/// matched arm. Donors never reused (K = 0) contribute nothing.
fn k_weighted_sigma_sum(ds: &Dataset, ms: &MatchSet, l_sigma: usize) -> Result<f64> {
    let arm_n = ds.arm_size(ms.arm);
    if arm_n < l_sigma + 1 {
        return Err(Error::ArmTooSmall {
            arm: ms.arm,
            needed: l_sigma + 1,
            available: arm_n,
        });
    }
    let index = matching::NeighborIndex::build(ds, &ms.gps_used, ms.arm)?;
    let mut total = 0.0;
    for i in 0..ds.n {
        if ds.w[i] == ms.arm && ms.k_count[i] > 0 {
            let k = ms.k_count[i] as f64;
            total += (1.0 + k) * k * sigma2_unit(ds, ms, &index, i, l_sigma)?;
        }
    }
    Ok(total / ds.n as f64)
}

/// Per-arm outcome variance under matching:
/// N⁻¹ Σ (Ŷ_i(w) − μ̂(w))² plus the donor-reuse penalty.
pub fn sigma2_hat(ds: &Dataset, ms: &MatchSet, l_sigma: usize) -> Result<f64> {
    if ms.y_imputed.len() != ds.n {
        return Err(Error::DimensionMismatch {
            expected: ds.n,
            got: ms.y_imputed.len(),
        });
    }
    let mu = mean_po(ms);
    let term1 = ms.y_imputed.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / ds.n as f64;
    Ok(term1 + k_weighted_sigma_sum(ds, ms, l_sigma)?)
}

/// Sensitivity ĉ(w) of the matched mean to the fitted coefficients.
///
/// For every unit, the covariance between each model covariate and the
/// outcome is estimated over the unit's `l_cov` nearest arm-w units in
/// matched score (self excluded, sample covariance with denominator
/// l_cov − 1), then weighted by the score residual vector s_i whose entry
/// for level v (v = 2..=T, level 1 is the reference) is 1{v = w} − p(v|x_i).
/// The result is laid out level-major to align with `fit.vcov`: all of
/// level 2's design coordinates, then level 3's, and so on, with the
/// intercept coordinate of each block identically zero.
pub fn c_hat(ds: &Dataset, ms: &MatchSet, fit: &FittedGps, l_cov: usize) -> Result<DVector<f64>> {
    if l_cov < 2 {
        return Err(Error::InvalidInput(
            "covariance estimation needs at least two neighbors".into(),
        ));
    }
    if fit.gps.nrows() != ds.n || fit.t != ds.t {
        return Err(Error::DimensionMismatch {
            expected: ds.n * ds.t,
            got: fit.gps.nrows() * fit.t,
        });
    }
    let arm_n = ds.arm_size(ms.arm);
    if arm_n < l_cov + 1 {
        return Err(Error::ArmTooSmall {
            arm: ms.arm,
            needed: l_cov + 1,
            available: arm_n,
        });
    }
    let b = fit.spec.width();
    let lf = l_cov as f64;
    let mut c = DVector::zeros((ds.t - 1) * b);
    let mut cov = vec![0.0f64; b];
    let index = matching::NeighborIndex::build(ds, &ms.gps_used, ms.arm)?;
    for i in 0..ds.n {
        let nbrs = index.nearest(ms.gps_used[i], l_cov, Some(i))?;
        let ybar = nbrs.iter().map(|&k| ds.y[k]).sum::<f64>() / lf;
        // cov[0] stays 0: the intercept coordinate is constant.
        for (pos, &col) in fit.spec.columns().iter().enumerate() {
            let gbar = nbrs.iter().map(|&k| ds.x[(k, col)]).sum::<f64>() / lf;
            cov[pos + 1] = nbrs
                .iter()
                .map(|&k| (ds.x[(k, col)] - gbar) * (ds.y[k] - ybar))
                .sum::<f64>()
                / (lf - 1.0);
        }
        for v in 2..=ds.t {
            let s = f64::from(v == ms.arm) - fit.gps[(i, v - 1)];
            for (coord, &cv) in cov.iter().enumerate() {
                c[(v - 2) * b + coord] += cv * s;
            }
        }
    }
    Ok(c / ds.n as f64)
}

/// The assembled variance of one pairwise estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PairVarianceParts {
    /// V̂/N — the variance of τ̂ itself.
    pub variance: f64,
    /// The unadjusted matched-pair variance σ̂²_pair (N-scale).
    pub sigma2_pair: f64,
    /// The estimated-score adjustment subtracted from σ̂²_pair.
    pub adjustment: f64,
    /// Whether the 1% floor was binding.
    pub floored: bool,
    /// Whether both arms used the same fitted model.
    pub same_model: bool,
}

/// Variance of τ̂(w, w′) with donor-reuse and estimated-score corrections.
///
/// When both arms' scores come from the same fitted model the adjustment is
/// the quadratic form of Δĉ = ĉ(w′) − ĉ(w) in that model's coefficient
/// covariance; otherwise the two models are treated as independently
/// estimated and their quadratic forms add.
pub fn pair_variance(
    ds: &Dataset,
    ms_w: &MatchSet,
    ms_wp: &MatchSet,
    fit_w: &FittedGps,
    fit_wp: &FittedGps,
    l_sigma: usize,
    l_cov: usize,
) -> Result<PairVarianceParts> {
    let nf = ds.n as f64;
    let tau = pairwise_ate(ms_w, ms_wp);
    let term1 = (0..ds.n)
        .map(|i| (ms_wp.y_imputed[i] - ms_w.y_imputed[i] - tau).powi(2))
        .sum::<f64>()
        / nf;
    let sigma2_pair = term1
        + k_weighted_sigma_sum(ds, ms_w, l_sigma)?
        + k_weighted_sigma_sum(ds, ms_wp, l_sigma)?;
    let same_model = fit_w.spec == fit_wp.spec;
    // `vcov` is the covariance of β̂ itself (already carrying the 1/N of
    // the total information), while σ̂²_pair lives on the per-unit scale
    // that is divided by N below — so the quadratic form is multiplied by
    // N here to place both terms on the same scale.
    let adjustment = nf
        * if same_model {
            let dc = c_hat(ds, ms_wp, fit_w, l_cov)? - c_hat(ds, ms_w, fit_w, l_cov)?;
            dc.dot(&(&fit_w.vcov * &dc))
        } else {
            let cw = c_hat(ds, ms_w, fit_w, l_cov)?;
            let cwp = c_hat(ds, ms_wp, fit_wp, l_cov)?;
            cw.dot(&(&fit_w.vcov * &cw)) + cwp.dot(&(&fit_wp.vcov * &cwp))
        };
    let unfloored = sigma2_pair - adjustment;
    let floor = VARIANCE_FLOOR * sigma2_pair;
    Ok(PairVarianceParts {
        variance: unfloored.max(floor) / nf,
        sigma2_pair,
        adjustment,
        floored: unfloored < floor,
        same_model,
    })
}

/// One arm's matched summary.
#[derive(Debug, Clone, Serialize)]
pub struct ArmEstimate {
    pub arm: usize,
    /// Name of the model whose scores this arm was matched on.
    pub model: String,
    /// μ̂(w), the imputed potential-outcome mean.
    pub mean: f64,
    /// σ̂²(w), the per-arm matched variance.
    pub sigma2: f64,
    /// ĉ(w), the coefficient-sensitivity vector (level-major).
    pub c: Vec<f64>,
}

/// One pairwise contrast with its variance and confidence interval.
#[derive(Debug, Clone, Serialize)]
pub struct PairEstimate {
    pub from: usize,
    pub to: usize,
    /// τ̂(from, to) = μ̂(to) − μ̂(from).
    pub tau: f64,
    pub variance: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub sigma2_pair: f64,
    pub adjustment: f64,
    pub floored: bool,
    pub same_model: bool,
}

/// All pairwise effects among the treatment levels of one dataset.
#[derive(Debug, Clone, Serialize)]
pub struct AteReport {
    pub l_sigma: usize,
    pub l_cov: usize,
    pub arms: Vec<ArmEstimate>,
    pub pairs: Vec<PairEstimate>,
}

/// Matches every arm on its own model's scores and assembles all T(T−1)/2
/// pairwise estimates. `models[w-1]` names and provides the fitted model
/// whose score column drives arm w's matching (entries may repeat when one
/// model serves several arms).
pub fn ate_report(
    ds: &Dataset,
    models: &[(String, &FittedGps)],
    l_sigma: usize,
    l_cov: usize,
) -> Result<AteReport> {
    if models.len() != ds.t {
        return Err(Error::DimensionMismatch {
            expected: ds.t,
            got: models.len(),
        });
    }
    let mut match_sets = Vec::with_capacity(ds.t);
    let mut arms = Vec::with_capacity(ds.t);
    for w in 1..=ds.t {
        let (name, fit) = &models[w - 1];
        let ms = matching::match_arm(ds, &fit.arm_scores(w), w)?;
        let c = c_hat(ds, &ms, fit, l_cov)?;
        arms.push(ArmEstimate {
            arm: w,
            model: name.clone(),
            mean: mean_po(&ms),
            sigma2: sigma2_hat(ds, &ms, l_sigma)?,
            c: c.iter().copied().collect(),
        });
        match_sets.push(ms);
    }
    let mut pairs = Vec::new();
    for w in 1..=ds.t {
        for wp in (w + 1)..=ds.t {
            let parts = pair_variance(
                ds,
                &match_sets[w - 1],
                &match_sets[wp - 1],
                models[w - 1].1,
                models[wp - 1].1,
                l_sigma,
                l_cov,
            )?;
            let tau = pairwise_ate(&match_sets[w - 1], &match_sets[wp - 1]);
            let se = parts.variance.sqrt();
            pairs.push(PairEstimate {
                from: w,
                to: wp,
                tau,
                variance: parts.variance,
                se,
                ci_lower: tau - CI_Z * se,
                ci_upper: tau + CI_Z * se,
                sigma2_pair: parts.sigma2_pair,
                adjustment: parts.adjustment,
                floored: parts.floored,
                same_model: parts.same_model,
            });
        }
    }
    Ok(AteReport {
        l_sigma,
        l_cov,
        arms,
        pairs,
    })
}
