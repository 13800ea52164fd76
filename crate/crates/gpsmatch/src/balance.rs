//! Covariate-balance measures over matched samples.
//!
//! After matching every unit into arm w, each covariate has an imputed
//! column X̂(w) alongside its original column X. All measures here compare
//! the two, per arm:
//!
//! * [`amd`] — sum over covariates of |mean X̂ − mean X|;
//! * [`ks_dist`] — sum over covariates of the two-sample Kolmogorov–Smirnov
//!   distance between the imputed and original columns;
//! * [`m_dist`] — Mahalanobis form gapᵀS⁻¹gap of the mean gaps, S the
//!   sample covariance of the original covariates;
//! * [`wbm`] — mean gaps weighted by pooled outcome-regression
//!   coefficients, Σ_j |θ̂_j · gap_j|;
//! * [`oabm`] — mean gaps weighted by outcome relevance *and* by whether
//!   the candidate GPS model includes the covariate: an included covariate
//!   costs 1/ρ_j per unit of gap (imbalance in a covariate the model already
//!   uses signals a poor fit most where the outcome is insensitive), an
//!   excluded one costs δ·ρ_j (omitting an outcome-relevant covariate is
//!   penalized in proportion to its relevance).
//!
//! Lower is better for every measure, and a perfectly self-matched sample
//! scores zero on all of them.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::correlation::RhoProfile;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::matching::{self, MatchSet};
use crate::mnlogit::GpsModelSpec;

/// Condition-number ceiling for the covariance used by [`m_dist`].
const MAX_COV_CONDITION: f64 = 1e12;

fn check_shapes(ds: &Dataset, ms: &MatchSet) -> Result<()> {
    if ms.x_imputed.nrows() != ds.n || ms.x_imputed.ncols() != ds.d() {
        return Err(Error::DimensionMismatch {
            expected: ds.n * ds.d(),
            got: ms.x_imputed.nrows() * ms.x_imputed.ncols(),
        });
    }
    Ok(())
}

/// Per-covariate mean gap: mean of the imputed column minus the full-sample
/// mean of the original column.
pub fn covariate_gap(ds: &Dataset, ms: &MatchSet) -> Result<DVector<f64>> {
    check_shapes(ds, ms)?;
    Ok(matching::imputed_covariate_mean(ms) - ds.column_means())
}

/// Absolute mean difference, summed over covariates.
pub fn amd(ds: &Dataset, ms: &MatchSet) -> Result<f64> {
    Ok(covariate_gap(ds, ms)?.iter().map(|g| g.abs()).sum())
}

/// Two-sample Kolmogorov–Smirnov distance, sup |F̂_a − F̂_b|.
fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite"));
    b.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite"));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut sup = 0.0f64;
    while ia < a.len() || ib < b.len() {
        let v = match (a.get(ia), b.get(ib)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while ia < a.len() && a[ia] <= v {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= v {
            ib += 1;
        }
        sup = sup.max((ia as f64 / na - ib as f64 / nb).abs());
    }
    sup
}

/// Kolmogorov–Smirnov distance between imputed and original columns,
/// summed over covariates.
pub fn ks_dist(ds: &Dataset, ms: &MatchSet) -> Result<f64> {
    check_shapes(ds, ms)?;
    let mut total = 0.0;
    for j in 0..ds.d() {
        let imputed: Vec<f64> = ms.x_imputed.column(j).iter().copied().collect();
        let original: Vec<f64> = ds.x.column(j).iter().copied().collect();
        total += ks_two_sample(imputed, original);
    }
    Ok(total)
}

/// Mahalanobis balance gapᵀ S⁻¹ gap with S the sample covariance of the
/// original covariates. Errors when S is numerically singular.
pub fn m_dist(ds: &Dataset, ms: &MatchSet) -> Result<f64> {
    let gap = covariate_gap(ds, ms)?;
    let s = linalg::sample_cov(&ds.x);
    let cond = linalg::condition_number(&s);
    if cond.is_nan() || cond >= MAX_COV_CONDITION {
        return Err(Error::IllConditioned { cond });
    }
    let chol = s.cholesky().ok_or(Error::IllConditioned { cond })?;
    Ok(gap.dot(&chol.solve(&gap)))
}

/// Pooled outcome-regression coefficients θ̂ from y ~ 1 + x over the whole
/// sample, returned without the intercept.
fn pooled_slopes(ds: &Dataset) -> Result<DVector<f64>> {
    let d = ds.d();
    let mut design = DMatrix::zeros(ds.n, d + 1);
    for i in 0..ds.n {
        design[(i, 0)] = 1.0;
        for j in 0..d {
            design[(i, j + 1)] = ds.x[(i, j)];
        }
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(ds.names.iter().cloned());
    let theta = linalg::ols(&design, &ds.y, &names)?;
    Ok(theta.rows(1, d).into_owned())
}

/// Outcome-weighted balance: Σ_j |θ̂_j · gap_j| with θ̂ from the pooled
/// full-sample regression (not a per-arm fit).
pub fn wbm(ds: &Dataset, ms: &MatchSet) -> Result<f64> {
    let gap = covariate_gap(ds, ms)?;
    let theta = pooled_slopes(ds)?;
    Ok((0..ds.d()).map(|j| (theta[j] * gap[j]).abs()).sum())
}

/// Outcome-adjusted balance: Σ_j ζ_j |gap_j| with ζ_j = 1/ρ_j when the
/// candidate model includes covariate j and ζ_j = δ·ρ_j when it excludes
/// it. Returns the measure together with the ζ vector used.
pub fn oabm(
    ds: &Dataset,
    ms: &MatchSet,
    spec: &GpsModelSpec,
    profile: &RhoProfile,
) -> Result<(f64, Vec<f64>)> {
    let gap = covariate_gap(ds, ms)?;
    if profile.rho.len() != ds.d() {
        return Err(Error::DimensionMismatch {
            expected: ds.d(),
            got: profile.rho.len(),
        });
    }
    if profile.arm != ms.arm {
        return Err(Error::InvalidInput(format!(
            "relevance profile is for arm {} but the match set targets arm {}",
            profile.arm, ms.arm
        )));
    }
    if spec.columns().last().is_some_and(|&j| j >= ds.d()) {
        return Err(Error::InvalidInput(
            "model references a covariate column outside the dataset".into(),
        ));
    }
    let zeta: Vec<f64> = (0..ds.d())
        .map(|j| {
            if spec.contains(j) {
                1.0 / profile.rho[j]
            } else {
                profile.delta * profile.rho[j]
            }
        })
        .collect();
    let value = (0..ds.d()).map(|j| zeta[j] * gap[j].abs()).sum();
    Ok((value, zeta))
}

/// Every balance measure for one candidate model at one arm. The two
/// outcome-adjusted entries are present only when the corresponding
/// relevance profile was supplied.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub model: String,
    pub arm: usize,
    pub amd: f64,
    pub ks_dist: f64,
    pub m_dist: f64,
    pub wbm: f64,
    pub oabm_ols: Option<f64>,
    pub zeta_ols: Option<Vec<f64>>,
    pub oabm_bcor: Option<f64>,
    pub zeta_bcor: Option<Vec<f64>>,
}

/// Evaluates every available measure on one matched sample. `ols_profile`
/// and `bcor_profile` enable the corresponding outcome-adjusted entries.
pub fn balance_report(
    ds: &Dataset,
    ms: &MatchSet,
    model: &str,
    spec: &GpsModelSpec,
    ols_profile: Option<&RhoProfile>,
    bcor_profile: Option<&RhoProfile>,
) -> Result<BalanceReport> {
    let (oabm_ols, zeta_ols) = match ols_profile {
        Some(p) => {
            let (v, z) = oabm(ds, ms, spec, p)?;
            (Some(v), Some(z))
        }
        None => (None, None),
    };
    let (oabm_bcor, zeta_bcor) = match bcor_profile {
        Some(p) => {
            let (v, z) = oabm(ds, ms, spec, p)?;
            (Some(v), Some(z))
        }
        None => (None, None),
    };
    Ok(BalanceReport {
        model: model.to_string(),
        arm: ms.arm,
        amd: amd(ds, ms)?,
        ks_dist: ks_dist(ds, ms)?,
        m_dist: m_dist(ds, ms)?,
        wbm: wbm(ds, ms)?,
        oabm_ols,
        zeta_ols,
        oabm_bcor,
        zeta_bcor,
    })
}
