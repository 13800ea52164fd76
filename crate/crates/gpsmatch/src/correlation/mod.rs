//! Outcome–covariate relevance profiles.
//!
//! Weighted balance measures need, for every covariate, a per-arm measure of
//! how strongly that covariate drives the outcome. This module offers two:
//!
//! * [`rho_ols`] — absolute coefficients from a within-arm least-squares
//!   regression of the outcome on all covariates (captures linear signal);
//! * [`rho_ball`] — within-arm ball correlation between each covariate and
//!   the outcome (captures arbitrary dependence), plus a permutation test
//!   that splits the covariates into an independent set and a dependent set.
//!
//! Either routine returns a [`RhoProfile`]: the relevance vector ρ, floored
//! at [`RHO_FLOOR`] so reciprocals stay finite, and the penalty weight δ
//! applied to outcome-relevant covariates that a candidate model leaves out.
//! For the regression profile δ = N^(1/3) grows with the sample; for the
//! ball profile δ = (r*)⁻² where r* is the midpoint between the strongest
//! correlation the test calls independent and the weakest it calls
//! dependent (a missing side contributes zero, and the midpoint is still
//! halved).

pub mod ball;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::seeding;

/// Lower clamp for every relevance value, keeping 1/ρ finite.
pub const RHO_FLOOR: f64 = 1e-6;

/// Smallest arm for which the ball permutation test is meaningful.
const MIN_BALL_N: usize = 10;

/// Which routine produced a relevance profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMetric {
    Ols,
    Ball,
}

/// Per-arm covariate relevance: ρ per covariate plus the exclusion penalty δ.
#[derive(Debug, Clone, Serialize)]
pub struct RhoProfile {
    /// Treatment arm the profile was computed in.
    pub arm: usize,
    pub metric: RhoMetric,
    /// Relevance per covariate (dataset column order), each ≥ [`RHO_FLOOR`].
    pub rho: Vec<f64>,
    /// Covariates the independence test failed to reject (ball metric only).
    pub h0: Vec<usize>,
    /// Covariates the independence test judged outcome-relevant.
    pub h1: Vec<usize>,
    /// Penalty weight for excluding an outcome-relevant covariate.
    pub delta: f64,
}

fn arm_rows(ds: &Dataset, arm: usize) -> Result<Vec<usize>> {
    if arm < 1 || arm > ds.t {
        return Err(Error::InvalidInput(format!(
            "treatment level {arm} outside 1..={}",
            ds.t
        )));
    }
    Ok(ds.arm_indices(arm))
}

/// Relevance from a within-arm regression of the outcome on all covariates.
///
/// ρ_j = max(|θ̂_j|, ρ_floor) from the fit y ~ 1 + x within arm `arm`, and
/// δ = N^(1/3) with N the full-sample size. Requires the arm to hold at
/// least d + 2 observations so the regression has a residual degree of
/// freedom.
pub fn rho_ols(ds: &Dataset, arm: usize) -> Result<RhoProfile> {
    let rows = arm_rows(ds, arm)?;
    let d = ds.d();
    if rows.len() < d + 2 {
        return Err(Error::ArmTooSmall {
            arm,
            needed: d + 2,
            available: rows.len(),
        });
    }
    let mut design = DMatrix::zeros(rows.len(), d + 1);
    let mut y = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        design[(r, 0)] = 1.0;
        for j in 0..d {
            design[(r, j + 1)] = ds.x[(i, j)];
        }
        y[r] = ds.y[i];
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(ds.names.iter().cloned());
    let theta = linalg::ols(&design, &y, &names)?;
    let rho: Vec<f64> = (0..d).map(|j| theta[j + 1].abs().max(RHO_FLOOR)).collect();
    Ok(RhoProfile {
        arm,
        metric: RhoMetric::Ols,
        rho,
        h0: Vec::new(),
        h1: Vec::new(),
        delta: (ds.n as f64).powf(1.0 / 3.0),
    })
}

/// Relevance from within-arm ball correlations with a permutation split.
///
/// For each covariate, ρ_j = max(ball_cor(x_j, y), ρ_floor) within the arm,
/// and a `permutations`-replica test at level `alpha` decides whether the
/// covariate is outcome-relevant. Each covariate's test gets its own stream
/// derived from `seed`, so results do not depend on thread scheduling.
pub fn rho_ball(
    ds: &Dataset,
    arm: usize,
    permutations: usize,
    alpha: f64,
    seed: u64,
) -> Result<RhoProfile> {
    if permutations == 0 {
        return Err(Error::InvalidInput(
            "permutation count must be positive".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "test level must lie in (0, 1), got {alpha}"
        )));
    }
    let rows = arm_rows(ds, arm)?;
    if rows.len() < MIN_BALL_N {
        return Err(Error::ArmTooSmall {
            arm,
            needed: MIN_BALL_N,
            available: rows.len(),
        });
    }
    let y: Vec<f64> = rows.iter().map(|&i| ds.y[i]).collect();
    let d = ds.d();
    let per_covariate: Vec<(f64, f64)> = (0..d)
        .into_par_iter()
        .map(|j| -> Result<(f64, f64)> {
            let xj: Vec<f64> = rows.iter().map(|&i| ds.x[(i, j)]).collect();
            let rho = ball::ball_cor(&xj, &y)?.max(RHO_FLOOR);
            let p = ball::ball_test(&xj, &y, permutations, seeding::derive_seed(seed, j as u64))?;
            Ok((rho, p))
        })
        .collect::<Result<_>>()?;
    let mut h0 = Vec::new();
    let mut h1 = Vec::new();
    for (j, &(_, p)) in per_covariate.iter().enumerate() {
        if p <= alpha {
            h1.push(j);
        } else {
            h0.push(j);
        }
    }
    let rho: Vec<f64> = per_covariate.iter().map(|&(r, _)| r).collect();
    let max_h0 = h0.iter().map(|&j| rho[j]).fold(0.0f64, f64::max);
    let min_h1 = if h1.is_empty() {
        0.0
    } else {
        h1.iter().map(|&j| rho[j]).fold(f64::INFINITY, f64::min)
    };
    let r_star = 0.5 * (max_h0 + min_h1);
    Ok(RhoProfile {
        arm,
        metric: RhoMetric::Ball,
        rho,
        h0,
        h1,
        delta: r_star.powi(-2),
    })
}
