//! Multinomial-logit generalized propensity scores by maximum likelihood.
//!
//! A candidate model is a covariate subset S; the fitted model gives each
//! unit a probability vector over the t treatment levels,
//!
//! ```text
//! p(w | x; β) = exp(zᵀ β_w) / Σ_v exp(zᵀ β_v),   z = (1, x_S),  β_1 ≡ 0,
//! ```
//!
//! with level 1 as the reference. The log-likelihood is concave, so
//! Newton–Raphson from β = 0 with a step-halving line search finds the
//! global optimum whenever it exists. All probability work goes through
//! log-sum-exp, so scores stay finite for arbitrarily large linear
//! predictors.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Convergence: stop when the largest gradient coordinate is below this.
const GRAD_TOL: f64 = 1e-8;
/// ... or when the relative log-likelihood improvement is below this.
const REL_LL_TOL: f64 = 1e-12;
const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;
/// Ridge added to the information matrix when factorization fails.
const RIDGE: f64 = 1e-8;
/// Coefficients beyond this magnitude (on standardized covariates) signal
/// separation: odds ratios of e^100 never arise from real overlap.
const BETA_SANITY_BOUND: f64 = 100.0;

/// A candidate GPS model: which covariate columns enter the linear
/// predictor. The intercept is always included and the link is always
/// multinomial-logit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GpsModelSpec {
    /// Sorted, de-duplicated covariate column indices (0-based).
    columns: Vec<usize>,
}

impl GpsModelSpec {
    /// Builds a spec from any iterable of column indices; duplicates are
    /// dropped and the order normalized to ascending.
    pub fn new<I: IntoIterator<Item = usize>>(columns: I) -> GpsModelSpec {
        let mut columns: Vec<usize> = columns.into_iter().collect();
        columns.sort_unstable();
        columns.dedup();
        GpsModelSpec { columns }
    }

    /// The model with no covariates at all.
    pub fn intercept_only() -> GpsModelSpec {
        GpsModelSpec { columns: vec![] }
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    /// Whether covariate column `j` enters the model.
    pub fn contains(&self, j: usize) -> bool {
        self.columns.binary_search(&j).is_ok()
    }

    /// Design-matrix width: intercept plus one column per covariate.
    pub fn width(&self) -> usize {
        self.columns.len() + 1
    }
}

/// A fitted multinomial-logit GPS model.
#[derive(Debug, Clone)]
pub struct FittedGps {
    pub spec: GpsModelSpec,
    /// Number of treatment levels in the fitted data.
    pub t: usize,
    /// Coefficients, one row per non-reference level (levels 2..=t); each
    /// row is (intercept, coefficients for spec columns in ascending order).
    pub beta: DMatrix<f64>,
    /// n × t fitted probabilities; row i is p(· | x_i; β̂).
    pub gps: DMatrix<f64>,
    /// Covariance of the flattened coefficient vector (level-major: all of
    /// level 2's coefficients, then level 3's, ...), the inverse observed
    /// information at β̂.
    pub vcov: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FittedGps {
    /// The estimated score column for one arm, as a plain slice-friendly
    /// vector: p(arm | x_i) for every unit.
    pub fn arm_scores(&self, arm: usize) -> Vec<f64> {
        (0..self.gps.nrows())
            .map(|i| self.gps[(i, arm - 1)])
            .collect()
    }

    /// JSON-friendly summary (coefficients, column names, diagnostics).
    pub fn summary(&self, ds: &Dataset) -> FitSummary {
        let mut names = vec!["(intercept)".to_string()];
        names.extend(self.spec.columns().iter().map(|&j| ds.names[j].clone()));
        FitSummary {
            columns: names,
            levels: (2..=self.t).collect(),
            beta: (0..self.beta.nrows())
                .map(|r| self.beta.row(r).iter().copied().collect())
                .collect(),
            loglik: self.loglik,
            converged: self.converged,
            iterations: self.iterations,
        }
    }
}

/// Serializable fit report for the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub columns: Vec<String>,
    pub levels: Vec<usize>,
    pub beta: Vec<Vec<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Builds the n × (|S|+1) design matrix (1, x_S) for a model.
fn design(ds: &Dataset, spec: &GpsModelSpec) -> Result<DMatrix<f64>> {
    if let Some(&bad) = spec.columns().iter().find(|&&j| j >= ds.d()) {
        return Err(Error::InvalidInput(format!(
            "model references covariate column {bad} but the data has {} columns",
            ds.d()
        )));
    }
    let b = spec.width();
    Ok(DMatrix::from_fn(ds.n, b, |i, c| {
        if c == 0 {
            1.0
        } else {
            ds.x[(i, spec.columns()[c - 1])]
        }
    }))
}

/// Row-wise probabilities and total log-likelihood at `beta`.
///
/// Returns (n × t probability matrix, log-likelihood). `beta` is
/// (t−1) × b as in [`FittedGps`].
fn probabilities(
    z: &DMatrix<f64>,
    w: &[usize],
    t: usize,
    beta: &DMatrix<f64>,
) -> (DMatrix<f64>, f64) {
    let n = z.nrows();
    // Scores for levels 2..=t; level 1's score is identically 0.
    let eta = z * beta.transpose(); // n × (t−1)
    let mut gps = DMatrix::zeros(n, t);
    let mut loglik = 0.0;
    for i in 0..n {
        let mut max = 0.0f64;
        for l in 0..t - 1 {
            max = max.max(eta[(i, l)]);
        }
        let mut denom = (-max).exp();
        for l in 0..t - 1 {
            denom += (eta[(i, l)] - max).exp();
        }
        let log_denom = max + denom.ln();
        gps[(i, 0)] = (-log_denom).exp();
        for l in 0..t - 1 {
            gps[(i, l + 1)] = (eta[(i, l)] - log_denom).exp();
        }
        let score_wi = if w[i] == 1 { 0.0 } else { eta[(i, w[i] - 2)] };
        loglik += score_wi - log_denom;
    }
    (gps, loglik)
}

/// Log-likelihood of the model at externally supplied coefficients.
///
/// `beta` must be (t−1) × (|S|+1), rows ordered by level. Exposed so the
/// likelihood surface can be probed directly (e.g. finite-difference checks
/// of the fitted gradient).
pub fn log_likelihood(ds: &Dataset, spec: &GpsModelSpec, beta: &DMatrix<f64>) -> Result<f64> {
    let z = design(ds, spec)?;
    if beta.nrows() != ds.t - 1 || beta.ncols() != spec.width() {
        return Err(Error::DimensionMismatch {
            expected: (ds.t - 1) * spec.width(),
            got: beta.nrows() * beta.ncols(),
        });
    }
    Ok(probabilities(&z, &ds.w, ds.t, beta).1)
}

/// Gradient of the log-likelihood at externally supplied coefficients,
/// flattened level-major (all of level 2's coordinates, then level 3's,
/// ...). Shapes as in [`log_likelihood`]. Exposed so the analytic score
/// can be checked against finite differences of the likelihood.
pub fn log_likelihood_gradient(
    ds: &Dataset,
    spec: &GpsModelSpec,
    beta: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let z = design(ds, spec)?;
    if beta.nrows() != ds.t - 1 || beta.ncols() != spec.width() {
        return Err(Error::DimensionMismatch {
            expected: (ds.t - 1) * spec.width(),
            got: beta.nrows() * beta.ncols(),
        });
    }
    let (gps, _) = probabilities(&z, &ds.w, ds.t, beta);
    Ok(gradient(&z, &ds.w, &gps, ds.t))
}

/// Gradient of the log-likelihood, flattened level-major.
fn gradient(z: &DMatrix<f64>, w: &[usize], gps: &DMatrix<f64>, t: usize) -> DVector<f64> {
    let n = z.nrows();
    let b = z.ncols();
    let mut g = DVector::zeros((t - 1) * b);
    for i in 0..n {
        for l in 2..=t {
            let resid = (if w[i] == l { 1.0 } else { 0.0 }) - gps[(i, l - 1)];
            let base = (l - 2) * b;
            for c in 0..b {
                g[base + c] += resid * z[(i, c)];
            }
        }
    }
    g
}

/// Observed information (negative Hessian) at the current probabilities,
/// level-major block layout.
fn information(z: &DMatrix<f64>, gps: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let n = z.nrows();
    let b = z.ncols();
    let k = (t - 1) * b;
    let mut info = DMatrix::zeros(k, k);
    for i in 0..n {
        for la in 2..=t {
            let pa = gps[(i, la - 1)];
            for lb in la..=t {
                let pb = gps[(i, lb - 1)];
                let m = if la == lb { pa * (1.0 - pa) } else { -pa * pb };
                let (ra, rb) = ((la - 2) * b, (lb - 2) * b);
                for c1 in 0..b {
                    let zc1 = z[(i, c1)] * m;
                    for c2 in 0..b {
                        let v = zc1 * z[(i, c2)];
                        info[(ra + c1, rb + c2)] += v;
                        if la != lb {
                            info[(rb + c2, ra + c1)] += v;
                        }
                    }
                }
            }
        }
    }
    info
}

/// Solves `info · x = rhs`, retrying once with a small ridge if the
/// factorization fails.
fn solve_info(info: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = info.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    let k = info.nrows();
    let ridged = info + DMatrix::identity(k, k) * RIDGE;
    match ridged.cholesky() {
        Some(chol) => Ok(chol.solve(rhs)),
        None => Err(Error::SingularInformation),
    }
}

/// Inverts the information matrix for the coefficient covariance, with the
/// same single ridge retry.
fn invert_info(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = match info.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => {
            let k = info.nrows();
            let ridged = info + DMatrix::identity(k, k) * RIDGE;
            ridged
                .cholesky()
                .ok_or(Error::SingularInformation)?
                .inverse()
        }
    };
    // Symmetrize: the Cholesky inverse is symmetric up to rounding.
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Fits the model by Newton–Raphson.
///
/// Requires a standardized dataset unless the model is intercept-only
/// (covariates on a common scale keep the information matrix
/// well-conditioned and make the separation bound meaningful). Every arm is
/// nonempty by `Dataset` construction. Errors on non-convergence (typically
/// separation) or a singular information matrix.
pub fn fit(ds: &Dataset, spec: &GpsModelSpec) -> Result<FittedGps> {
    if !ds.standardized && !spec.columns().is_empty() {
        return Err(Error::InvalidInput(
            "fit requires a standardized dataset (call dataset::standardize first)".into(),
        ));
    }
    let z = design(ds, spec)?;
    let t = ds.t;
    let b = spec.width();
    let mut beta = DMatrix::<f64>::zeros(t - 1, b);
    let (mut gps, mut loglik) = probabilities(&z, &ds.w, t, &beta);
    let mut iterations = 0;

    loop {
        let g = gradient(&z, &ds.w, &gps, t);
        let grad_norm = g.amax();
        if grad_norm < GRAD_TOL {
            break;
        }
        if iterations >= MAX_ITER {
            return Err(Error::NonConvergence {
                iterations,
                grad_norm,
                last_beta: beta.iter().copied().collect(),
            });
        }
        iterations += 1;

        let info = information(&z, &gps, t);
        let delta = solve_info(&info, &g)?;

        // Step-halving line search: accept the first step that does not
        // decrease the log-likelihood.
        let mut step = 1.0;
        let mut halvings = 0;
        let (new_beta, new_gps, new_loglik) = loop {
            let mut candidate = beta.clone();
            for l in 0..t - 1 {
                for c in 0..b {
                    candidate[(l, c)] += step * delta[l * b + c];
                }
            }
            let (cand_gps, cand_ll) = probabilities(&z, &ds.w, t, &candidate);
            // NaN fails the comparison and keeps halving.
            if cand_ll >= loglik {
                break (candidate, cand_gps, cand_ll);
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(Error::NonConvergence {
                    iterations,
                    grad_norm,
                    last_beta: beta.iter().copied().collect(),
                });
            }
            step *= 0.5;
        };

        let improved = new_loglik - loglik;
        beta = new_beta;
        gps = new_gps;
        let old = loglik;
        loglik = new_loglik;
        if improved.abs() <= REL_LL_TOL * old.abs().max(1.0) {
            break;
        }
    }

    if beta.amax() > BETA_SANITY_BOUND {
        let g = gradient(&z, &ds.w, &gps, t);
        return Err(Error::NonConvergence {
            iterations,
            grad_norm: g.amax(),
            last_beta: beta.iter().copied().collect(),
        });
    }

    let info = information(&z, &gps, t);
    let vcov = invert_info(&info)?;
    Ok(FittedGps {
        spec: spec.clone(),
        t,
        beta,
        gps,
        vcov,
        loglik,
        converged: true,
        iterations,
    })
}

/// Probability vector over the t levels for one covariate row.
///
/// `x_row` holds the model's covariates (spec columns, in ascending column
/// order), already on the scale the model was fitted on.
pub fn predict(fit: &FittedGps, x_row: &[f64]) -> Result<DVector<f64>> {
    let b = fit.spec.width();
    if x_row.len() != b - 1 {
        return Err(Error::DimensionMismatch {
            expected: b - 1,
            got: x_row.len(),
        });
    }
    let t = fit.t;
    let mut scores = Vec::with_capacity(t - 1);
    for l in 0..t - 1 {
        let mut s = fit.beta[(l, 0)];
        for c in 1..b {
            s += fit.beta[(l, c)] * x_row[c - 1];
        }
        scores.push(s);
    }
    let max = scores.iter().fold(0.0f64, |m, &s| m.max(s));
    let mut denom = (-max).exp();
    for &s in &scores {
        denom += (s - max).exp();
    }
    let log_denom = max + denom.ln();
    let mut p = DVector::zeros(t);
    p[0] = (-log_denom).exp();
    for l in 0..t - 1 {
        p[l + 1] = (scores[l] - log_denom).exp();
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::standardize;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Small synthetic dataset with t arms and d standard-normal covariates,
    /// assignment depending on the first covariate.
    fn synthetic(n: usize, t: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = crate::seeding::rng_for(seed, 0);
        let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut w = Vec::with_capacity(n);
        for i in 0..n {
            // Mildly covariate-dependent assignment keeps every arm populated.
            let tilt = 0.8 * x[(i, 0)];
            let mut weights: Vec<f64> =
                (0..t).map(|l| (tilt * l as f64 / t as f64).exp()).collect();
            let total: f64 = weights.iter().sum();
            for v in &mut weights {
                *v /= total;
            }
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut level = t;
            for (l, &p) in weights.iter().enumerate() {
                acc += p;
                if u < acc {
                    level = l + 1;
                    break;
                }
            }
            w.push(level);
        }
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] + rng.sample::<f64, _>(StandardNormal));
        let names = (0..d).map(|j| format!("x{}", j + 1)).collect();
        let ds = Dataset::new(y, w, x, names, "y", "w").unwrap();
        standardize(&ds).unwrap()
    }

    #[test]
    fn intercept_only_recovers_arm_frequencies() {
        // Equal arm counts: every fitted probability must be 1/t.
        let n = 300;
        let y = DVector::from_fn(n, |i, _| i as f64);
        let w: Vec<usize> = (0..n).map(|i| i % 3 + 1).collect();
        let x = DMatrix::from_fn(n, 1, |i, _| (i % 7) as f64);
        let ds = Dataset::new(y, w, x, vec!["x1".into()], "y", "w").unwrap();
        let ds = standardize(&ds).unwrap();
        let fit = fit(&ds, &GpsModelSpec::intercept_only()).unwrap();
        for i in 0..n {
            for l in 0..3 {
                assert_relative_eq!(fit.gps[(i, l)], 1.0 / 3.0, epsilon = 1e-9);
            }
        }
        assert!(fit.converged);
    }

    #[test]
    fn gps_rows_sum_to_one_in_open_interval() {
        let ds = synthetic(400, 3, 4, 11);
        let fit = fit(&ds, &GpsModelSpec::new([0, 1, 2, 3])).unwrap();
        for i in 0..ds.n {
            let row_sum: f64 = (0..3).map(|l| fit.gps[(i, l)]).sum();
            assert!((row_sum - 1.0).abs() < 1e-10);
            for l in 0..3 {
                let p = fit.gps[(i, l)];
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let ds = synthetic(250, 3, 2, 5);
        let spec = GpsModelSpec::new([0, 1]);
        let fitted = fit(&ds, &spec).unwrap();
        let h = 1e-5;
        for l in 0..2 {
            for c in 0..3 {
                let mut up = fitted.beta.clone();
                let mut down = fitted.beta.clone();
                up[(l, c)] += h;
                down[(l, c)] -= h;
                let fd = (log_likelihood(&ds, &spec, &up).unwrap()
                    - log_likelihood(&ds, &spec, &down).unwrap())
                    / (2.0 * h);
                // At the optimum the analytic gradient is ~0; the FD value
                // must agree to 1e-4.
                assert!(fd.abs() < 1e-4, "fd gradient {fd} too large at ({l},{c})");
            }
        }
    }

    #[test]
    fn vcov_is_symmetric_positive_semidefinite() {
        let ds = synthetic(300, 3, 3, 17);
        let fitted = fit(&ds, &GpsModelSpec::new([0, 1, 2])).unwrap();
        let k = fitted.vcov.nrows();
        for i in 0..k {
            for j in 0..k {
                assert!((fitted.vcov[(i, j)] - fitted.vcov[(j, i)]).abs() < 1e-8);
            }
        }
        let eigs = fitted.vcov.clone().symmetric_eigen().eigenvalues;
        for e in eigs.iter() {
            assert!(*e > -1e-8, "eigenvalue {e} negative");
        }
    }

    #[test]
    fn adding_an_irrelevant_covariate_never_lowers_loglik() {
        let ds = synthetic(350, 3, 4, 23);
        let small = fit(&ds, &GpsModelSpec::new([0])).unwrap();
        // Covariate 3 is pure noise for assignment.
        let big = fit(&ds, &GpsModelSpec::new([0, 3])).unwrap();
        assert!(big.loglik >= small.loglik - 1e-9);
    }

    #[test]
    fn predictions_invariant_to_reference_level_choice() {
        let ds = synthetic(300, 3, 2, 31);
        let spec = GpsModelSpec::new([0, 1]);
        let fit_a = fit(&ds, &spec).unwrap();

        // Relabel arms 1 <-> 2 and refit: probabilities for the same
        // physical arm must agree.
        let mut swapped = ds.clone();
        swapped.w =
            ds.w.iter()
                .map(|&l| match l {
                    1 => 2,
                    2 => 1,
                    other => other,
                })
                .collect();
        let fit_b = fit(&swapped, &spec).unwrap();
        for i in 0..ds.n {
            assert_relative_eq!(fit_a.gps[(i, 0)], fit_b.gps[(i, 1)], epsilon = 1e-8);
            assert_relative_eq!(fit_a.gps[(i, 1)], fit_b.gps[(i, 0)], epsilon = 1e-8);
            assert_relative_eq!(fit_a.gps[(i, 2)], fit_b.gps[(i, 2)], epsilon = 1e-8);
        }
    }

    #[test]
    fn predict_zero_beta_is_uniform() {
        let ds = synthetic(50, 4, 2, 41);
        let mut fitted = fit(&ds, &GpsModelSpec::new([0])).unwrap();
        fitted.beta.fill(0.0);
        let p = predict(&fitted, &[0.7]).unwrap();
        for l in 0..4 {
            assert_relative_eq!(p[l], 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn predict_saturates_without_overflow() {
        let ds = synthetic(50, 3, 1, 43);
        let mut fitted = fit(&ds, &GpsModelSpec::new([0])).unwrap();
        // Force an enormous linear predictor for level 2.
        fitted.beta[(0, 0)] = 0.0;
        fitted.beta[(0, 1)] = 1000.0;
        fitted.beta[(1, 0)] = 0.0;
        fitted.beta[(1, 1)] = 0.0;
        let p = predict(&fitted, &[5.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_relative_eq!(p[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn binary_case_is_the_logistic_sigmoid() {
        let ds = synthetic(200, 2, 1, 47);
        let fitted = fit(&ds, &GpsModelSpec::new([0])).unwrap();
        let x = 0.37;
        let p = predict(&fitted, &[x]).unwrap();
        let eta = fitted.beta[(0, 0)] + fitted.beta[(0, 1)] * x;
        let sigmoid = 1.0 / (1.0 + (-eta).exp());
        assert_relative_eq!(p[1], sigmoid, epsilon = 1e-12);
        assert_relative_eq!(p[0], 1.0 - sigmoid, epsilon = 1e-12);
    }

    #[test]
    fn predict_rejects_wrong_dimension() {
        let ds = synthetic(60, 2, 2, 53);
        let fitted = fit(&ds, &GpsModelSpec::new([0, 1])).unwrap();
        assert!(matches!(
            predict(&fitted, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn separable_data_errors_out() {
        // Arm is a deterministic threshold of the covariate: no MLE exists.
        let n = 40;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 - (n as f64 - 1.0) / 2.0);
        let w: Vec<usize> = (0..n)
            .map(|i| if x[(i, 0)] < 0.0 { 1 } else { 2 })
            .collect();
        let y = DVector::from_fn(n, |i, _| i as f64);
        let ds = Dataset::new(y, w, x, vec!["x1".into()], "y", "w").unwrap();
        let ds = standardize(&ds).unwrap();
        match fit(&ds, &GpsModelSpec::new([0])) {
            Err(Error::NonConvergence { .. }) => {}
            other => panic!("expected non-convergence on separable data, got {other:?}"),
        }
    }

    #[test]
    fn loglik_requires_matching_beta_shape() {
        let ds = synthetic(60, 3, 2, 59);
        let spec = GpsModelSpec::new([0]);
        let bad = DMatrix::zeros(2, 5);
        assert!(matches!(
            log_likelihood(&ds, &spec, &bad),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
