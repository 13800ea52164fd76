//! Small dense linear-algebra helpers shared by the statistical modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ordinary least squares via the normal equations.
///
/// `design` is the full design matrix (including any intercept column) and
/// `names` labels its columns for error reporting. On a rank-deficient
/// design the offending columns are identified by a greedy scan: columns are
/// admitted left to right while the Gram matrix stays positive definite, and
/// whatever cannot be admitted is reported as collinear.
pub fn ols(design: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
    let p = design.ncols();
    assert_eq!(names.len(), p, "one name per design column");
    if design.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: design.nrows(),
            got: y.len(),
        });
    }
    if design.nrows() < p {
        return Err(Error::TooFewObservations {
            min: p,
            got: design.nrows(),
        });
    }
    let gram = design.transpose() * design;
    let rhs = design.transpose() * y;
    match gram.clone().cholesky() {
        Some(chol) => Ok(chol.solve(&rhs)),
        None => Err(Error::RankDeficient {
            columns: collinear_columns(&gram, names),
        }),
    }
}

/// Identifies columns that break positive definiteness of a Gram matrix.
fn collinear_columns(gram: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let p = gram.nrows();
    let mut kept: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for (j, name) in names.iter().enumerate().take(p) {
        let mut trial = kept.clone();
        trial.push(j);
        let sub = gram.select_rows(trial.iter()).select_columns(trial.iter());
        if sub.cholesky().is_some() {
            kept.push(j);
        } else {
            bad.push(name.clone());
        }
    }
    if bad.is_empty() {
        // Cholesky failed on the full matrix but every leading addition
        // succeeded (borderline conditioning): blame the last column.
        bad.push(names[p - 1].clone());
    }
    bad
}

/// Sample covariance matrix of the columns of `x`, denominator n − 1.
pub fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    assert!(n >= 2, "covariance needs at least two rows");
    let means = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    centered.transpose() * centered / (n as f64 - 1.0)
}

/// 2-norm condition number of a symmetric matrix, via its singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Compensated (Neumaier) summation; used where exact identities are tested
/// against sums accumulated in a different order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
