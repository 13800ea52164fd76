//! Observational data with a multi-level treatment: loading, validation,
//! dummy coding, and covariate standardization.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A validated sample of `n` units with outcome, treatment level in
/// `1..=t`, and an `n × d` covariate matrix.
///
/// Construct through [`Dataset::new`] or [`load_csv`]; both enforce the
/// invariants (every level populated, no constant covariate, finite values).
/// The struct is immutable after construction and safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n: usize,
    /// Number of treatment levels; labels run 1..=t.
    pub t: usize,
    pub y: DVector<f64>,
    pub w: Vec<usize>,
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    /// Whether covariates have been transformed to mean 0, sd 1.
    pub standardized: bool,
    /// Per-covariate means removed by standardization (if applied).
    pub center: Option<Vec<f64>>,
    /// Per-covariate sample standard deviations divided out (if applied).
    pub scale: Option<Vec<f64>>,
    /// Column names used when writing the outcome and treatment back out.
    pub outcome_name: String,
    pub treatment_name: String,
}

/// Covariate taxonomy used by the simulation lab and reports.
///
/// Estimators never consult this label; it exists to mark which columns of a
/// synthetic design affect treatment, outcome, both, or neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateRole {
    /// Affects both treatment assignment and the outcome.
    Confounder,
    /// Affects treatment assignment only.
    Instrument,
    /// Affects the outcome only.
    Precision,
    /// Affects neither.
    Noise,
    Unknown,
}

/// Column mapping for [`load_csv`]: which header names hold the outcome and
/// treatment, which columns to drop, and which string columns to dummy-code.
/// Every remaining column is treated as a numeric covariate.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub outcome: String,
    pub treatment: String,
    pub exclude: Vec<String>,
    pub categorical: Vec<String>,
}

impl Dataset {
    /// Validates and assembles a dataset.
    ///
    /// `t` is inferred as the largest treatment label; every level `1..=t`
    /// must be populated. Covariate columns must be non-constant and all
    /// values finite.
    pub fn new(
        y: DVector<f64>,
        w: Vec<usize>,
        x: DMatrix<f64>,
        names: Vec<String>,
        outcome_name: &str,
        treatment_name: &str,
    ) -> Result<Dataset> {
        let n = y.len();
        if w.len() != n || x.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: if w.len() != n { w.len() } else { x.nrows() },
            });
        }
        if names.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: x.ncols(),
                got: names.len(),
            });
        }
        if n < 2 {
            return Err(Error::TooFewObservations { min: 2, got: n });
        }
        if let Some(row) = w.iter().position(|&l| l == 0) {
            return Err(Error::BadTreatmentLabel {
                row: row + 1,
                value: "0".into(),
            });
        }
        let t = *w.iter().max().expect("n >= 2");
        if t < 2 {
            return Err(Error::InvalidInput(
                "need at least two treatment levels".into(),
            ));
        }
        let mut counts = vec![0usize; t + 1];
        for &l in &w {
            counts[l] += 1;
        }
        let missing: Vec<usize> = (1..=t).filter(|&l| counts[l] == 0).collect();
        if !missing.is_empty() {
            return Err(Error::MissingTreatmentLevel { t, missing });
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "non-finite value in outcome or covariates".into(),
            ));
        }
        {
            let mut seen = BTreeSet::new();
            for name in &names {
                if !seen.insert(name.as_str()) {
                    return Err(Error::Config(format!("duplicate covariate name {name:?}")));
                }
                if name == outcome_name || name == treatment_name {
                    return Err(Error::Config(format!(
                        "covariate name {name:?} collides with the outcome or treatment column"
                    )));
                }
            }
        }
        for (j, name) in names.iter().enumerate() {
            let col = x.column(j);
            let mean = col.sum() / n as f64;
            let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            if ss == 0.0 {
                return Err(Error::ZeroVariance {
                    column: name.clone(),
                });
            }
        }
        Ok(Dataset {
            n,
            t,
            y,
            w,
            x,
            names,
            standardized: false,
            center: None,
            scale: None,
            outcome_name: outcome_name.to_string(),
            treatment_name: treatment_name.to_string(),
        })
    }

    /// Number of covariates.
    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Indices of units assigned to `arm`, in row order.
    pub fn arm_indices(&self, arm: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.w[i] == arm).collect()
    }

    /// Number of units in `arm`.
    pub fn arm_size(&self, arm: usize) -> usize {
        self.w.iter().filter(|&&l| l == arm).count()
    }

    /// Per-covariate sample means (length d).
    pub fn column_means(&self) -> DVector<f64> {
        DVector::from_fn(self.d(), |j, _| self.x.column(j).sum() / self.n as f64)
    }
}

/// Transforms every covariate to mean 0 and sample standard deviation 1
/// (denominator n − 1), recording the centers and scales for reporting.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    if ds.standardized {
        return Err(Error::AlreadyStandardized);
    }
    let n = ds.n as f64;
    let mut x = ds.x.clone();
    let mut center = Vec::with_capacity(ds.d());
    let mut scale = Vec::with_capacity(ds.d());
    for j in 0..ds.d() {
        let mean = ds.x.column(j).sum() / n;
        let ss: f64 = ds.x.column(j).iter().map(|v| (v - mean).powi(2)).sum();
        let sd = (ss / (n - 1.0)).sqrt();
        if sd == 0.0 || !sd.is_finite() {
            return Err(Error::ZeroVariance {
                column: ds.names[j].clone(),
            });
        }
        for i in 0..ds.n {
            x[(i, j)] = (ds.x[(i, j)] - mean) / sd;
        }
        center.push(mean);
        scale.push(sd);
    }
    Ok(Dataset {
        x,
        standardized: true,
        center: Some(center),
        scale: Some(scale),
        ..ds.clone()
    })
}

/// Reads a CSV file (UTF-8, header row mandatory) into a validated
/// [`Dataset`].
///
/// The treatment column may hold positive integers — which are used as
/// levels directly and must cover `1..=t` — or arbitrary labels, which are
/// mapped to `1..=t` in lexicographic order. String covariate columns listed
/// in `schema.categorical` are expanded to 0/1 indicators, dropping the
/// lexicographically smallest level as the reference; the indicator for
/// level `v` of column `c` is named `c_v`. Missing or non-finite values are
/// rejected, not imputed.
pub fn load_csv<P: AsRef<Path>>(path: P, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let outcome_idx = find(&schema.outcome)?;
    let treatment_idx = find(&schema.treatment)?;
    for name in schema.exclude.iter().chain(&schema.categorical) {
        find(name)?;
    }

    // Covariate source columns, in header order.
    let cov_cols: Vec<usize> = (0..headers.len())
        .filter(|&j| {
            j != outcome_idx && j != treatment_idx && !schema.exclude.contains(&headers[j])
        })
        .collect();

    let mut y_raw: Vec<f64> = Vec::new();
    let mut w_raw: Vec<String> = Vec::new();
    let mut cov_raw: Vec<Vec<String>> = vec![Vec::new(); cov_cols.len()];
    for (rec_idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = rec_idx + 1;
        let cell = |j: usize| record.get(j).unwrap_or("").trim().to_string();

        let y_cell = cell(outcome_idx);
        y_raw.push(parse_numeric(&y_cell, row, &schema.outcome)?);

        let w_cell = cell(treatment_idx);
        if w_cell.is_empty() {
            return Err(Error::MissingValue {
                row,
                column: schema.treatment.clone(),
            });
        }
        w_raw.push(w_cell);

        for (k, &j) in cov_cols.iter().enumerate() {
            cov_raw[k].push(cell(j));
        }
    }
    let n = y_raw.len();
    if n == 0 {
        return Err(Error::TooFewObservations { min: 2, got: 0 });
    }

    let w = parse_treatment(&w_raw)?;

    // Expand covariate columns: numeric columns pass through, categorical
    // columns become indicator blocks.
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (k, &j) in cov_cols.iter().enumerate() {
        let col_name = &headers[j];
        let raw = &cov_raw[k];
        if schema.categorical.contains(col_name) {
            let mut levels: Vec<String> = Vec::new();
            for (i, v) in raw.iter().enumerate() {
                if v.is_empty() {
                    return Err(Error::MissingValue {
                        row: i + 1,
                        column: col_name.clone(),
                    });
                }
                if !levels.contains(v) {
                    levels.push(v.clone());
                }
            }
            levels.sort();
            if levels.len() < 2 {
                return Err(Error::ZeroVariance {
                    column: col_name.clone(),
                });
            }
            for level in &levels[1..] {
                columns.push(
                    raw.iter()
                        .map(|v| if v == level { 1.0 } else { 0.0 })
                        .collect(),
                );
                names.push(format!("{col_name}_{level}"));
            }
        } else {
            let mut parsed = Vec::with_capacity(n);
            for (i, v) in raw.iter().enumerate() {
                parsed.push(parse_numeric(v, i + 1, col_name)?);
            }
            columns.push(parsed);
            names.push(col_name.clone());
        }
    }

    let d = columns.len();
    let x = DMatrix::from_fn(n, d, |i, j| columns[j][i]);
    Dataset::new(
        DVector::from_vec(y_raw),
        w,
        x,
        names,
        &schema.outcome,
        &schema.treatment,
    )
}

/// Writes a dataset back to CSV: covariate columns first (current values,
/// standardized or not), then the outcome and treatment columns under their
/// recorded names. Floats are printed in shortest round-trip form, so
/// `load_csv(write_csv(ds))` reproduces every field bit-exactly.
pub fn write_csv<P: AsRef<Path>>(ds: &Dataset, path: P) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<String> = ds.names.clone();
    header.push(ds.outcome_name.clone());
    header.push(ds.treatment_name.clone());
    writer.write_record(&header)?;
    for i in 0..ds.n {
        let mut record: Vec<String> = Vec::with_capacity(ds.d() + 2);
        for j in 0..ds.d() {
            record.push(format!("{}", ds.x[(i, j)]));
        }
        record.push(format!("{}", ds.y[i]));
        record.push(format!("{}", ds.w[i]));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

fn parse_numeric(cell: &str, row: usize, column: &str) -> Result<f64> {
    if cell.is_empty() {
        return Err(Error::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        // Parseable but non-finite (NaN, inf) counts as missing data.
        Ok(_) => Err(Error::MissingValue {
            row,
            column: column.to_string(),
        }),
        Err(_) => Err(Error::NonNumeric {
            row,
            column: column.to_string(),
            value: cell.to_string(),
        }),
    }
}

/// Maps raw treatment cells to levels `1..=t`. All-integer columns are used
/// directly (and must cover every level up to their maximum); anything else
/// is treated as opaque labels ordered lexicographically.
fn parse_treatment(raw: &[String]) -> Result<Vec<usize>> {
    let ints: Option<Vec<i64>> = raw.iter().map(|v| v.parse::<i64>().ok()).collect();
    if let Some(ints) = ints {
        let mut w = Vec::with_capacity(raw.len());
        for (i, &v) in ints.iter().enumerate() {
            if v < 1 {
                return Err(Error::BadTreatmentLabel {
                    row: i + 1,
                    value: raw[i].clone(),
                });
            }
            w.push(v as usize);
        }
        Ok(w)
    } else {
        let mut levels: Vec<&String> = raw.iter().collect();
        levels.sort();
        levels.dedup();
        Ok(raw
            .iter()
            .map(|v| levels.binary_search(&v).expect("level present") + 1)
            .collect())
    }
}
