//! Nearest-neighbor matching with replacement on a scalar score.
//!
//! For a target arm w, every unit is matched to the arm-w unit whose score
//! is closest to its own; units already in arm w match themselves at
//! distance zero. The matched unit's outcome and covariates serve as the
//! unit's imputed values under arm w. `k_count[j]` records how many times
//! arm-w unit j was chosen by units *outside* the arm — the convention under
//! which the imputed-sum identity
//!
//! ```text
//! Σ_i X̂_i(w) = Σ_i 1{W_i = w} (1 + K(i,w)) X_i
//! ```
//!
//! holds exactly (self-matches are not counted in K, each outside unit
//! contributes exactly one match).

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// The result of matching every unit into one arm.
#[derive(Debug, Clone)]
pub struct MatchSet {
    /// The target arm w.
    pub arm: usize,
    /// For each unit, the index of its arm-w match (itself when already
    /// in arm w).
    pub match_index: Vec<usize>,
    /// For each unit in arm w, how many outside units matched to it; zero
    /// for units not in arm w.
    pub k_count: Vec<usize>,
    /// Imputed outcomes Ŷ_i(w) = Y_{match_index\[i\]}.
    pub y_imputed: DVector<f64>,
    /// Imputed covariate rows X̂_i(w), n × d.
    pub x_imputed: DMatrix<f64>,
    /// The score vector that was matched on.
    pub gps_used: Vec<f64>,
}

/// Sorted view of one arm's scores used for single
/// nearest-neighbor queries: runs of tied scores collapsed to
/// (score, smallest unit index in the run).
struct ArmIndex {
    /// (score, smallest index with that score), one per distinct score.
    runs: Vec<(f64, usize)>,
}

/// The arm's (score, unit index) pairs, sorted.
fn arm_entries(ds: &Dataset, scores: &[f64], arm: usize) -> Result<Vec<(f64, usize)>> {
    let mut entries: Vec<(f64, usize)> = (0..ds.n)
        .filter(|&i| ds.w[i] == arm)
        .map(|i| (scores[i], i))
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyArm { arm });
    }
    entries.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    Ok(entries)
}

impl ArmIndex {
    fn build(ds: &Dataset, scores: &[f64], arm: usize) -> Result<ArmIndex> {
        let entries = arm_entries(ds, scores, arm)?;
        let mut runs: Vec<(f64, usize)> = Vec::with_capacity(entries.len());
        for &(s, i) in &entries {
            match runs.last() {
                Some(&(last, _)) if last == s => {}
                _ => runs.push((s, i)),
            }
        }
        Ok(ArmIndex { runs })
    }

    /// Arm unit nearest to `q`; ties in distance resolve to the smallest
    /// unit index.
    fn nearest(&self, q: f64) -> usize {
        let runs = &self.runs;
        let pos = runs.partition_point(|&(s, _)| s < q);
        let right = runs.get(pos);
        let left = if pos > 0 { Some(&runs[pos - 1]) } else { None };
        match (left, right) {
            (None, Some(&(_, idx))) => idx,
            (Some(&(_, idx)), None) => idx,
            (Some(&(ls, li)), Some(&(rs, ri))) => {
                let dl = q - ls;
                let dr = rs - q;
                if dl < dr {
                    li
                } else if dr < dl {
                    ri
                } else {
                    li.min(ri)
                }
            }
            (None, None) => unreachable!("arm is nonempty"),
        }
    }
}

fn validate_scores(ds: &Dataset, gps_w: &[f64]) -> Result<()> {
    if gps_w.len() != ds.n {
        return Err(Error::DimensionMismatch {
            expected: ds.n,
            got: gps_w.len(),
        });
    }
    if let Some(i) = gps_w.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteScore { index: i });
    }
    Ok(())
}

/// Matches every unit into `arm` on the scores `gps_w` and fills in the
/// imputed outcomes and covariates.
pub fn match_arm(ds: &Dataset, gps_w: &[f64], arm: usize) -> Result<MatchSet> {
    validate_scores(ds, gps_w)?;
    let index = ArmIndex::build(ds, gps_w, arm)?;

    let mut match_index = vec![0usize; ds.n];
    let mut k_count = vec![0usize; ds.n];
    for i in 0..ds.n {
        if ds.w[i] == arm {
            match_index[i] = i;
        } else {
            let m = index.nearest(gps_w[i]);
            match_index[i] = m;
            k_count[m] += 1;
        }
    }
    let y_imputed = DVector::from_fn(ds.n, |i, _| ds.y[match_index[i]]);
    let x_imputed = DMatrix::from_fn(ds.n, ds.d(), |i, j| ds.x[(match_index[i], j)]);
    Ok(MatchSet {
        arm,
        match_index,
        k_count,
        y_imputed,
        x_imputed,
        gps_used: gps_w.to_vec(),
    })
}

/// Column means of the imputed covariates, X̂_gpsm(w).
pub fn imputed_covariate_mean(ms: &MatchSet) -> DVector<f64> {
    let n = ms.x_imputed.nrows() as f64;
    DVector::from_fn(ms.x_imputed.ncols(), |j, _| {
        ms.x_imputed.column(j).sum() / n
    })
}

/// Pre-sorted view of one arm's scores, reusable across many
/// nearest-neighbor queries. Building sorts the arm once; each query is
/// then a binary search plus an outward walk, so callers that look up
/// neighbors for every unit should build one index per (arm, score
/// vector) instead of rebuilding per query.
pub struct NeighborIndex {
    arm: usize,
    /// (score, unit index), sorted ascending; ties sort by unit index.
    entries: Vec<(f64, usize)>,
    /// Unit indices of the arm, sorted, for O(log n) membership tests.
    units: Vec<usize>,
}

impl NeighborIndex {
    pub fn build(ds: &Dataset, gps_w: &[f64], arm: usize) -> Result<NeighborIndex> {
        validate_scores(ds, gps_w)?;
        let entries = arm_entries(ds, gps_w, arm)?;
        let mut units: Vec<usize> = entries.iter().map(|&(_, i)| i).collect();
        units.sort_unstable();
        Ok(NeighborIndex {
            arm,
            entries,
            units,
        })
    }

    pub fn arm(&self) -> usize {
        self.arm
    }

    /// Number of units in the indexed arm.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `l` indexed units whose scores are nearest `q`, optionally
    /// excluding one unit; distance ties resolve to smaller unit indices.
    /// Returned in (distance, index) order.
    pub fn nearest(&self, q: f64, l: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
        if l == 0 {
            return Err(Error::InvalidInput("need at least one neighbor".into()));
        }
        if !q.is_finite() {
            return Err(Error::InvalidInput("query score must be finite".into()));
        }
        let entries = &self.entries;
        let excluded = exclude.is_some_and(|e| self.units.binary_search(&e).is_ok());
        let available = entries.len() - usize::from(excluded);
        if available < l {
            return Err(Error::ArmTooSmall {
                arm: self.arm,
                needed: l,
                available,
            });
        }

        // Merge outward from the insertion point, collecting candidates in
        // nondecreasing distance order until the l-th distance cannot
        // improve, then pull in every remaining tie at that distance.
        let start = entries.partition_point(|&(s, _)| s < q);
        let mut left = start;
        let mut right = start;
        let mut cands: Vec<(f64, usize)> = Vec::with_capacity(l + 4);
        loop {
            let next_left = left.checked_sub(1).map(|li| (q - entries[li].0, li));
            let next_right = (right < entries.len()).then(|| (entries[right].0 - q, right));
            let take_left = match (next_left, next_right) {
                (Some((dl, _)), Some((dr, _))) => dl <= dr,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            let (dist, entry_pos) = if take_left {
                left -= 1;
                (q - entries[left].0, left)
            } else {
                right += 1;
                (entries[right - 1].0 - q, right - 1)
            };
            let unit = entries[entry_pos].1;
            if exclude != Some(unit) {
                cands.push((dist, unit));
            }
            if cands.len() >= l {
                let kth = cands[l - 1].0;
                let next_dist = [
                    left.checked_sub(1).map(|li| q - entries[li].0),
                    (right < entries.len()).then(|| entries[right].0 - q),
                ]
                .into_iter()
                .flatten()
                .fold(f64::INFINITY, f64::min);
                if next_dist > kth {
                    break;
                }
            }
        }
        cands.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        cands.truncate(l);
        Ok(cands.into_iter().map(|(_, idx)| idx).collect())
    }
}

/// The `l` arm-w units whose scores are nearest `gps_w[i]`, optionally
/// excluding unit i itself; distance ties resolve to smaller unit indices.
/// Returned in (distance, index) order. Convenience wrapper that builds a
/// fresh [`NeighborIndex`] per call; batch callers should build the index
/// once and call [`NeighborIndex::nearest`] directly.
pub fn nn_in_arm(
    ds: &Dataset,
    gps_w: &[f64],
    arm: usize,
    i: usize,
    l: usize,
    exclude_self: bool,
) -> Result<Vec<usize>> {
    let index = NeighborIndex::build(ds, gps_w, arm)?;
    index.nearest(gps_w[i], l, exclude_self.then_some(i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    /// A dataset where only scores, arms, and covariates matter.
    fn toy(w: Vec<usize>, x_col: Vec<f64>) -> Dataset {
        let n = w.len();
        Dataset::new(
            DVector::from_fn(n, |i, _| 10.0 + i as f64),
            w,
            DMatrix::from_column_slice(n, 1, &x_col),
            vec!["x1".into()],
            "y",
            "w",
        )
        .unwrap()
    }

    /// O(n²) referee: scan every arm unit, strict improvement keeps the
    /// earliest (smallest-index) minimizer.
    fn nearest_brute(ds: &Dataset, scores: &[f64], arm: usize, i: usize) -> usize {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..ds.n {
            if ds.w[j] != arm {
                continue;
            }
            let d = (scores[j] - scores[i]).abs();
            best = match best {
                None => Some((d, j)),
                Some((bd, _)) if d < bd => Some((d, j)),
                keep => keep,
            };
        }
        best.unwrap().1
    }

    #[test]
    fn forced_match_counts_both_outsiders() {
        let ds = toy(vec![1, 2, 2], vec![0.5, 0.1, 0.9]);
        let scores = [0.5, 0.1, 0.9];
        let ms = match_arm(&ds, &scores, 1).unwrap();
        assert_eq!(ms.match_index, vec![0, 0, 0]);
        assert_eq!(ms.k_count, vec![2, 0, 0]);
        assert_eq!(ms.y_imputed.as_slice(), &[10.0, 10.0, 10.0]);
    }

    #[test]
    fn self_match_reproduces_own_outcome() {
        let ds = toy(vec![1, 2, 1, 2], vec![0.2, 0.4, 0.6, 0.8]);
        let scores = [0.2, 0.4, 0.6, 0.8];
        let ms = match_arm(&ds, &scores, 1).unwrap();
        assert_eq!(ms.match_index[0], 0);
        assert_eq!(ms.match_index[2], 2);
        assert_eq!(ms.y_imputed[0], ds.y[0]);
        assert_eq!(ms.y_imputed[2], ds.y[2]);
        // K counts only the two outside units.
        assert_eq!(ms.k_count.iter().sum::<usize>(), 2);
    }

    #[test]
    fn four_unit_hand_example() {
        // Arms (1,1,2,2) with arm-1 scores {0.1, 0.2, 0.6, 0.7}: both arm-2
        // units sit nearer 0.2 than 0.1, so unit 1 absorbs both matches.
        let ds = toy(vec![1, 1, 2, 2], vec![3.0, 7.0, 100.0, 200.0]);
        let scores = [0.1, 0.2, 0.6, 0.7];
        let ms = match_arm(&ds, &scores, 1).unwrap();
        assert_eq!(ms.match_index, vec![0, 1, 1, 1]);
        assert_eq!(ms.k_count, vec![0, 2, 0, 0]);
        // Imputed covariate mean = (3 + 7·3) / 4 = 6.
        let mean = imputed_covariate_mean(&ms);
        assert_relative_eq!(mean[0], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn imputed_sum_identity_holds_exactly() {
        let ds = toy(
            vec![1, 2, 3, 1, 2, 3, 1, 2],
            vec![1.5, -2.0, 0.25, 3.75, -1.125, 2.5, 0.875, -3.0],
        );
        let scores = [0.12, 0.55, 0.31, 0.44, 0.27, 0.68, 0.51, 0.09];
        for arm in 1..=3 {
            let ms = match_arm(&ds, &scores, arm).unwrap();
            let lhs: f64 = (0..ds.n).map(|i| ms.x_imputed[(i, 0)]).sum();
            let rhs: f64 = (0..ds.n)
                .filter(|&i| ds.w[i] == arm)
                .map(|i| (1.0 + ms.k_count[i] as f64) * ds.x[(i, 0)])
                .sum();
            assert!((lhs - rhs).abs() < 1e-12, "arm {arm}: {lhs} vs {rhs}");
            // Every outside unit matched exactly once.
            let k_total: usize = ms.k_count.iter().sum();
            assert_eq!(k_total, ds.n - ds.arm_size(arm));
        }
    }

    #[test]
    fn distance_ties_pick_the_smallest_index() {
        // Dyadic scores so the tie distances are exact in binary floating
        // point. Arm-1 units 1 and 3 share score 0.5; the query at 0.5 must
        // take unit 1. Unit 4 queries from 0.375 with arm units at 0.25 and
        // 0.5 exactly 0.125 away on each side; the smaller index 0 wins.
        let ds = toy(vec![1, 1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let scores = [0.25, 0.5, 0.5, 0.5, 0.375];
        let ms = match_arm(&ds, &scores, 1).unwrap();
        assert_eq!(ms.match_index[2], 1, "exact-score tie takes smaller index");
        assert_eq!(ms.match_index[4], 0, "equidistant tie takes smaller index");
    }

    #[test]
    fn matches_brute_force_on_awkward_duplicates() {
        let w = vec![1, 2, 1, 2, 1, 2, 1, 1, 2, 2, 1, 2];
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let ds = toy(w, x);
        // Scores quantized to one decimal to force plenty of exact ties.
        let scores: Vec<f64> = (0..12).map(|i| ((i * 7 % 10) as f64) / 10.0).collect();
        let ms = match_arm(&ds, &scores, 1).unwrap();
        for i in 0..ds.n {
            if ds.w[i] != 1 {
                assert_eq!(ms.match_index[i], nearest_brute(&ds, &scores, 1, i));
            }
        }
    }

    #[test]
    fn empty_arm_and_bad_scores_error() {
        let ds = toy(vec![1, 1, 2], vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            match_arm(&ds, &[0.1, 0.2, 0.3], 5),
            Err(Error::EmptyArm { arm: 5 })
        ));
        assert!(matches!(
            match_arm(&ds, &[0.1, f64::NAN, 0.3], 1),
            Err(Error::NonFiniteScore { index: 1 })
        ));
        assert!(matches!(
            match_arm(&ds, &[0.1, 0.2], 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn nn_self_is_nearest_when_not_excluded() {
        let ds = toy(vec![1, 1, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let scores = [0.1, 0.5, 0.3, 0.9];
        let nn = nn_in_arm(&ds, &scores, 1, 1, 1, false).unwrap();
        assert_eq!(nn, vec![1]);
    }

    #[test]
    fn nn_two_of_three_matches_sort_oracle() {
        let ds = toy(vec![1, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let scores = [0.10, 0.42, 0.60, 0.45];
        // Distances from unit 3 (query 0.45): 0.35, 0.03, 0.15.
        let nn = nn_in_arm(&ds, &scores, 1, 3, 2, false).unwrap();
        assert_eq!(nn, vec![1, 2]);
    }

    #[test]
    fn nn_excluding_self_errors_when_arm_is_exhausted() {
        let ds = toy(vec![1, 1, 2], vec![1.0, 2.0, 3.0]);
        let scores = [0.1, 0.2, 0.3];
        match nn_in_arm(&ds, &scores, 1, 0, 2, true) {
            Err(Error::ArmTooSmall {
                arm,
                needed,
                available,
            }) => {
                assert_eq!((arm, needed, available), (1, 2, 1));
            }
            other => panic!("expected arm-too-small, got {other:?}"),
        }
    }

    #[test]
    fn nn_distance_ties_prefer_smaller_indices() {
        // Dyadic scores make the flanking distances exactly equal: units
        // 0,1,2 in the arm at 0.25, 0.5, 0.75, query 0.5 with l=2 sees
        // units 0 and 2 both 0.25 away; the smaller index wins.
        let ds = toy(vec![1, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let scores = [0.25, 0.5, 0.75, 0.5];
        let nn = nn_in_arm(&ds, &scores, 1, 3, 2, false).unwrap();
        assert_eq!(nn, vec![1, 0]);
    }

    #[test]
    fn reused_index_answers_every_query_like_fresh_lookups() {
        let ds = toy(
            vec![1, 2, 1, 1, 2, 1, 2, 1],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        );
        let scores = [0.81, 0.12, 0.25, 0.25, 0.99, 0.40, 0.07, 0.63];
        let index = NeighborIndex::build(&ds, &scores, 1).unwrap();
        assert_eq!((index.arm(), index.len()), (1, 5));
        for i in 0..ds.n {
            for l in 1..=4 {
                for excl in [false, true] {
                    let fresh = nn_in_arm(&ds, &scores, 1, i, l, excl);
                    let reused = index.nearest(scores[i], l, excl.then_some(i));
                    match (fresh, reused) {
                        (Ok(a), Ok(b)) => assert_eq!(a, b, "unit {i} l {l} excl {excl}"),
                        (Err(a), Err(b)) => {
                            assert_eq!(format!("{a}"), format!("{b}"), "unit {i} l {l}")
                        }
                        (a, b) => panic!("disagreement at unit {i}: {a:?} vs {b:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn excluding_a_unit_outside_the_arm_changes_nothing() {
        let ds = toy(vec![1, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let scores = [0.25, 0.5, 0.75, 0.5];
        let index = NeighborIndex::build(&ds, &scores, 1).unwrap();
        // Unit 3 is in arm 2, so excluding it neither shrinks the budget
        // nor alters the result; the full arm is still returnable.
        assert_eq!(
            index.nearest(0.5, 3, Some(3)).unwrap(),
            index.nearest(0.5, 3, None).unwrap()
        );
        assert!(matches!(
            index.nearest(0.5, 4, Some(3)),
            Err(Error::ArmTooSmall {
                arm: 1,
                needed: 4,
                available: 3,
            })
        ));
        assert!(index.nearest(f64::NAN, 1, None).is_err());
        assert!(index.nearest(0.5, 0, None).is_err());
    }
}
