//! Randomized property checks for the matching core and dataset I/O:
//! agreement with an O(n²) reference matcher over hundreds of instances,
//! the imputed-sum/K-count bookkeeping identities, equivariance under unit
//! permutation, and exact CSV round-trips.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use gpsmatch::dataset::{self, CsvSchema, Dataset};
use gpsmatch::matching::{self, MatchSet};
use gpsmatch::seeding;

/// Random instance: n units over t arms (each arm nonempty), d covariates,
/// and a score vector. `dyadic` snaps scores to a coarse power-of-two grid
/// so exact distance ties occur constantly.
fn random_instance(seed: u64, max_n: usize, max_t: usize, dyadic: bool) -> (Dataset, Vec<f64>) {
    let mut rng = seeding::rng_for(seed, 0);
    let t = rng.random_range(2..=max_t);
    let n = rng.random_range((2 * t).max(4)..=max_n);
    let d = rng.random_range(1..=3);

    let mut w: Vec<usize> = (1..=t).collect();
    while w.len() < n {
        w.push(rng.random_range(1..=t));
    }
    w.shuffle(&mut rng);

    let mut x = DMatrix::zeros(n, d);
    for j in 0..d {
        loop {
            for i in 0..n {
                x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
            let col = x.column(j);
            let mean = col.mean();
            if col.iter().any(|v| (v - mean).abs() > 1e-9) {
                break;
            }
        }
    }
    let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let names = (0..d).map(|j| format!("x{}", j + 1)).collect();
    let ds = Dataset::new(y, w, x, names, "y", "w").unwrap();

    let scores: Vec<f64> = (0..n)
        .map(|_| {
            if dyadic {
                // Multiples of 1/32 in (0,1): differences are exact in
                // binary floating point, so intended ties really tie.
                rng.random_range(1..32) as f64 / 32.0
            } else {
                rng.random_range(0.001..0.999)
            }
        })
        .collect();
    (ds, scores)
}

/// Reference matcher: units already in the arm keep themselves (the
/// convention that makes the K-count identity exact); outside units scan
/// every arm unit for the smallest distance, breaking ties toward the
/// smallest index.
fn brute_match(ds: &Dataset, scores: &[f64], arm: usize, i: usize) -> usize {
    if ds.w[i] == arm {
        return i;
    }
    let mut best: Option<(f64, usize)> = None;
    for j in 0..ds.n {
        if ds.w[j] != arm {
            continue;
        }
        let dist = (scores[j] - scores[i]).abs();
        let better = match best {
            None => true,
            Some((bd, bj)) => dist < bd || (dist == bd && j < bj),
        };
        if better {
            best = Some((dist, j));
        }
    }
    best.unwrap().1
}

#[test]
fn matcher_agrees_with_the_reference_on_500_instances() {
    for seed in 0..500u64 {
        let (ds, scores) = random_instance(seed, 50, 4, seed % 2 == 0);
        for arm in 1..=ds.t {
            let ms = matching::match_arm(&ds, &scores, arm).unwrap();
            for i in 0..ds.n {
                let expect = brute_match(&ds, &scores, arm, i);
                assert_eq!(
                    ms.match_index[i], expect,
                    "seed {seed}, arm {arm}, unit {i}"
                );
                assert_eq!(ms.y_imputed[i], ds.y[expect]);
            }
        }
    }
}

/// Σ_i X̂_i(w) = Σ_{j: W_j = w} (1 + K(j,w))·X_j — the imputed total is
/// exactly the K-weighted donor total — and the K counts distribute the
/// n − n_w outside units, one match each.
fn check_identities(ds: &Dataset, ms: &MatchSet, arm: usize) {
    let n_w = ds.arm_size(arm);
    let mut k_sum = 0usize;
    for j in 0..ds.n {
        if ds.w[j] == arm {
            k_sum += ms.k_count[j];
        } else {
            assert_eq!(ms.k_count[j], 0, "outside unit carries a K count");
        }
    }
    assert_eq!(k_sum, ds.n - n_w, "K counts must cover every outside unit");

    for j in 0..ds.d() {
        let imputed_total: f64 = (0..ds.n).map(|i| ms.x_imputed[(i, j)]).sum();
        let weighted_total: f64 = (0..ds.n)
            .filter(|&u| ds.w[u] == arm)
            .map(|u| (1.0 + ms.k_count[u] as f64) * ds.x[(u, j)])
            .sum();
        let scale = imputed_total.abs().max(weighted_total.abs()).max(1.0);
        assert!(
            (imputed_total - weighted_total).abs() <= 1e-12 * scale,
            "column {j}: {imputed_total} vs {weighted_total}"
        );
    }

    // The mean helper is the imputed total over n.
    let mean = matching::imputed_covariate_mean(ms);
    for j in 0..ds.d() {
        let direct: f64 = (0..ds.n).map(|i| ms.x_imputed[(i, j)]).sum::<f64>() / ds.n as f64;
        assert!((mean[j] - direct).abs() <= 1e-14 * direct.abs().max(1.0));
    }
}

#[test]
fn bookkeeping_identities_hold_on_300_instances() {
    for seed in 1000..1300u64 {
        let (ds, scores) = random_instance(seed, 60, 4, seed % 3 == 0);
        for arm in 1..=ds.t {
            let ms = matching::match_arm(&ds, &scores, arm).unwrap();
            check_identities(&ds, &ms, arm);
        }
    }
}

/// With all pairwise distances distinct the match is unique, so permuting
/// the units permutes the matches.
#[test]
fn matching_is_equivariant_under_unit_permutation() {
    let mut checked = 0;
    for seed in 2000..2120u64 {
        let (ds, scores) = random_instance(seed, 40, 3, false);

        // Skip instances where some query sees a tied pair of distances;
        // continuous scores make this rare.
        let mut ambiguous = false;
        'outer: for arm in 1..=ds.t {
            for i in 0..ds.n {
                let mut dists: Vec<f64> = (0..ds.n)
                    .filter(|&j| ds.w[j] == arm)
                    .map(|j| (scores[j] - scores[i]).abs())
                    .collect();
                dists.sort_by(f64::total_cmp);
                if dists.windows(2).any(|p| p[0] == p[1]) {
                    ambiguous = true;
                    break 'outer;
                }
            }
        }
        if ambiguous {
            continue;
        }
        checked += 1;

        let mut rng = seeding::rng_for(seed, 99);
        let mut perm: Vec<usize> = (0..ds.n).collect();
        perm.shuffle(&mut rng); // new position k holds old unit perm[k]
        let mut pos_of = vec![0usize; ds.n];
        for (k, &old) in perm.iter().enumerate() {
            pos_of[old] = k;
        }

        let xp = DMatrix::from_fn(ds.n, ds.d(), |k, j| ds.x[(perm[k], j)]);
        let yp = DVector::from_fn(ds.n, |k, _| ds.y[perm[k]]);
        let wp: Vec<usize> = perm.iter().map(|&old| ds.w[old]).collect();
        let sp: Vec<f64> = perm.iter().map(|&old| scores[old]).collect();
        let dsp = Dataset::new(yp, wp, xp, ds.names.clone(), "y", "w").unwrap();

        for arm in 1..=ds.t {
            let base = matching::match_arm(&ds, &scores, arm).unwrap();
            let permuted = matching::match_arm(&dsp, &sp, arm).unwrap();
            for (k, &old) in perm.iter().enumerate() {
                assert_eq!(
                    permuted.match_index[k], pos_of[base.match_index[old]],
                    "seed {seed}, arm {arm}, unit {old}"
                );
                assert_eq!(permuted.k_count[k], base.k_count[old]);
            }
        }
    }
    assert!(checked >= 100, "only {checked} unambiguous instances");
}

/// In-arm units always keep their own observed outcome, even under score
/// ties — self-matches never route through a sibling.
#[test]
fn in_arm_units_match_themselves() {
    for seed in 3000..3050u64 {
        let (ds, scores) = random_instance(seed, 40, 4, seed % 2 == 0);
        for arm in 1..=ds.t {
            let ms = matching::match_arm(&ds, &scores, arm).unwrap();
            for i in 0..ds.n {
                if ds.w[i] == arm {
                    assert_eq!(ms.match_index[i], i);
                    assert_eq!(ms.y_imputed[i], ds.y[i]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Writing a dataset to CSV and loading it back reproduces it exactly:
    /// the writer emits shortest round-trip float representations.
    #[test]
    fn csv_round_trip_is_exact(seed in 0u64..10_000) {
        let (ds, _) = random_instance(seed, 30, 3, false);
        let dir = std::env::temp_dir().join(format!(
            "gpsmatch-roundtrip-{}-{}",
            std::process::id(),
            seed
        ));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.csv");
        dataset::write_csv(&ds, &path).unwrap();
        let schema = CsvSchema {
            outcome: "y".into(),
            treatment: "w".into(),
            exclude: vec![],
            categorical: vec![],
        };
        let back = dataset::load_csv(&path, &schema).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();

        prop_assert_eq!(&back.names, &ds.names);
        prop_assert_eq!(&back.w, &ds.w);
        prop_assert_eq!(back.t, ds.t);
        prop_assert_eq!(&back.y, &ds.y);
        prop_assert_eq!(&back.x, &ds.x);
        prop_assert!(!back.standardized);
    }

    /// Matching is scale- and shift-equivariant in the scores: an affine
    /// map with positive slope preserves nearest neighbors when distance
    /// orderings are strict.
    #[test]
    fn positive_affine_score_maps_preserve_matches(
        seed in 0u64..5_000,
        scale in 0.25f64..4.0,
        shift in -2.0f64..2.0,
    ) {
        let (ds, scores) = random_instance(seed, 30, 3, false);
        // Powers of two make the affine map exact in floating point, so
        // strict comparisons survive the transformation.
        let scale = (scale.log2().round()).exp2();
        let mapped: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
        for arm in 1..=ds.t {
            let a = matching::match_arm(&ds, &scores, arm).unwrap();
            let b = matching::match_arm(&ds, &mapped, arm).unwrap();
            prop_assert_eq!(&a.match_index, &b.match_index);
        }
    }
}
