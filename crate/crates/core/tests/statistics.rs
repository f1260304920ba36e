mod common;

use common::*;
use diffid_core::dataset::{compute_identity_cdf, mean_images_per_identity, stats_report, StatsOptions};
use diffid_core::pretrain::{fs_keep, ss_keep, subsample, SubsetMode, SubsetSpec};
use rand::Rng;

#[test]
fn stats_match_group_by() {
    for seed in 0..100 {
        let m = random_manifest(seed);
        let opts = StatsOptions {
            range: (10, 40),
            above: 25,
        };
        let got = stats_report(&m, &opts).unwrap();
        let want = brute_stats(&m, opts.range, opts.above);
        assert_eq!(got.images, want.images);
        assert_eq!(got.identities, want.identities);
        assert_eq!(got.in_range, want.in_range);
        assert_eq!(got.above_count, want.above);
        assert_eq!(got.range_share, want.in_range as f64 / want.identities as f64);
        let per: Vec<(String, (usize, usize))> = got
            .per_source
            .iter()
            .map(|(k, s)| (k.clone(), (s.images, s.identities)))
            .collect();
        assert_eq!(per, want.per_source.into_iter().collect::<Vec<_>>());
    }
}

#[test]
fn cdf_matches_group_by() {
    for seed in 0..100 {
        let m = random_manifest(seed);
        let want = brute_stats(&m, (0, 0), 0);
        let xs: Vec<u64> = (0..=65).step_by(5).collect();
        let curve = compute_identity_cdf(&m, &xs).unwrap();
        assert_eq!(curve.points.len(), xs.len());
        for ((x, y), &tx) in curve.points.iter().zip(&xs) {
            assert_eq!(*x, tx);
            assert_eq!(*y, brute_cdf_point(&want.counts, tx));
        }
        let ys: Vec<f64> = curve.points.iter().map(|p| p.1).collect();
        assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn long_tail_manifest_reproduces_published_shares() {
    let counts = long_tail_counts(1);
    assert_eq!(counts.len(), DIFF_PERSON_IDENTITIES);
    assert_eq!(counts.iter().sum::<usize>(), DIFF_PERSON_IMAGES);
    let m = manifest_from_counts(&counts);
    let r = stats_report(&m, &StatsOptions::default()).unwrap();
    assert!((r.range_share - 0.80).abs() <= 0.02, "{}", r.range_share);
    assert!((r.above_share - 0.70).abs() <= 0.02, "{}", r.above_share);
    assert!((r.mean_per_identity - 149.9).abs() <= 0.05);
}

#[test]
fn published_totals_mean() {
    let m = mean_images_per_identity(DIFF_PERSON_IMAGES, DIFF_PERSON_IDENTITIES);
    assert!((m - 149.9).abs() <= 0.05, "{m}");
}

#[test]
fn subsampling_counts_follow_rounding_rules() {
    for seed in 0..100 {
        let m = random_manifest(seed);
        let f = rng(seed + 1000).random_range(1..=9) as f64 / 10.0;
        let before = brute_stats(&m, (0, 0), 0);

        let fs = subsample(&m, &SubsetSpec { mode: SubsetMode::Fs, fraction: f, seed }).unwrap();
        let after = brute_stats(&fs, (0, 0), 0);
        assert_eq!(after.identities, before.identities);
        for (c_before, c_after) in before.counts.iter().zip(&after.counts) {
            let want = ((f * *c_before as f64 - 1e-9).ceil() as usize).max(1);
            assert_eq!(*c_after, want, "fs seed {seed}");
        }

        let ss = subsample(&m, &SubsetSpec { mode: SubsetMode::Ss, fraction: f, seed }).unwrap();
        let after = brute_stats(&ss, (0, 0), 0);
        let want = ((f * before.identities as f64 + 1e-9).floor() as usize).max(1);
        assert_eq!(after.identities, want, "ss seed {seed}");
        // Whole identities survive.
        for (id, n) in ss.identity_counts() {
            assert_eq!(n, m.identity_counts()[id]);
        }
    }
}

#[test]
fn small_scale_case_from_published_totals() {
    assert_eq!(ss_keep(0.1, 1501), 150);
    assert_eq!(fs_keep(0.1, 7), 1);
    assert_eq!(fs_keep(0.7, 10), 7);
    let m = manifest_from_counts(&vec![2; 1501]);
    let s = subsample(&m, &SubsetSpec { mode: SubsetMode::Ss, fraction: 0.1, seed: 3 }).unwrap();
    assert_eq!(s.identity_count(), 150);
}
