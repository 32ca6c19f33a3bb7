//! Metric invariants and oracles.

use std::f64::consts::LN_2;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use trajectron::data::raster::MapRaster;
use trajectron::metrics::*;

fn traj(max_len: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(-50.0..50.0f64), 1..max_len)
}

fn pair() -> impl Strategy<Value = (Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    (1usize..15).prop_flat_map(|t| {
        (
            prop::collection::vec(prop::array::uniform2(-50.0..50.0f64), t),
            prop::collection::vec(prop::array::uniform2(-50.0..50.0f64), t),
        )
    })
}

fn sample_set() -> impl Strategy<Value = (Vec<Vec<[f64; 2]>>, Vec<[f64; 2]>)> {
    (1usize..8, 1usize..25).prop_flat_map(|(t, n)| {
        (
            prop::collection::vec(prop::collection::vec(prop::array::uniform2(-20.0..20.0f64), t), n),
            prop::collection::vec(prop::array::uniform2(-20.0..20.0f64), t),
        )
    })
}

proptest! {
    #[test]
    fn displacement_matches_direct_recomputation((pred, gt) in pair()) {
        let (ade, fde) = displacement_errors(&pred, &gt).unwrap();
        let d: Vec<f64> = pred
            .iter()
            .zip(&gt)
            .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        prop_assert!((ade - mean).abs() <= 1e-12 * mean.max(1.0));
        prop_assert!((fde - d[d.len() - 1]).abs() <= 1e-12 * fde.max(1.0));
        prop_assert!(ade >= 0.0 && fde >= 0.0);
    }

    #[test]
    fn best_of_n_is_exhaustive_minimum((samples, gt) in sample_set()) {
        let n = samples.len();
        let (min_ade, min_fde) = best_of_n(&samples, &gt, n).unwrap();
        let errs: Vec<(f64, f64)> = samples.iter().map(|s| displacement_errors(s, &gt).unwrap()).collect();
        prop_assert_eq!(min_ade, errs.iter().map(|e| e.0).fold(f64::INFINITY, f64::min));
        prop_assert_eq!(min_fde, errs.iter().map(|e| e.1).fold(f64::INFINITY, f64::min));
        // never above the mean sample error
        let mean_ade = errs.iter().map(|e| e.0).sum::<f64>() / n as f64;
        prop_assert!(min_ade <= mean_ade + 1e-12);
        // N = 1 is that sample's own error, and the minimum never grows with N
        prop_assert_eq!(best_of_n(&samples, &gt, 1).unwrap(), errs[0]);
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for k in 1..=n {
            let b = best_of_n(&samples, &gt, k).unwrap();
            prop_assert!(b.0 <= prev.0 && b.1 <= prev.1);
            prev = b;
        }
    }

    #[test]
    fn exact_sample_gives_zero_best_of_n((mut samples, gt) in sample_set(), at in 0usize..25) {
        let at = at % samples.len();
        samples[at] = gt.clone();
        prop_assert_eq!(best_of_n(&samples, &gt, samples.len()).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn violation_rate_is_a_fraction(trajs in prop::collection::vec(traj(6), 0..10), seed in 0u64..1000) {
        let values: Vec<f32> = (0..100).map(|i| (i as u64 * 7 + seed).is_multiple_of(3) as u8 as f32).collect();
        let map = MapRaster::new(10, 10, 1, 5.0, [-25.0, -25.0], values).unwrap();
        let r = violation_rate(&trajs, &map, &ViolationConfig::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }
}

#[test]
fn doubling_coordinates_shifts_nll_by_two_ln2() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let nd = Normal::new(0.0, 1.5).unwrap();
    let samples: Vec<Vec<[f64; 2]>> = (0..300)
        .map(|_| {
            (0..4)
                .map(|t| [nd.sample(&mut rng) + t as f64, 0.5 * nd.sample(&mut rng)])
                .collect()
        })
        .collect();
    let gt: Vec<[f64; 2]> = (0..4).map(|t| [t as f64 + 0.3, -0.2]).collect();
    let cfg = KdeConfig::default();
    let base = kde_nll(&samples, &gt, &cfg).unwrap();
    let double = |p: &[f64; 2]| [2.0 * p[0], 2.0 * p[1]];
    let samples2: Vec<Vec<[f64; 2]>> = samples.iter().map(|s| s.iter().map(double).collect()).collect();
    let gt2: Vec<[f64; 2]> = gt.iter().map(double).collect();
    let scaled = kde_nll(&samples2, &gt2, &cfg).unwrap();
    assert!((scaled - base - 2.0 * LN_2).abs() < 1e-10, "{base} -> {scaled}");
}

#[test]
fn standard_normal_kde_nll_near_ln_2pi() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let samples: Vec<Vec<[f64; 2]>> = (0..2000)
        .map(|_| vec![[nd.sample(&mut rng), nd.sample(&mut rng)]])
        .collect();
    let nll = kde_nll(&samples, &[[0.0, 0.0]], &KdeConfig::default()).unwrap();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    assert!((nll - ln_2pi).abs() < 0.15, "{nll}");
}

/// A one-cell wall between two free cells; the step jumps clean over it.
#[test]
fn interpolation_catches_wall_thinner_than_a_step() {
    let mut map = MapRaster::zeros(9, 1, 1, 1.0, [0.0, 0.0]).unwrap();
    map.set(0, 0, 4, 1.0);
    let path = vec![[1.5, 0.5], [7.5, 0.5]];
    // endpoint-only oracle sees two free cells
    let endpoint_hit = path.iter().any(|p| {
        let (r, c) = map.cell_of(*p).unwrap();
        map.get(0, r, c) >= 0.5
    });
    assert!(!endpoint_hit);
    assert!(trajectory_violates(&path, &map, &ViolationConfig::default()));
    // a free path of the same step length passes
    let free = vec![[0.5, 0.5], [3.5, 0.5]];
    assert!(!trajectory_violates(&free, &map, &ViolationConfig::default()));
}

#[test]
fn one_of_four_crossing_is_a_quarter() {
    let mut map = MapRaster::zeros(10, 10, 1, 1.0, [0.0, 0.0]).unwrap();
    for row in 0..10 {
        map.set(0, row, 9, 1.0);
    }
    let inside = |y: f64| vec![[1.0, y], [4.0, y], [8.0, y]];
    let trajs = vec![inside(1.0), inside(3.0), inside(5.0), vec![[1.0, 7.0], [9.5, 7.0]]];
    assert_eq!(violation_rate(&trajs, &map, &ViolationConfig::default()).unwrap(), 0.25);
    let outside = vec![vec![[1.0, 1.0], [1.0, -3.0]]];
    assert_eq!(
        violation_rate(&outside, &map, &ViolationConfig::default()).unwrap(),
        1.0
    );
    let lenient = ViolationConfig {
        outside_is_violation: false,
        ..ViolationConfig::default()
    };
    assert_eq!(violation_rate(&outside, &map, &lenient).unwrap(), 0.0);
}
