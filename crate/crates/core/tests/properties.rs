use isac_core::geometry::bistatic_range;
use isac_core::harness::{trial_seed, wilson_ci95};
use isac_core::locator::{localize_all, ServiceArea};
use isac_core::scene::sbz_contains;
use isac_core::{RangeSet, SolverConfig, TapMeasurements, Vec2};
use proptest::prelude::*;

const RES: f64 = 6.2613;

fn ring() -> Vec<Vec2> {
    [90.0f64, 234.0, 18.0, 162.0, 306.0]
        .iter()
        .map(|d| Vec2::from_polar(200.0, d.to_radians()))
        .collect()
}

fn exact(taps: &[Vec2], targets: &[Vec2]) -> Vec<TapMeasurements> {
    taps.iter()
        .enumerate()
        .map(|(k, &a)| TapMeasurements {
            position: a,
            set: RangeSet::new(k as u32 + 1, targets.iter().map(|&q| bistatic_range(a, Vec2::ZERO, q)).collect(), RES),
        })
        .collect()
}

fn cfg() -> SolverConfig {
    SolverConfig { service_area: Some(ServiceArea { center: Vec2::ZERO, radius: 400.0 }), ..SolverConfig::default() }
}

fn point() -> impl Strategy<Value = Vec2> {
    (0.0f64..1.0, 0.0f64..std::f64::consts::TAU).prop_map(|(u, t)| Vec2::from_polar(390.0 * u.sqrt(), t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_visible_target_is_recovered(q in point()) {
        let taps = ring();
        prop_assume!(taps.iter().all(|&a| !sbz_contains(a, Vec2::ZERO, q, RES)));
        let rep = localize_all(Vec2::ZERO, &exact(&taps, &[q]), 1, &cfg()).unwrap();
        prop_assert_eq!(rep.estimates.len(), 1);
        prop_assert!(rep.estimates[0].position.distance(q) < 1e-6);
        prop_assert_eq!(rep.estimates[0].supporting_taps.len(), 5);
    }

    #[test]
    fn measurements_are_used_at_most_once(targets in prop::collection::vec(point(), 1..=4), k in 3usize..=5) {
        let taps = &ring()[..k];
        let m = exact(taps, &targets);
        let rep = localize_all(Vec2::ZERO, &m, targets.len(), &cfg()).unwrap();
        prop_assert!(rep.estimates.len() <= targets.len());
        let mut used: Vec<(u32, usize)> = rep.estimates.iter().flat_map(|e| e.association.iter().copied()).collect();
        let n = used.len();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), n);
        let total: usize = m.iter().map(|t| t.set.len()).sum();
        prop_assert_eq!(n + rep.leftover.len() + rep.prefiltered.len(), total);
    }

    #[test]
    fn outlier_far_from_every_range_changes_no_position(q in point(), tap in 0usize..5, offset in 5.5f64..15.0, up: bool) {
        let taps = ring();
        prop_assume!(taps.iter().all(|&a| !sbz_contains(a, Vec2::ZERO, q, RES)));
        let mut m = exact(&taps, &[q]);
        let d = m[tap].set.ranges[0];
        let bad = if up { d + offset * RES } else { d - offset * RES };
        m[tap].set = RangeSet::new(tap as u32 + 1, vec![bad], RES);
        let rep = localize_all(Vec2::ZERO, &m, 1, &cfg()).unwrap();
        prop_assert_eq!(rep.estimates.len(), 1);
        prop_assert!(rep.estimates[0].position.distance(q) < 1e-6);
        prop_assert!(!rep.estimates[0].supporting_taps.contains(&(tap as u32 + 1)));
    }

    #[test]
    fn wilson_interval_brackets_the_rate(total in 1u64..5000, frac in 0.0f64..=1.0) {
        let s = (frac * total as f64).round() as u64;
        let [lo, hi] = wilson_ci95(s, total);
        let p = s as f64 / total as f64;
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0 + 1e-12).contains(&hi));
        prop_assert!(lo <= p + 1e-12 && p <= hi + 1e-12);
    }

    #[test]
    fn trial_seeds_are_stable_and_distinct(root: u64, a in 0u64..1000, b in 0u64..1000) {
        prop_assert_eq!(trial_seed(root, a), trial_seed(root, a));
        if a != b {
            prop_assert_ne!(trial_seed(root, a), trial_seed(root, b));
        }
    }
}
