//! Fixtures shared by the benchmarks.

use isac_core::oracle::{ideal_ranges, IdealMeasurementModel, IdealTap};
use isac_core::scenario::Scenario;
use isac_core::{Scene, TapMeasurements};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A fig11 scene with `k` tAPs and `j` random targets.
pub fn scene(k: usize, j: usize, seed: u64) -> Scene {
    let s = Scenario::preset("fig11").and_then(|s| s.with_taps(k)).expect("valid preset");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = s.random_targets(j, &mut rng);
    s.build_scene(0, targets, &s.sync, &mut rng).expect("valid scene")
}

/// Ideal-model range sets for the targets of `scene`.
pub fn ideal_measurements(scene: &Scene, seed: u64) -> Vec<TapMeasurements> {
    let taps: Vec<IdealTap> = scene
        .taps
        .iter()
        .map(|t| IdealTap { id: t.id, position: t.position, resolution: t.range_resolution() })
        .collect();
    let targets: Vec<_> = scene.targets.iter().map(|t| t.position).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ideal_ranges(scene.rap.position, &taps, &targets, &IdealMeasurementModel::default(), &mut rng)
        .into_iter()
        .zip(&taps)
        .map(|(set, t)| TapMeasurements { position: t.position, set })
        .collect()
}
