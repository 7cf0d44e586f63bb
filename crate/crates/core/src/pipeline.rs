//! Per-link sensing: simulate one tAP-rAP link and turn it into a range set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::airsim::{channel_estimate, channel_matrix, generate_symbols, receive, SymbolGrid};
use crate::error::Result;
use crate::estimator::{
    compensate_and_range, extract_paths_from_estimate, Compensation, ExtractionConfig, PathCount,
    PathEstimate, DEFAULT_SNR_THRESHOLD_DB,
};
use crate::scene::{PathTruth, Scene};

/// Number of reused symbols per slot by default (the last six of the slot).
pub const DEFAULT_SENSING_SYMBOLS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PathMode {
    /// Extract `J + 1` paths, with `J` the number of targets in the scene.
    KnownTargets,
    Threshold { max_paths: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingConfig {
    pub n_symbols: usize,
    pub n_doppler: Option<usize>,
    pub path_mode: PathMode,
    pub snr_threshold_db: f64,
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self {
            n_symbols: DEFAULT_SENSING_SYMBOLS,
            n_doppler: None,
            path_mode: PathMode::KnownTargets,
            snr_threshold_db: DEFAULT_SNR_THRESHOLD_DB,
        }
    }
}

impl SensingConfig {
    pub fn extraction(&self, n_targets: usize) -> ExtractionConfig {
        let path_count = match self.path_mode {
            PathMode::KnownTargets => PathCount::Known { n_paths: n_targets + 1 },
            PathMode::Threshold { max_paths } => PathCount::Threshold { max_paths },
        };
        ExtractionConfig {
            path_count,
            n_doppler: self.n_doppler,
            snr_threshold_db: self.snr_threshold_db,
        }
    }
}

/// Everything produced for one tAP-rAP link.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkResult {
    pub tap_id: u32,
    pub truths: Vec<PathTruth>,
    pub paths: Vec<PathEstimate>,
    /// `None` when no LoS path could be identified.
    pub compensation: Option<Compensation>,
}

pub struct LinkGrids {
    pub tx: SymbolGrid,
    pub rx: SymbolGrid,
    pub estimate: SymbolGrid,
}

/// Seeds for the symbol and noise generators of one link.
fn link_seeds(seed: u64, tap_index: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tap_index as u64 + 1);
    (rng.random(), rng.random())
}

pub fn simulate_link(scene: &Scene, tap_index: usize, cfg: &SensingConfig, seed: u64) -> Result<LinkGrids> {
    let tap = &scene.taps[tap_index];
    let timing = tap.timing();
    let nc = timing.n_subcarriers;
    let truths = scene.path_truths(tap_index)?;
    let h = channel_matrix(&truths, scene.sync[tap_index], &timing, nc, cfg.n_symbols);
    let (sym_seed, noise_seed) = link_seeds(seed, tap_index);
    let tx = generate_symbols(nc, cfg.n_symbols, sym_seed);
    let rx = receive(&tx, &h, scene.noise_power(tap_index), noise_seed)?;
    let estimate = channel_estimate(&tx, &rx)?;
    Ok(LinkGrids { tx, rx, estimate })
}

pub fn sense_link(scene: &Scene, tap_index: usize, cfg: &SensingConfig, seed: u64) -> Result<LinkResult> {
    let tap = &scene.taps[tap_index];
    let timing = tap.timing();
    let grids = simulate_link(scene, tap_index, cfg, seed)?;
    let paths = extract_paths_from_estimate(&grids.estimate.data, &timing, &cfg.extraction(scene.targets.len()))?;
    let compensation = compensate_and_range(
        &paths,
        tap.id,
        scene.baseline(tap_index),
        tap.range_resolution(),
        1.0 / (cfg.n_symbols as f64 * timing.symbol_period_s),
        timing.max_delay_s(),
    )
    .ok();
    Ok(LinkResult {
        tap_id: tap.id,
        truths: scene.path_truths(tap_index)?,
        paths,
        compensation,
    })
}

/// Sense every tAP of the scene; links are independent and run sequentially.
pub fn sense_scene(scene: &Scene, cfg: &SensingConfig, seed: u64) -> Result<Vec<LinkResult>> {
    (0..scene.taps.len()).map(|k| sense_link(scene, k, cfg, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::numerology::{max_subcarriers, FrequencyRange, Numerology};
    use crate::scene::{AccessPoint, ApRole, SyncError, Target};

    fn ap(id: u32, x: f64, y: f64, role: ApRole) -> AccessPoint {
        AccessPoint {
            id,
            position: Vec2::new(x, y),
            role,
            carrier_hz: 4.9e9,
            tx_power_dbm: 45.0,
            bandwidth: max_subcarriers(1, FrequencyRange::Fr1, 50e6).unwrap(),
            numerology: Numerology::normal(1).unwrap(),
        }
    }

    #[test]
    fn single_target_range_is_recovered() {
        let scene = Scene {
            rap: ap(0, 100.0, 0.0, ApRole::Receive),
            taps: vec![ap(1, -100.0, 0.0, ApRole::Transmit)],
            targets: vec![Target {
                position: Vec2::new(0.0, 100.0),
                velocity: Vec2::new(3.0, -4.0),
                rcs_m2: 1.0,
            }],
            sync: vec![SyncError { sto_s: 10e-9, cfo_hz: 300.0 }],
            noise_figure_db: 0.0,
        };
        let link = sense_link(&scene, 0, &SensingConfig::default(), 5).unwrap();
        let comp = link.compensation.unwrap();
        assert_eq!(comp.range_set.len(), 1);
        let err = (comp.range_set.ranges[0] - scene.true_range(0, 0)).abs();
        assert!(err < 6.2613 / 2.0, "error {err}");
        // Same seed, same result.
        let again = sense_link(&scene, 0, &SensingConfig::default(), 5).unwrap();
        assert_eq!(again.compensation.unwrap().range_set, comp.range_set);
    }
}
