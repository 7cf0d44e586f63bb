//! Geometry, link budget and synchronisation errors of one sensing task.
//!
//! A [`Scene`] holds one receiving AP, `K` transmitting APs and `J` point
//! targets. [`Scene::path_truths`] turns that into the per-link list of
//! propagation paths (LoS first) that the channel simulator consumes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec2, SPEED_OF_LIGHT};
use crate::numerology::{BandwidthConfig, Numerology, SensingTiming};

/// Multiplier on the range resolution that defines the sensing blind zone.
pub const SBZ_FACTOR: f64 = 3.5;

/// Thermal noise density at 290 K.
pub const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApRole {
    Transmit,
    Receive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessPoint {
    pub id: u32,
    pub position: Vec2,
    pub role: ApRole,
    pub carrier_hz: f64,
    pub tx_power_dbm: f64,
    pub bandwidth: BandwidthConfig,
    pub numerology: Numerology,
}

impl AccessPoint {
    pub fn timing(&self) -> SensingTiming {
        SensingTiming::new(&self.numerology, &self.bandwidth)
    }

    pub fn range_resolution(&self) -> f64 {
        range_resolution(self.bandwidth.n_subcarriers as usize, self.numerology.scs_hz())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub position: Vec2,
    pub velocity: Vec2,
    pub rcs_m2: f64,
}

/// Residual timing and frequency offset of one tAP relative to the rAP.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SyncError {
    pub sto_s: f64,
    pub cfo_hz: f64,
}

/// Ground truth of one propagation path between a tAP and the rAP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathTruth {
    pub tap_id: u32,
    /// 0 is the line-of-sight path, `j` the path scattered by target `j`.
    pub path_index: usize,
    pub delay_s: f64,
    pub doppler_hz: f64,
    /// Linear amplitude in sqrt(W) at the receiver.
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BistaticGeometry {
    /// tAP -> target distance.
    pub d_t: f64,
    /// target -> rAP distance.
    pub d_r: f64,
    /// Bistatic range `d_t + d_r`.
    pub d_s: f64,
}

pub fn bistatic_geometry(tap: Vec2, rap: Vec2, target: Vec2) -> BistaticGeometry {
    let d_t = target.distance(tap);
    let d_r = target.distance(rap);
    BistaticGeometry { d_t, d_r, d_s: d_t + d_r }
}

/// Doppler shift of the scattered path, positive for targets closing on the APs.
///
/// Equals `-(d/dt d_s) / lambda`.
pub fn bistatic_doppler(
    tap: Vec2,
    rap: Vec2,
    target: Vec2,
    velocity: Vec2,
    carrier_hz: f64,
) -> Result<f64> {
    if carrier_hz <= 0.0 {
        return Err(Error::InvalidArgument("carrier frequency must be positive".into()));
    }
    let to_tap = (tap - target).unit().ok_or(Error::CoincidentTarget)?;
    let to_rap = (rap - target).unit().ok_or(Error::CoincidentTarget)?;
    let wavelength = SPEED_OF_LIGHT / carrier_hz;
    Ok(velocity.dot(to_tap + to_rap) / wavelength)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathKind {
    LineOfSight { baseline_m: f64 },
    Scattered { d_t: f64, d_r: f64, rcs_m2: f64 },
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Free-space amplitude (sqrt of received power in W) with unit antenna gains.
///
/// LoS follows Friis, scattered paths the bistatic radar equation.
pub fn path_amplitude(kind: PathKind, carrier_hz: f64, tx_power_dbm: f64) -> Result<f64> {
    let lambda = SPEED_OF_LIGHT / carrier_hz;
    let pt = dbm_to_watts(tx_power_dbm);
    let four_pi = 4.0 * std::f64::consts::PI;
    let power = match kind {
        PathKind::LineOfSight { baseline_m } => {
            if baseline_m <= 0.0 {
                return Err(Error::InvalidArgument("baseline must be positive".into()));
            }
            pt * lambda * lambda / (four_pi * four_pi * baseline_m * baseline_m)
        }
        PathKind::Scattered { d_t, d_r, rcs_m2 } => {
            if d_t <= 0.0 || d_r <= 0.0 {
                return Err(Error::InvalidArgument("path legs must be positive".into()));
            }
            pt * lambda * lambda * rcs_m2 / (four_pi.powi(3) * d_t * d_t * d_r * d_r)
        }
    };
    Ok(power.sqrt())
}

/// Bistatic range resolution `c0 / (Nc * scs)`.
pub fn range_resolution(n_subcarriers: usize, scs_hz: f64) -> f64 {
    SPEED_OF_LIGHT / (n_subcarriers as f64 * scs_hz)
}

/// Blind-zone test on ranges: `d_s <= d_b + 3.5 * delta`.
pub fn sbz_contains_range(d_s: f64, d_b: f64, delta_ds: f64) -> bool {
    d_s <= d_b + SBZ_FACTOR * delta_ds
}

pub fn sbz_contains(tap: Vec2, rap: Vec2, target: Vec2, delta_ds: f64) -> bool {
    let g = bistatic_geometry(tap, rap, target);
    sbz_contains_range(g.d_s, tap.distance(rap), delta_ds)
}

/// Receiver noise power over the occupied bandwidth, in W.
pub fn noise_power_watts(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    dbm_to_watts(THERMAL_NOISE_DBM_PER_HZ + 10.0 * bandwidth_hz.log10() + noise_figure_db)
}

/// How the quoted synchronisation-quality numbers are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncInterpretation {
    /// The quoted values are standard deviations (ns and Hz).
    #[default]
    StdDev,
    /// The quoted values are variances (ns^2 and Hz^2).
    Variance,
}

/// Synchronisation-quality level used to draw per-tAP [`SyncError`]s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncModel {
    pub sto_ns: f64,
    /// CFO figure as a fraction of the subcarrier spacing.
    pub cfo_scs_fraction: f64,
    #[serde(default)]
    pub interpretation: SyncInterpretation,
}

impl SyncModel {
    pub const PERFECT: SyncModel = SyncModel {
        sto_ns: 0.0,
        cfo_scs_fraction: 0.0,
        interpretation: SyncInterpretation::StdDev,
    };

    /// The default imperfect level: 10 ns and 0.01 of the subcarrier spacing.
    pub fn typical() -> Self {
        Self {
            sto_ns: 10.0,
            cfo_scs_fraction: 0.01,
            interpretation: SyncInterpretation::StdDev,
        }
    }

    pub fn sto_std_s(&self) -> f64 {
        match self.interpretation {
            SyncInterpretation::StdDev => self.sto_ns * 1e-9,
            SyncInterpretation::Variance => self.sto_ns.sqrt() * 1e-9,
        }
    }

    pub fn cfo_std_hz(&self, scs_hz: f64) -> f64 {
        let quoted = self.cfo_scs_fraction * scs_hz;
        match self.interpretation {
            SyncInterpretation::StdDev => quoted,
            SyncInterpretation::Variance => quoted.sqrt(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, scs_hz: f64, rng: &mut R) -> SyncError {
        let draw = |std: f64, rng: &mut R| {
            if std > 0.0 {
                Normal::new(0.0, std).expect("finite std").sample(rng)
            } else {
                0.0
            }
        };
        let sto_s = draw(self.sto_std_s(), rng);
        let cfo_hz = draw(self.cfo_std_hz(scs_hz), rng);
        SyncError { sto_s, cfo_hz }
    }
}

impl Default for SyncModel {
    fn default() -> Self {
        Self::typical()
    }
}

/// One sensing task: a receiving AP, its transmitting APs and the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub rap: AccessPoint,
    pub taps: Vec<AccessPoint>,
    pub targets: Vec<Target>,
    /// One entry per tAP, aligned with `taps`.
    pub sync: Vec<SyncError>,
    pub noise_figure_db: f64,
}

impl Scene {
    /// True paths of the tAP at `tap_index`: LoS first, then one per target.
    pub fn path_truths(&self, tap_index: usize) -> Result<Vec<PathTruth>> {
        let tap = &self.taps[tap_index];
        let baseline = tap.position.distance(self.rap.position);
        let mut paths = Vec::with_capacity(self.targets.len() + 1);
        paths.push(PathTruth {
            tap_id: tap.id,
            path_index: 0,
            delay_s: baseline / SPEED_OF_LIGHT,
            doppler_hz: 0.0,
            amplitude: path_amplitude(
                PathKind::LineOfSight { baseline_m: baseline },
                tap.carrier_hz,
                tap.tx_power_dbm,
            )?,
        });
        for (j, target) in self.targets.iter().enumerate() {
            let g = bistatic_geometry(tap.position, self.rap.position, target.position);
            paths.push(PathTruth {
                tap_id: tap.id,
                path_index: j + 1,
                delay_s: g.d_s / SPEED_OF_LIGHT,
                doppler_hz: bistatic_doppler(
                    tap.position,
                    self.rap.position,
                    target.position,
                    target.velocity,
                    tap.carrier_hz,
                )?,
                amplitude: path_amplitude(
                    PathKind::Scattered {
                        d_t: g.d_t,
                        d_r: g.d_r,
                        rcs_m2: target.rcs_m2,
                    },
                    tap.carrier_hz,
                    tap.tx_power_dbm,
                )?,
            });
        }
        Ok(paths)
    }

    /// Noise power (W) on the channel estimate of the tAP at `tap_index`.
    pub fn noise_power(&self, tap_index: usize) -> f64 {
        let tap = &self.taps[tap_index];
        let bw = tap.bandwidth.n_subcarriers as f64 * tap.numerology.scs_hz();
        noise_power_watts(bw, self.noise_figure_db)
    }

    pub fn baseline(&self, tap_index: usize) -> f64 {
        self.taps[tap_index].position.distance(self.rap.position)
    }

    /// True bistatic range of target `j` seen through tAP `tap_index`.
    pub fn true_range(&self, tap_index: usize, j: usize) -> f64 {
        bistatic_geometry(
            self.taps[tap_index].position,
            self.rap.position,
            self.targets[j].position,
        )
        .d_s
    }

    pub fn in_sbz(&self, tap_index: usize, j: usize) -> bool {
        sbz_contains(
            self.taps[tap_index].position,
            self.rap.position,
            self.targets[j].position,
            self.taps[tap_index].range_resolution(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    #[test]
    fn geometry_examples() {
        let g = bistatic_geometry(p(-100.0, 0.0), p(100.0, 0.0), p(0.0, 0.0));
        assert_eq!((g.d_t, g.d_r, g.d_s), (100.0, 100.0, 200.0));
        let g = bistatic_geometry(p(-100.0, 0.0), p(100.0, 0.0), p(0.0, 100.0));
        assert!((g.d_s - 200.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((g.d_s - 282.84).abs() < 1e-2);
    }

    #[test]
    fn doppler_trivial_cases() {
        let (tap, rap, q) = (p(-100.0, 0.0), p(100.0, 0.0), p(0.0, 100.0));
        assert_eq!(bistatic_doppler(tap, rap, q, Vec2::ZERO, 4.9e9).unwrap(), 0.0);
        // On the perpendicular bisector, motion along the baseline is orthogonal to u_t + u_r.
        let f = bistatic_doppler(tap, rap, q, p(7.0, 0.0), 4.9e9).unwrap();
        assert!(f.abs() < 1e-9);
        assert!(matches!(
            bistatic_doppler(tap, rap, tap, p(1.0, 0.0), 4.9e9),
            Err(Error::CoincidentTarget)
        ));
    }

    #[test]
    fn doppler_matches_finite_difference_of_range() {
        let (tap, rap, q, v) = (p(-100.0, 0.0), p(100.0, 0.0), p(0.0, 100.0), p(0.0, -10.0));
        let fc = 4.9e9;
        let lambda = SPEED_OF_LIGHT / fc;
        let ds = |t: f64| bistatic_geometry(tap, rap, q + v * t).d_s;
        let h = 1e-4;
        let oracle = -(ds(h) - ds(-h)) / (2.0 * h) / lambda;
        let f = bistatic_doppler(tap, rap, q, v, fc).unwrap();
        assert!(((f - oracle) / oracle).abs() < 1e-6, "{f} vs {oracle}");
        // Closing on both APs gives a positive shift.
        assert!(f > 0.0);
    }

    #[test]
    fn amplitude_scaling_laws() {
        let los = |d| path_amplitude(PathKind::LineOfSight { baseline_m: d }, 4.9e9, 45.0).unwrap();
        assert!((los(400.0) / los(200.0) - 0.5).abs() < 1e-12);
        let sc = |d_t, d_r| {
            path_amplitude(PathKind::Scattered { d_t, d_r, rcs_m2: 1.0 }, 4.9e9, 45.0).unwrap()
        };
        assert!((sc(200.0, 300.0) / sc(100.0, 150.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn los_amplitude_matches_friis_in_db() {
        // Friis in decibel form: FSPL = 20 log10(4 pi d f / c).
        let (d, f, pt_dbm) = (200.0, 4.9e9, 45.0);
        let fspl_db = 20.0 * (4.0 * std::f64::consts::PI * d * f / SPEED_OF_LIGHT).log10();
        let pr_dbm = pt_dbm - fspl_db;
        assert!((fspl_db - 92.27).abs() < 0.01);
        let a = path_amplitude(PathKind::LineOfSight { baseline_m: d }, f, pt_dbm).unwrap();
        let a_dbm = 10.0 * (a * a).log10() + 30.0;
        assert!((a_dbm - pr_dbm).abs() < 1e-9);
    }

    #[test]
    fn sbz_boundaries() {
        let delta = 6.2613;
        assert!(sbz_contains(p(-100.0, 0.0), p(100.0, 0.0), p(10.0, 0.0), delta));
        assert!(sbz_contains_range(200.0 + 3.5 * delta, 200.0, delta));
        assert!(!sbz_contains_range(200.0 + 4.0 * delta, 200.0, delta));
    }

    #[test]
    fn resolution_examples() {
        assert!((range_resolution(1596, 30e3) - 6.2613).abs() < 1e-3);
        assert!((range_resolution(1584, 120e3) / 2.0 - 0.7886).abs() < 1e-3);
        assert!((range_resolution(3192, 30e3) * 2.0 - range_resolution(1596, 30e3)).abs() < 1e-12);
    }

    #[test]
    fn sync_sampling_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = SyncModel::typical();
        let n = 20_000;
        let draws: Vec<_> = (0..n).map(|_| model.sample(30e3, &mut rng)).collect();
        let std = |f: &dyn Fn(&SyncError) -> f64| {
            (draws.iter().map(|d| f(d).powi(2)).sum::<f64>() / n as f64).sqrt()
        };
        assert!((std(&|d| d.sto_s) / 10e-9 - 1.0).abs() < 0.03);
        assert!((std(&|d| d.cfo_hz) / 300.0 - 1.0).abs() < 0.03);
        let var = SyncModel {
            interpretation: SyncInterpretation::Variance,
            ..model
        };
        assert!((var.sto_std_s() - 10f64.sqrt() * 1e-9).abs() < 1e-18);
        assert_eq!(SyncModel::PERFECT.sample(30e3, &mut rng), SyncError::default());
    }

    proptest::proptest! {
        #[test]
        fn triangle_inequality_holds(
            tx in -500.0f64..500.0, ty in -500.0f64..500.0,
            qx in -500.0f64..500.0, qy in -500.0f64..500.0,
        ) {
            let (tap, rap, q) = (p(tx, ty), Vec2::ZERO, p(qx, qy));
            let g = bistatic_geometry(tap, rap, q);
            let d_b = tap.norm();
            proptest::prop_assert!((g.d_t - g.d_r).abs() <= d_b + 1e-9);
            proptest::prop_assert!(d_b <= g.d_s + 1e-9);
        }
    }
}
