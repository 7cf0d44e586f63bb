//! Scenario templates: AP layout, radio settings and the target randomization law.
//!
//! Templates load from TOML with units spelled out in key names:
//!
//! ```toml
//! name = "pair"
//! carrier_hz = 4.9e9
//! tx_power_dbm = 45.0
//! mu = 1
//! channel_bandwidth_hz = 50e6
//! area_radius_m = 400.0
//!
//! [[raps]]
//! id = 0
//! position_m = [100.0, 0.0]
//!
//! [[taps]]
//! id = 1
//! position_m = [-100.0, 0.0]
//! ```

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::locator::ServiceArea;
use crate::numerology::{max_subcarriers, FrequencyRange, Numerology};
use crate::scene::{bistatic_geometry, AccessPoint, ApRole, Scene, SyncModel, Target};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApSite {
    pub id: u32,
    pub position_m: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub position_m: Vec2,
    #[serde(default)]
    pub velocity_mps: Vec2,
    #[serde(default = "default_rcs")]
    pub rcs_m2: f64,
}

fn default_rcs() -> f64 {
    1.0
}
fn default_carrier() -> f64 {
    4.9e9
}
fn default_power() -> f64 {
    45.0
}
fn default_mu() -> u8 {
    1
}
fn default_bw() -> f64 {
    50e6
}
fn default_fr() -> FrequencyRange {
    FrequencyRange::Fr1
}
fn default_speed() -> f64 {
    30.0
}
fn default_radius() -> f64 {
    400.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_carrier")]
    pub carrier_hz: f64,
    #[serde(default = "default_power")]
    pub tx_power_dbm: f64,
    #[serde(default = "default_mu")]
    pub mu: u8,
    #[serde(default = "default_bw")]
    pub channel_bandwidth_hz: f64,
    #[serde(default = "default_fr")]
    pub frequency_range: FrequencyRange,
    #[serde(default)]
    pub noise_figure_db: f64,
    #[serde(default = "default_rcs")]
    pub rcs_m2: f64,
    /// Random targets move at a uniform speed in `[0, max_speed_mps]`.
    #[serde(default = "default_speed")]
    pub max_speed_mps: f64,
    #[serde(default)]
    pub area_center_m: Vec2,
    #[serde(default = "default_radius")]
    pub area_radius_m: f64,
    #[serde(default)]
    pub sync: SyncModel,
    /// The first entry is the primary receiver.
    pub raps: Vec<ApSite>,
    pub taps: Vec<ApSite>,
    /// Fixed targets for single runs; random targets are drawn when empty.
    #[serde(default)]
    pub targets: Vec<TargetSpec>,
}

pub const PRESET_NAMES: [&str; 4] = ["fig4", "fig11", "fr2", "multi_rap"];

/// Pentagon of radius 200 m around the origin, AP1..AP5 in that order.
fn ring_taps() -> Vec<ApSite> {
    [90.0f64, 234.0, 18.0, 162.0, 306.0]
        .iter()
        .enumerate()
        .map(|(k, deg)| ApSite {
            id: k as u32 + 1,
            position_m: Vec2::from_polar(200.0, deg.to_radians()),
        })
        .collect()
}

impl Scenario {
    fn base(name: &str) -> Self {
        Self {
            name: name.to_string(),
            carrier_hz: default_carrier(),
            tx_power_dbm: default_power(),
            mu: default_mu(),
            channel_bandwidth_hz: default_bw(),
            frequency_range: default_fr(),
            noise_figure_db: 0.0,
            rcs_m2: 1.0,
            max_speed_mps: default_speed(),
            area_center_m: Vec2::ZERO,
            area_radius_m: default_radius(),
            sync: SyncModel::typical(),
            raps: vec![ApSite { id: 6, position_m: Vec2::ZERO }],
            taps: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let mut s = Self::base(name);
        match name {
            "fig4" => {
                s.raps = vec![ApSite { id: 0, position_m: Vec2::new(100.0, 0.0) }];
                s.taps = vec![ApSite { id: 1, position_m: Vec2::new(-100.0, 0.0) }];
            }
            "fig11" => s.taps = ring_taps(),
            "fr2" => {
                s.mu = 3;
                s.channel_bandwidth_hz = 200e6;
                s.frequency_range = FrequencyRange::Fr2;
                s.area_radius_m = 100.0;
                s.taps = [(-50.0, 0.0), (0.0, -50.0), (50.0, 50.0), (-35.0, 35.0), (35.0, -35.0)]
                    .iter()
                    .enumerate()
                    .map(|(k, &(x, y))| ApSite { id: k as u32 + 1, position_m: Vec2::new(x, y) })
                    .collect();
            }
            "multi_rap" => {
                let ring = ring_taps();
                s.raps = vec![ApSite { id: 6, position_m: Vec2::ZERO }, ring[4]];
                s.taps = ring[..4].to_vec();
            }
            _ => {
                return Err(Error::UnknownPreset {
                    name: name.to_string(),
                    valid: PRESET_NAMES.join(", "),
                })
            }
        }
        Ok(s)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn numerology(&self) -> Result<Numerology> {
        Numerology::normal(self.mu)
    }

    pub fn validate(&self) -> Result<()> {
        let numerology = self.numerology()?;
        if !numerology.frequency_ranges().contains(&self.frequency_range) {
            return Err(Error::InvalidArgument(format!(
                "mu={} is not used in {:?}",
                self.mu, self.frequency_range
            )));
        }
        max_subcarriers(self.mu, self.frequency_range, self.channel_bandwidth_hz)?;
        let positive = [
            ("carrier_hz", self.carrier_hz),
            ("rcs_m2", self.rcs_m2),
            ("area_radius_m", self.area_radius_m),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{key} must be positive")));
            }
        }
        if !(self.max_speed_mps >= 0.0) || !self.tx_power_dbm.is_finite() {
            return Err(Error::InvalidArgument("max_speed_mps and tx_power_dbm must be finite".into()));
        }
        if self.raps.is_empty() || self.taps.is_empty() {
            return Err(Error::InvalidArgument("need at least one rAP and one tAP".into()));
        }
        let mut ids: Vec<u32> = self.raps.iter().chain(&self.taps).map(|a| a.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("AP ids must be unique".into()));
        }
        Ok(())
    }

    pub fn access_point(&self, site: &ApSite, role: ApRole) -> Result<AccessPoint> {
        Ok(AccessPoint {
            id: site.id,
            position: site.position_m,
            role,
            carrier_hz: self.carrier_hz,
            tx_power_dbm: self.tx_power_dbm,
            bandwidth: max_subcarriers(self.mu, self.frequency_range, self.channel_bandwidth_hz)?,
            numerology: self.numerology()?,
        })
    }

    pub fn range_resolution(&self) -> Result<f64> {
        Ok(self.access_point(&self.taps[0], ApRole::Transmit)?.range_resolution())
    }

    pub fn service_area(&self) -> ServiceArea {
        ServiceArea { center: self.area_center_m, radius: self.area_radius_m }
    }

    /// Keep only the first `k` tAPs.
    pub fn with_taps(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.taps.len() {
            return Err(Error::InvalidArgument(format!(
                "K={k} but the scenario has {} tAPs",
                self.taps.len()
            )));
        }
        let mut s = self.clone();
        s.taps.truncate(k);
        Ok(s)
    }

    /// Uniform point in the service disc.
    pub fn random_position<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let r = self.area_radius_m * rng.random::<f64>().sqrt();
        let phi = 2.0 * PI * rng.random::<f64>();
        self.area_center_m + Vec2::from_polar(r, phi)
    }

    pub fn random_velocity<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let speed = self.max_speed_mps * rng.random::<f64>();
        Vec2::from_polar(speed, 2.0 * PI * rng.random::<f64>())
    }

    pub fn random_targets<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> Vec<Target> {
        (0..j)
            .map(|_| {
                let position = self.random_position(rng);
                Target { position, velocity: self.random_velocity(rng), rcs_m2: self.rcs_m2 }
            })
            .collect()
    }

    /// Uniform point whose bistatic range through (`tap`, `rap`) lies in `[min, max]`.
    pub fn random_in_band<R: Rng + ?Sized>(tap: Vec2, rap: Vec2, min_m: f64, max_m: f64, rng: &mut R) -> Result<Vec2> {
        let d_b = tap.distance(rap);
        if !(max_m > d_b && max_m >= min_m) {
            return Err(Error::InvalidArgument(format!(
                "band [{min_m}, {max_m}] m is empty for a baseline of {d_b} m"
            )));
        }
        let center = (tap + rap) * 0.5;
        let half = max_m / 2.0;
        for _ in 0..100_000 {
            let q = center + Vec2::new(half * (2.0 * rng.random::<f64>() - 1.0), half * (2.0 * rng.random::<f64>() - 1.0));
            let d = bistatic_geometry(tap, rap, q).d_s;
            if d >= min_m && d <= max_m {
                return Ok(q);
            }
        }
        Err(Error::InvalidArgument("bistatic band too thin to sample".into()))
    }

    pub fn fixed_targets(&self) -> Vec<Target> {
        self.targets
            .iter()
            .map(|t| Target { position: t.position_m, velocity: t.velocity_mps, rcs_m2: t.rcs_m2 })
            .collect()
    }

    /// A scene for the receiver `rap_index`, with per-tAP sync errors drawn from `sync`.
    pub fn build_scene<R: Rng + ?Sized>(
        &self,
        rap_index: usize,
        targets: Vec<Target>,
        sync: &SyncModel,
        rng: &mut R,
    ) -> Result<Scene> {
        let site = self
            .raps
            .get(rap_index)
            .ok_or_else(|| Error::InvalidArgument(format!("no rAP at index {rap_index}")))?;
        let rap = self.access_point(site, ApRole::Receive)?;
        let taps = self
            .taps
            .iter()
            .map(|t| self.access_point(t, ApRole::Transmit))
            .collect::<Result<Vec<_>>>()?;
        let scs = rap.numerology.scs_hz();
        let sync = taps.iter().map(|_| sync.sample(scs, rng)).collect();
        Ok(Scene { rap, taps, targets, sync, noise_figure_db: self.noise_figure_db })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            Scenario::preset(name).unwrap().validate().unwrap();
        }
        assert!(matches!(Scenario::preset("nope"), Err(Error::UnknownPreset { .. })));
    }

    #[test]
    fn preset_resolutions() {
        assert!((Scenario::preset("fig11").unwrap().range_resolution().unwrap() - 6.2613).abs() < 1e-3);
        assert!((Scenario::preset("fr2").unwrap().range_resolution().unwrap() / 2.0 - 0.7886).abs() < 1e-3);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let s = Scenario::preset("fig11").unwrap();
        let back = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(back, s);
        let text = "name = 'x'\nmu = 9\n[[raps]]\nid = 0\nposition_m = [0.0, 0.0]\n[[taps]]\nid = 1\nposition_m = [1.0, 0.0]\n";
        assert!(matches!(Scenario::from_toml_str(text), Err(Error::InvalidMu(9))));
        let typo = "name = 'x'\ntx_power_dbmm = 3.0\nraps = []\ntaps = []\n";
        assert!(Scenario::from_toml_str(typo).is_err());
    }

    #[test]
    fn random_targets_stay_in_disc() {
        let s = Scenario::preset("fr2").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in s.random_targets(1000, &mut rng) {
            assert!(t.position.norm() <= 100.0);
            assert!(t.velocity.norm() <= 30.0);
        }
    }

    #[test]
    fn band_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (Vec2::new(-100.0, 0.0), Vec2::new(100.0, 0.0));
        for _ in 0..200 {
            let q = Scenario::random_in_band(a, b, 1400.0, 1800.0, &mut rng).unwrap();
            let d = bistatic_geometry(a, b, q).d_s;
            assert!((1400.0..=1800.0).contains(&d));
        }
        assert!(Scenario::random_in_band(a, b, 10.0, 150.0, &mut rng).is_err());
    }
}
