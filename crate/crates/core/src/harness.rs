//! Monte Carlo experiments over random scenes.
//!
//! Each trial draws from its own ChaCha stream keyed by the root seed and the trial
//! index, so tables are reproducible regardless of thread count or trial order.
//! Per-trial CSV rows never contain wall-clock measurements; timings only appear in
//! the JSON summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::RangeSet;
use crate::geometry::Vec2;
use crate::locator::{fuse_multi_rap, localize_all, SolverConfig, TapMeasurements};
use crate::oracle::{exhaustive_associate, ideal_ranges, IdealMeasurementModel, IdealTap};
use crate::pipeline::{sense_scene, PathMode, SensingConfig, DEFAULT_SENSING_SYMBOLS};
use crate::scenario::Scenario;
use crate::scene::{bistatic_geometry, sbz_contains, Scene, SyncModel, Target};

pub const EXPERIMENT_NAMES: [&str; 5] = ["range_cdf", "success_vs_power", "localization_suite", "multi_rap", "timing"];

/// Probabilities at which error CDFs are summarised.
pub const CDF_LEVELS: [f64; 7] = [0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];

const STREAM_TARGETS: u64 = 1;
const STREAM_SYNC: u64 = 2;
const STREAM_IDEAL: u64 = 3;
const STREAM_OUTLIER: u64 = 4;
const STREAM_LINKS: u64 = 5;

/// Seed of trial `trial` under `root`.
pub fn trial_seed(root: u64, trial: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(trial);
    rng.random()
}

fn sub_rng(trial_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    rng.set_stream(stream);
    rng
}

/// Wilson score interval at 95 % confidence.
pub fn wilson_ci95(successes: u64, total: u64) -> [f64; 2] {
    if total == 0 {
        return [0.0, 1.0];
    }
    let z = 1.959_963_984_540_054;
    let n = total as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    [(center - half).max(0.0), (center + half).min(1.0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateStat {
    pub rate: f64,
    pub successes: u64,
    pub total: u64,
    pub ci_95: [f64; 2],
}

impl RateStat {
    pub fn new(successes: u64, total: u64) -> Self {
        let rate = if total == 0 { 0.0 } else { successes as f64 / total as f64 };
        Self { rate, successes, total, ci_95: wilson_ci95(successes, total) }
    }
}

/// Error distribution summary. Missing estimates count as infinite errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub success: RateStat,
    /// Over finite errors only.
    pub rmse_m: Option<f64>,
    /// `(probability, error_m)`; `null` errors mean the quantile falls on a miss.
    pub cdf: Vec<(f64, Option<f64>)>,
}

impl ErrorSummary {
    pub fn from_errors(errors: &[Option<f64>], success_below_m: f64, inclusive: bool) -> Self {
        let ok = errors
            .iter()
            .filter(|e| e.is_some_and(|e| if inclusive { e <= success_below_m } else { e < success_below_m }))
            .count() as u64;
        let finite: Vec<f64> = errors.iter().flatten().copied().collect();
        let rmse_m = (!finite.is_empty()).then(|| (finite.iter().map(|e| e * e).sum::<f64>() / finite.len() as f64).sqrt());
        let mut sorted: Vec<f64> = errors.iter().map(|e| e.unwrap_or(f64::INFINITY)).collect();
        sorted.sort_by(f64::total_cmp);
        let cdf = CDF_LEVELS
            .iter()
            .map(|&p| {
                let v = if sorted.is_empty() {
                    f64::INFINITY
                } else {
                    sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1]
                };
                (p, v.is_finite().then_some(v))
            })
            .collect();
        Self { success: RateStat::new(ok, errors.len() as u64), rmse_m, cdf }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStat {
    pub median_s: f64,
    pub mean_s: f64,
    pub samples: usize,
}

impl TimingStat {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median_s = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Some(Self { median_s, mean_s: s.iter().sum::<f64>() / n as f64, samples: n })
    }
}

/// Aggregates for one configuration (one combination of swept parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config: BTreeMap<String, String>,
    pub resolution_m: f64,
    pub errors: ErrorSummary,
    /// Additional named rates (per subsystem, per algorithm, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rates: BTreeMap<String, RateStat>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timings: BTreeMap<String, TimingStat>,
    /// Trials that could not be evaluated (for example an exhaustive search over the guard).
    pub skipped_trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub scenario: String,
    pub seed: u64,
    pub trials: usize,
    pub configs: Vec<ConfigSummary>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub csv: String,
    pub summary: Summary,
}

impl ExperimentOutput {
    /// Write `<name>.csv` and `<name>.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.summary.experiment));
        let json = dir.join(format!("{}.json", self.summary.experiment));
        std::fs::write(&csv, &self.csv)?;
        std::fs::write(&json, serde_json::to_string_pretty(&self.summary)? + "\n")?;
        Ok((csv, json))
    }

    pub fn config(&self, key: &[(&str, &str)]) -> Option<&ConfigSummary> {
        self.summary
            .configs
            .iter()
            .find(|c| key.iter().all(|(k, v)| c.config.get(*k).map(String::as_str) == Some(*v)))
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn run_trials<T: Send>(trials: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..trials).into_par_iter().map(f).collect()
}

/// Greedy closest-pair matching; returns, per truth item, the matched estimate and distance.
pub fn greedy_match(n_truth: usize, n_est: usize, dist: impl Fn(usize, usize) -> f64) -> Vec<Option<(usize, f64)>> {
    let mut pairs: Vec<(f64, usize, usize)> = (0..n_truth)
        .flat_map(|t| (0..n_est).map(move |e| (t, e)))
        .map(|(t, e)| (dist(t, e), t, e))
        .filter(|p| p.0.is_finite())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut out = vec![None; n_truth];
    let mut used = vec![false; n_est];
    for (d, t, e) in pairs {
        if out[t].is_none() && !used[e] {
            out[t] = Some((e, d));
            used[e] = true;
        }
    }
    out
}

fn key(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn fmt_sync(s: &SyncModel) -> String {
    if s.sto_ns == 0.0 && s.cfo_scs_fraction == 0.0 {
        "perfect".into()
    } else {
        format!("{}ns/{}scs", s.sto_ns, s.cfo_scs_fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    /// Ranges come from the simulated air interface and path extraction.
    Real,
    /// Synthetic ranges from the ideal measurement model.
    Ideal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Greedy,
    Exhaustive,
}

impl std::fmt::Display for EstimationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimationMode::Real => "real",
            EstimationMode::Ideal => "ideal",
        })
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Greedy => "greedy",
            Algorithm::Exhaustive => "exhaustive",
        })
    }
}

/// One range measurement per trial moved by a large offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    /// Offset magnitude drawn uniformly from `[min, max]` range resolutions.
    pub min_resolutions: f64,
    pub max_resolutions: f64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self { min_resolutions: 5.5, max_resolutions: 15.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeCase {
    pub targets: usize,
    pub sync: SyncModel,
    #[serde(default)]
    pub mu: Option<u8>,
    #[serde(default)]
    pub channel_bandwidth_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    RangeCdf {
        cases: Vec<RangeCase>,
        n_symbols: usize,
    },
    SuccessVsPower {
        powers_dbm: Vec<f64>,
        /// Bistatic-range bands `[min, max]` in metres.
        bands_m: Vec<[f64; 2]>,
        n_symbols: usize,
    },
    LocalizationSuite {
        k_values: Vec<usize>,
        j_values: Vec<usize>,
        modes: Vec<EstimationMode>,
        algorithms: Vec<Algorithm>,
        #[serde(default)]
        outlier: Option<OutlierSpec>,
        #[serde(default)]
        ideal: IdealMeasurementModel,
    },
    MultiRap {
        j_values: Vec<usize>,
        mode: EstimationMode,
        /// Plant targets where one subsystem is blind and the other is not.
        constructed: bool,
        #[serde(default)]
        ideal: IdealMeasurementModel,
    },
    Timing {
        k_values: Vec<usize>,
        j_values: Vec<usize>,
        #[serde(default)]
        ideal: IdealMeasurementModel,
    },
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::RangeCdf { .. } => "range_cdf",
            ExperimentKind::SuccessVsPower { .. } => "success_vs_power",
            ExperimentKind::LocalizationSuite { .. } => "localization_suite",
            ExperimentKind::MultiRap { .. } => "multi_rap",
            ExperimentKind::Timing { .. } => "timing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub scenario: Scenario,
    pub trials: usize,
    pub seed: u64,
    pub kind: ExperimentKind,
}

impl Experiment {
    /// The named experiment with its default scenario and sweep.
    pub fn by_name(name: &str, trials: usize, seed: u64) -> Result<Self> {
        let (preset, kind) = match name {
            "range_cdf" => (
                "fig4",
                ExperimentKind::RangeCdf {
                    cases: [2, 4]
                        .iter()
                        .flat_map(|&j| {
                            [SyncModel::PERFECT, SyncModel::typical()].map(|sync| RangeCase {
                                targets: j,
                                sync,
                                mu: None,
                                channel_bandwidth_hz: None,
                            })
                        })
                        .collect(),
                    n_symbols: DEFAULT_SENSING_SYMBOLS,
                },
            ),
            "success_vs_power" => (
                "fig4",
                ExperimentKind::SuccessVsPower {
                    powers_dbm: vec![15.0, 25.0, 35.0, 45.0],
                    bands_m: vec![[230.0, 700.0], [700.0, 1400.0], [1400.0, 1800.0]],
                    n_symbols: 70,
                },
            ),
            "localization_suite" => (
                "fig11",
                ExperimentKind::LocalizationSuite {
                    k_values: vec![3, 5],
                    j_values: vec![2, 4],
                    modes: vec![EstimationMode::Ideal, EstimationMode::Real],
                    algorithms: vec![Algorithm::Greedy],
                    outlier: None,
                    ideal: IdealMeasurementModel::default(),
                },
            ),
            "multi_rap" => (
                "multi_rap",
                ExperimentKind::MultiRap {
                    j_values: vec![4],
                    mode: EstimationMode::Ideal,
                    constructed: false,
                    ideal: IdealMeasurementModel::default(),
                },
            ),
            "timing" => (
                "fig11",
                ExperimentKind::Timing {
                    k_values: vec![3, 4, 5],
                    j_values: vec![1, 2, 3, 4],
                    ideal: IdealMeasurementModel::default(),
                },
            ),
            _ => {
                return Err(Error::UnknownExperiment {
                    name: name.to_string(),
                    valid: EXPERIMENT_NAMES.join(", "),
                })
            }
        };
        Ok(Self { scenario: Scenario::preset(preset)?, trials, seed, kind })
    }

    pub fn run(&self) -> Result<ExperimentOutput> {
        self.scenario.validate()?;
        match &self.kind {
            ExperimentKind::RangeCdf { cases, n_symbols } => run_range_cdf(self, cases, *n_symbols),
            ExperimentKind::SuccessVsPower { powers_dbm, bands_m, n_symbols } => {
                run_success_vs_power(self, powers_dbm, bands_m, *n_symbols)
            }
            ExperimentKind::LocalizationSuite { k_values, j_values, modes, algorithms, outlier, ideal } => {
                run_localization_suite(self, k_values, j_values, modes, algorithms, outlier.as_ref(), ideal)
            }
            ExperimentKind::MultiRap { j_values, mode, constructed, ideal } => {
                run_multi_rap(self, j_values, *mode, *constructed, ideal)
            }
            ExperimentKind::Timing { k_values, j_values, ideal } => run_timing(self, k_values, j_values, ideal),
        }
    }

    fn summary(&self, configs: Vec<ConfigSummary>) -> Summary {
        Summary {
            experiment: self.kind.name().to_string(),
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            trials: self.trials,
            configs,
        }
    }
}

/// Measured range sets of every tAP after LoS compensation; failed links give empty sets.
pub fn measured_ranges(scene: &Scene, cfg: &SensingConfig, seed: u64) -> Result<Vec<TapMeasurements>> {
    let links = sense_scene(scene, cfg, seed)?;
    Ok(scene
        .taps
        .iter()
        .zip(links)
        .map(|(tap, link)| TapMeasurements {
            position: tap.position,
            set: link
                .compensation
                .map(|c| c.range_set)
                .unwrap_or_else(|| RangeSet::new(tap.id, Vec::new(), tap.range_resolution())),
        })
        .collect())
}

fn ideal_measurements<R: Rng + ?Sized>(
    scene: &Scene,
    model: &IdealMeasurementModel,
    rng: &mut R,
) -> Vec<TapMeasurements> {
    let taps: Vec<IdealTap> = scene
        .taps
        .iter()
        .map(|t| IdealTap { id: t.id, position: t.position, resolution: t.range_resolution() })
        .collect();
    let positions: Vec<Vec2> = scene.targets.iter().map(|t| t.position).collect();
    ideal_ranges(scene.rap.position, &taps, &positions, model, rng)
        .into_iter()
        .zip(&taps)
        .map(|(set, t)| TapMeasurements { position: t.position, set })
        .collect()
}

/// Move one random measurement by a large offset. Returns the (tap, new range) or `None`.
fn inject_outlier<R: Rng + ?Sized>(
    taps: &mut [TapMeasurements],
    rap: Vec2,
    targets: &[Vec2],
    spec: &OutlierSpec,
    rng: &mut R,
) -> Option<(u32, f64)> {
    let total: usize = taps.iter().map(|t| t.set.len()).sum();
    if total == 0 {
        return None;
    }
    let mut pick = rng.random_range(0..total);
    let k = taps
        .iter()
        .position(|t| {
            if pick < t.set.len() {
                true
            } else {
                pick -= t.set.len();
                false
            }
        })
        .expect("pick lies within the total");
    let (tap_id, resolution, position) = (taps[k].set.tap_id, taps[k].set.resolution, taps[k].position);
    let truths: Vec<f64> = targets.iter().map(|&q| bistatic_geometry(position, rap, q).d_s).collect();
    let mut ranges = taps[k].set.ranges.clone();
    let old = ranges[pick];
    // Redraw until the value is farther than one resolution from every true range.
    let mut new = old;
    for _ in 0..64 {
        let offset = resolution * rng.random_range(spec.min_resolutions..=spec.max_resolutions);
        new = if rng.random::<bool>() && old - offset > 0.0 { old - offset } else { old + offset };
        if truths.iter().all(|&d| (new - d).abs() > resolution) {
            break;
        }
    }
    ranges[pick] = new;
    taps[k].set = RangeSet::new(tap_id, ranges, resolution);
    Some((tap_id, new))
}

fn solver_config(scenario: &Scenario) -> SolverConfig {
    SolverConfig { service_area: Some(scenario.service_area()), ..SolverConfig::default() }
}

/// Per-target localization errors from an estimate list (greedy nearest matching).
fn position_errors(targets: &[Target], estimates: &[Vec2]) -> Vec<Option<f64>> {
    greedy_match(targets.len(), estimates.len(), |t, e| targets[t].position.distance(estimates[e]))
        .into_iter()
        .map(|m| m.map(|(_, d)| d))
        .collect()
}

#[derive(Debug, Serialize)]
struct RangeRow {
    config: String,
    trial: usize,
    tap_id: u32,
    target: usize,
    true_range_m: f64,
    estimated_range_m: Option<f64>,
    error_m: Option<f64>,
    success: bool,
}

fn range_errors(scene: &Scene, measured: &[TapMeasurements]) -> Vec<(u32, usize, f64, Option<f64>)> {
    let mut out = Vec::new();
    for (k, m) in measured.iter().enumerate() {
        let visible: Vec<usize> = (0..scene.targets.len()).filter(|&j| !scene.in_sbz(k, j)).collect();
        let truth: Vec<f64> = visible.iter().map(|&j| scene.true_range(k, j)).collect();
        let matched = greedy_match(truth.len(), m.set.len(), |t, e| (truth[t] - m.set.ranges[e]).abs());
        for ((&j, &d), mm) in visible.iter().zip(&truth).zip(matched) {
            out.push((m.set.tap_id, j, d, mm.map(|(e, _)| m.set.ranges[e])));
        }
    }
    out
}

fn run_range_cdf(exp: &Experiment, cases: &[RangeCase], n_symbols: usize) -> Result<ExperimentOutput> {
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    for case in cases {
        let mut scenario = exp.scenario.clone();
        if let Some(mu) = case.mu {
            scenario.mu = mu;
        }
        if let Some(bw) = case.channel_bandwidth_hz {
            scenario.channel_bandwidth_hz = bw;
        }
        scenario.validate()?;
        let res = scenario.range_resolution()?;
        let label = format!(
            "J={};sync={};mu={};bw_mhz={}",
            case.targets,
            fmt_sync(&case.sync),
            scenario.mu,
            scenario.channel_bandwidth_hz / 1e6
        );
        let cfg = SensingConfig { n_symbols, ..SensingConfig::default() };
        let per_trial = run_trials(exp.trials, |t| -> Result<Vec<RangeRow>> {
            let ts = trial_seed(exp.seed, t as u64);
            let targets = scenario.random_targets(case.targets, &mut sub_rng(ts, STREAM_TARGETS));
            let scene = scenario.build_scene(0, targets, &case.sync, &mut sub_rng(ts, STREAM_SYNC))?;
            let measured = measured_ranges(&scene, &cfg, sub_rng(ts, STREAM_LINKS).random())?;
            Ok(range_errors(&scene, &measured)
                .into_iter()
                .map(|(tap_id, j, d, est)| {
                    let error_m = est.map(|e| (e - d).abs());
                    RangeRow {
                        config: label.clone(),
                        trial: t,
                        tap_id,
                        target: j + 1,
                        true_range_m: d,
                        estimated_range_m: est,
                        error_m,
                        success: error_m.is_some_and(|e| e < res / 2.0),
                    }
                })
                .collect())
        });
        let mut errors = Vec::new();
        for r in per_trial {
            let r = r?;
            errors.extend(r.iter().map(|x| x.error_m));
            rows.extend(r);
        }
        configs.push(ConfigSummary {
            config: key(&[
                ("J", case.targets.to_string()),
                ("sync", fmt_sync(&case.sync)),
                ("mu", scenario.mu.to_string()),
                ("channel_bandwidth_mhz", (scenario.channel_bandwidth_hz / 1e6).to_string()),
            ]),
            resolution_m: res,
            errors: ErrorSummary::from_errors(&errors, res / 2.0, false),
            rates: BTreeMap::new(),
            timings: BTreeMap::new(),
            skipped_trials: 0,
        });
    }
    Ok(ExperimentOutput { csv: to_csv(&rows)?, summary: exp.summary(configs) })
}

fn run_success_vs_power(
    exp: &Experiment,
    powers_dbm: &[f64],
    bands_m: &[[f64; 2]],
    n_symbols: usize,
) -> Result<ExperimentOutput> {
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    let cfg = SensingConfig { n_symbols, ..SensingConfig::default() };
    let res = exp.scenario.range_resolution()?;
    for band in bands_m {
        for &power in powers_dbm {
            let mut scenario = exp.scenario.clone();
            scenario.tx_power_dbm = power;
            let label = format!("band_m={}-{};tx_power_dbm={}", band[0], band[1], power);
            let per_trial = run_trials(exp.trials, |t| -> Result<Vec<RangeRow>> {
                let ts = trial_seed(exp.seed, t as u64);
                let mut rng = sub_rng(ts, STREAM_TARGETS);
                let position = Scenario::random_in_band(
                    scenario.taps[0].position_m,
                    scenario.raps[0].position_m,
                    band[0],
                    band[1],
                    &mut rng,
                )?;
                let target = Target { position, velocity: scenario.random_velocity(&mut rng), rcs_m2: scenario.rcs_m2 };
                let scene = scenario.build_scene(0, vec![target], &scenario.sync, &mut sub_rng(ts, STREAM_SYNC))?;
                let measured = measured_ranges(&scene, &cfg, sub_rng(ts, STREAM_LINKS).random())?;
                Ok(range_errors(&scene, &measured)
                    .into_iter()
                    .map(|(tap_id, j, d, est)| {
                        let error_m = est.map(|e| (e - d).abs());
                        RangeRow {
                            config: label.clone(),
                            trial: t,
                            tap_id,
                            target: j + 1,
                            true_range_m: d,
                            estimated_range_m: est,
                            error_m,
                            success: error_m.is_some_and(|e| e < res / 2.0),
                        }
                    })
                    .collect())
            });
            let mut errors = Vec::new();
            for r in per_trial {
                let r = r?;
                errors.extend(r.iter().map(|x| x.error_m));
                rows.extend(r);
            }
            configs.push(ConfigSummary {
                config: key(&[
                    ("band_min_m", band[0].to_string()),
                    ("band_max_m", band[1].to_string()),
                    ("tx_power_dbm", power.to_string()),
                    ("n_symbols", n_symbols.to_string()),
                ]),
                resolution_m: res,
                errors: ErrorSummary::from_errors(&errors, res / 2.0, false),
                rates: BTreeMap::new(),
                timings: BTreeMap::new(),
                skipped_trials: 0,
            });
        }
    }
    Ok(ExperimentOutput { csv: to_csv(&rows)?, summary: exp.summary(configs) })
}

/// Ranges for one trial of a localization experiment.
fn trial_measurements(
    scenario: &Scenario,
    rap_index: usize,
    targets: &[Target],
    mode: EstimationMode,
    ideal: &IdealMeasurementModel,
    ts: u64,
) -> Result<(Scene, Vec<TapMeasurements>)> {
    let scene = scenario.build_scene(rap_index, targets.to_vec(), &scenario.sync, &mut sub_rng(ts, STREAM_SYNC))?;
    let measured = match mode {
        EstimationMode::Real => {
            let cfg = SensingConfig { path_mode: PathMode::KnownTargets, ..SensingConfig::default() };
            let mut rng = sub_rng(ts, STREAM_LINKS);
            rng.set_stream(STREAM_LINKS + 16 * rap_index as u64);
            measured_ranges(&scene, &cfg, rng.random())?
        }
        EstimationMode::Ideal => {
            let mut rng = sub_rng(ts, STREAM_IDEAL + 16 * rap_index as u64);
            ideal_measurements(&scene, ideal, &mut rng)
        }
    };
    Ok((scene, measured))
}

enum LocOutcome {
    Positions(Vec<Vec2>),
    Skipped,
}

fn locate(
    rap: Vec2,
    measured: &[TapMeasurements],
    j: usize,
    algorithm: Algorithm,
    cfg: &SolverConfig,
) -> Result<LocOutcome> {
    Ok(match algorithm {
        Algorithm::Greedy => LocOutcome::Positions(
            localize_all(rap, measured, j, cfg)?.estimates.iter().map(|e| e.position).collect(),
        ),
        Algorithm::Exhaustive => match exhaustive_associate(rap, measured, j, cfg.sigma, &cfg.gn, cfg.service_area.as_ref()) {
            Ok(r) => LocOutcome::Positions(r.locations.into_iter().flatten().collect()),
            Err(Error::SearchTooLarge(_)) => LocOutcome::Skipped,
            Err(Error::NoFeasibleAssociation) => LocOutcome::Positions(Vec::new()),
            Err(e) => return Err(e),
        },
    })
}

#[derive(Debug, Serialize)]
struct LocalizationRow {
    config: String,
    trial: usize,
    target: usize,
    x_m: f64,
    y_m: f64,
    error_m: Option<f64>,
    success: bool,
    estimates: usize,
    skipped: bool,
}

fn run_localization_suite(
    exp: &Experiment,
    k_values: &[usize],
    j_values: &[usize],
    modes: &[EstimationMode],
    algorithms: &[Algorithm],
    outlier: Option<&OutlierSpec>,
    ideal: &IdealMeasurementModel,
) -> Result<ExperimentOutput> {
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    for &mode in modes {
        for &algorithm in algorithms {
            for &k in k_values {
                let scenario = exp.scenario.with_taps(k)?;
                if k < 3 {
                    return Err(Error::InvalidArgument(format!("K={k}: localization needs at least three tAPs")));
                }
                let res = scenario.range_resolution()?;
                let cfg = solver_config(&scenario);
                for &j in j_values {
                    let label = format!("mode={mode};algorithm={algorithm};K={k};J={j}");
                    let per_trial = run_trials(exp.trials, |t| -> Result<(Vec<LocalizationRow>, f64)> {
                        let ts = trial_seed(exp.seed, t as u64);
                        let targets = scenario.random_targets(j, &mut sub_rng(ts, STREAM_TARGETS));
                        let (scene, mut measured) = trial_measurements(&scenario, 0, &targets, mode, ideal, ts)?;
                        if let Some(spec) = outlier {
                            let pos: Vec<Vec2> = targets.iter().map(|t| t.position).collect();
                            inject_outlier(&mut measured, scene.rap.position, &pos, spec, &mut sub_rng(ts, STREAM_OUTLIER));
                        }
                        let start = Instant::now();
                        let outcome = locate(scene.rap.position, &measured, j, algorithm, &cfg)?;
                        let elapsed = start.elapsed().as_secs_f64();
                        let (errors, n_est, skipped) = match &outcome {
                            LocOutcome::Positions(p) => (position_errors(&targets, p), p.len(), false),
                            LocOutcome::Skipped => (vec![None; j], 0, true),
                        };
                        let rows = targets
                            .iter()
                            .zip(errors)
                            .enumerate()
                            .map(|(i, (tg, e))| LocalizationRow {
                                config: label.clone(),
                                trial: t,
                                target: i + 1,
                                x_m: tg.position.x,
                                y_m: tg.position.y,
                                error_m: e,
                                success: e.is_some_and(|e| e <= res / 2.0),
                                estimates: n_est,
                                skipped,
                            })
                            .collect();
                        Ok((rows, elapsed))
                    });
                    let mut errors = Vec::new();
                    let mut times = Vec::new();
                    let mut skipped = 0;
                    for r in per_trial {
                        let (r, elapsed) = r?;
                        if r.first().is_some_and(|x| x.skipped) {
                            skipped += 1;
                        } else {
                            errors.extend(r.iter().map(|x| x.error_m));
                            times.push(elapsed);
                        }
                        rows.extend(r);
                    }
                    let mut timings = BTreeMap::new();
                    if let Some(s) = TimingStat::from_samples(&times) {
                        timings.insert(algorithm.to_string(), s);
                    }
                    configs.push(ConfigSummary {
                        config: key(&[
                            ("mode", mode.to_string()),
                            ("algorithm", algorithm.to_string()),
                            ("K", k.to_string()),
                            ("J", j.to_string()),
                            ("outlier", outlier.is_some().to_string()),
                        ]),
                        resolution_m: res,
                        errors: ErrorSummary::from_errors(&errors, res / 2.0, true),
                        rates: BTreeMap::new(),
                        timings,
                        skipped_trials: skipped,
                    });
                }
            }
        }
    }
    Ok(ExperimentOutput { csv: to_csv(&rows)?, summary: exp.summary(configs) })
}

/// Number of tAPs of subsystem `rap_index` whose blind zone contains `q`.
fn blind_count(scenario: &Scenario, rap_index: usize, q: Vec2, res: f64) -> usize {
    let rap = scenario.raps[rap_index].position_m;
    scenario.taps.iter().filter(|t| sbz_contains(t.position_m, rap, q, res)).count()
}

/// A point where subsystem `blind` keeps fewer than three tAPs and every other keeps all but one.
pub fn sample_blind_spot<R: Rng + ?Sized>(scenario: &Scenario, blind: usize, rng: &mut R) -> Result<Vec2> {
    let res = scenario.range_resolution()?;
    let k = scenario.taps.len();
    let rap = scenario.raps[blind].position_m;
    // Blind regions hug the receiver, so sample around it first.
    for attempt in 0..200_000 {
        let radius = if attempt % 2 == 0 { 4.0 * res } else { scenario.area_radius_m };
        let center = if attempt % 2 == 0 { rap } else { scenario.area_center_m };
        let q = center + Vec2::from_polar(radius * rng.random::<f64>().sqrt(), std::f64::consts::TAU * rng.random::<f64>());
        if q.distance(scenario.area_center_m) > scenario.area_radius_m {
            continue;
        }
        let ok = (0..scenario.raps.len()).all(|r| {
            let b = blind_count(scenario, r, q, res);
            if r == blind {
                k - b < 3
            } else {
                b <= 1 && k - b >= 3
            }
        });
        if ok {
            return Ok(q);
        }
    }
    Err(Error::InvalidArgument(format!("no blind spot found for subsystem {blind}")))
}

#[derive(Debug, Serialize)]
struct MultiRapRow {
    config: String,
    trial: usize,
    target: usize,
    x_m: f64,
    y_m: f64,
    subsystem: String,
    error_m: Option<f64>,
    success: bool,
}

fn run_multi_rap(
    exp: &Experiment,
    j_values: &[usize],
    mode: EstimationMode,
    constructed: bool,
    ideal: &IdealMeasurementModel,
) -> Result<ExperimentOutput> {
    let scenario = &exp.scenario;
    let n_rap = scenario.raps.len();
    if n_rap < 2 {
        return Err(Error::InvalidArgument("multi-rAP experiment needs at least two rAPs".into()));
    }
    if scenario.taps.len() < 3 {
        return Err(Error::InvalidArgument("multi-rAP experiment needs at least three tAPs".into()));
    }
    let res = scenario.range_resolution()?;
    let cfg = solver_config(scenario);
    let names: Vec<String> = (0..n_rap)
        .map(|r| format!("rap{}", scenario.raps[r].id))
        .chain(std::iter::once("fused".to_string()))
        .collect();
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    for &j in j_values {
        if constructed && j < n_rap {
            return Err(Error::InvalidArgument(format!("constructed scenes need J >= {n_rap}")));
        }
        let label = format!("mode={mode};J={j};constructed={constructed}");
        let per_trial = run_trials(exp.trials, |t| -> Result<Vec<MultiRapRow>> {
            let ts = trial_seed(exp.seed, t as u64);
            let mut rng = sub_rng(ts, STREAM_TARGETS);
            let mut targets = scenario.random_targets(j, &mut rng);
            if constructed {
                for (r, tg) in targets.iter_mut().enumerate().take(n_rap) {
                    tg.position = sample_blind_spot(scenario, r, &mut rng)?;
                }
            }
            let mut per_sub = Vec::with_capacity(n_rap);
            for r in 0..n_rap {
                let (scene, measured) = trial_measurements(scenario, r, &targets, mode, ideal, ts)?;
                per_sub.push(localize_all(scene.rap.position, &measured, j, &cfg)?.estimates);
            }
            let fused: Vec<Vec2> = fuse_multi_rap(&per_sub, res).iter().map(|f| f.position).collect();
            let mut out = Vec::new();
            let lists: Vec<Vec<Vec2>> = per_sub
                .iter()
                .map(|s| s.iter().map(|e| e.position).collect())
                .chain(std::iter::once(fused))
                .collect();
            for (name, list) in names.iter().zip(&lists) {
                for (i, e) in position_errors(&targets, list).into_iter().enumerate() {
                    out.push(MultiRapRow {
                        config: label.clone(),
                        trial: t,
                        target: i + 1,
                        x_m: targets[i].position.x,
                        y_m: targets[i].position.y,
                        subsystem: name.clone(),
                        error_m: e,
                        success: e.is_some_and(|e| e <= res / 2.0),
                    });
                }
            }
            Ok(out)
        });
        let mut by_name: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
        for r in per_trial {
            let r = r?;
            for row in &r {
                by_name.entry(row.subsystem.clone()).or_default().push(row.error_m);
            }
            rows.extend(r);
        }
        for name in &names {
            let errors = by_name.remove(name).unwrap_or_default();
            configs.push(ConfigSummary {
                config: key(&[
                    ("mode", mode.to_string()),
                    ("J", j.to_string()),
                    ("constructed", constructed.to_string()),
                    ("subsystem", name.clone()),
                ]),
                resolution_m: res,
                errors: ErrorSummary::from_errors(&errors, res / 2.0, true),
                rates: BTreeMap::new(),
                timings: BTreeMap::new(),
                skipped_trials: 0,
            });
        }
    }
    Ok(ExperimentOutput { csv: to_csv(&rows)?, summary: exp.summary(configs) })
}

#[derive(Debug, Serialize)]
struct TimingRow {
    config: String,
    trial: usize,
    greedy_successes: usize,
    exhaustive_successes: Option<usize>,
    exhaustive_skipped: bool,
}

/// Runs sequentially so the two solvers are timed without contention.
fn run_timing(
    exp: &Experiment,
    k_values: &[usize],
    j_values: &[usize],
    ideal: &IdealMeasurementModel,
) -> Result<ExperimentOutput> {
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    for &k in k_values {
        let scenario = exp.scenario.with_taps(k)?;
        let res = scenario.range_resolution()?;
        let cfg = solver_config(&scenario);
        for &j in j_values {
            let label = format!("K={k};J={j}");
            let (mut tg, mut te) = (Vec::new(), Vec::new());
            let (mut greedy_err, mut exh_err) = (Vec::new(), Vec::new());
            let mut skipped = 0;
            for t in 0..exp.trials {
                let ts = trial_seed(exp.seed, t as u64);
                let targets = scenario.random_targets(j, &mut sub_rng(ts, STREAM_TARGETS));
                let (scene, measured) = trial_measurements(&scenario, 0, &targets, EstimationMode::Ideal, ideal, ts)?;
                let rap = scene.rap.position;
                let start = Instant::now();
                let g = locate(rap, &measured, j, Algorithm::Greedy, &cfg)?;
                tg.push(start.elapsed().as_secs_f64());
                let start = Instant::now();
                let e = locate(rap, &measured, j, Algorithm::Exhaustive, &cfg)?;
                let exh_time = start.elapsed().as_secs_f64();
                let count = |errs: &[Option<f64>]| errs.iter().filter(|e| e.is_some_and(|e| e <= res / 2.0)).count();
                let LocOutcome::Positions(gp) = g else { unreachable!("greedy never skips") };
                let ge = position_errors(&targets, &gp);
                let (exhaustive_successes, exhaustive_skipped) = match e {
                    LocOutcome::Positions(p) => {
                        te.push(exh_time);
                        let ee = position_errors(&targets, &p);
                        let c = count(&ee);
                        exh_err.extend(ee);
                        (Some(c), false)
                    }
                    LocOutcome::Skipped => {
                        skipped += 1;
                        (None, true)
                    }
                };
                rows.push(TimingRow {
                    config: label.clone(),
                    trial: t,
                    greedy_successes: count(&ge),
                    exhaustive_successes,
                    exhaustive_skipped,
                });
                greedy_err.extend(ge);
            }
            let mut timings = BTreeMap::new();
            let mut rates = BTreeMap::new();
            if let Some(s) = TimingStat::from_samples(&tg) {
                timings.insert("greedy".to_string(), s);
            }
            if let Some(s) = TimingStat::from_samples(&te) {
                timings.insert("exhaustive".to_string(), s);
            }
            let exh = ErrorSummary::from_errors(&exh_err, res / 2.0, true);
            rates.insert("exhaustive_success".to_string(), exh.success);
            configs.push(ConfigSummary {
                config: key(&[("K", k.to_string()), ("J", j.to_string())]),
                resolution_m: res,
                errors: ErrorSummary::from_errors(&greedy_err, res / 2.0, true),
                rates,
                timings,
                skipped_trials: skipped,
            });
        }
    }
    Ok(ExperimentOutput { csv: to_csv(&rows)?, summary: exp.summary(configs) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ApSite;

    #[test]
    fn wilson_interval_known_values() {
        let [lo, hi] = wilson_ci95(50, 100);
        assert!((lo - 0.4038).abs() < 1e-3 && (hi - 0.5962).abs() < 1e-3);
        assert_eq!(wilson_ci95(0, 0), [0.0, 1.0]);
        let [lo, hi] = wilson_ci95(10, 10);
        assert!((hi - 1.0).abs() < 1e-12 && (lo - 0.7225).abs() < 1e-3);
    }

    #[test]
    fn trial_seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..100).map(|t| trial_seed(7, t)).collect();
        let b: Vec<u64> = (0..100).map(|t| trial_seed(7, t)).collect();
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 100);
        assert_ne!(trial_seed(8, 0), a[0]);
    }

    #[test]
    fn matching_prefers_closest_pairs() {
        let truth = [0.0f64, 10.0];
        let est = [9.0, 1.0, 50.0];
        let m = greedy_match(2, 3, |t, e| (truth[t] - est[e]).abs());
        assert_eq!(m, vec![Some((1, 1.0)), Some((0, 1.0))]);
        assert_eq!(greedy_match(2, 0, |_, _| 0.0), vec![None, None]);
    }

    #[test]
    fn cdf_step_at_zero_for_exact_errors() {
        let s = ErrorSummary::from_errors(&[Some(0.0); 10], 1.0, false);
        assert!(s.cdf.iter().all(|&(_, e)| e == Some(0.0)));
        assert_eq!(s.success.rate, 1.0);
        let miss = ErrorSummary::from_errors(&[Some(0.5), None], 1.0, false);
        assert_eq!(miss.success.successes, 1);
        assert_eq!(miss.cdf.last().unwrap().1, None);
    }

    #[test]
    fn unknown_experiment_lists_names() {
        let err = Experiment::by_name("bogus", 1, 1).unwrap_err().to_string();
        for n in EXPERIMENT_NAMES {
            assert!(err.contains(n));
        }
    }

    #[test]
    fn exact_ideal_localization_succeeds() {
        let mut exp = Experiment::by_name("localization_suite", 30, 11).unwrap();
        exp.kind = ExperimentKind::LocalizationSuite {
            k_values: vec![3, 5],
            j_values: vec![1, 2, 3],
            modes: vec![EstimationMode::Ideal],
            algorithms: vec![Algorithm::Greedy],
            outlier: None,
            ideal: IdealMeasurementModel::exact(),
        };
        // Every baseline passes far from the disc, so no target is in a blind zone.
        let site = |id, x, y| ApSite { id, position_m: Vec2::new(x, y) };
        exp.scenario.taps = vec![
            site(1, -3000.0, 3000.0),
            site(2, 3000.0, -3000.0),
            site(3, -3000.0, -1000.0),
            site(4, 0.0, -3000.0),
            site(5, -1000.0, -3000.0),
        ];
        exp.scenario.raps = vec![site(6, 3000.0, 3000.0)];
        let out = exp.run().unwrap();
        for c in &out.summary.configs {
            assert_eq!(c.errors.success.rate, 1.0, "{:?}", c.config);
        }
    }

    #[test]
    fn identical_subsystems_fuse_to_the_same_cdf() {
        let mut exp = Experiment::by_name("multi_rap", 20, 5).unwrap();
        exp.kind = ExperimentKind::MultiRap {
            j_values: vec![3],
            mode: EstimationMode::Ideal,
            constructed: false,
            ideal: IdealMeasurementModel::exact(),
        };
        let p = exp.scenario.raps[0].position_m;
        exp.scenario.raps[1].position_m = p;
        let out = exp.run().unwrap();
        let cdf = |s: &str| out.config(&[("subsystem", s)]).unwrap().errors.clone();
        assert_eq!(cdf("rap6"), cdf("rap5"));
        let fused = cdf("fused");
        assert_eq!(fused.success, cdf("rap6").success);
        for (a, b) in fused.cdf.iter().zip(&cdf("rap6").cdf) {
            assert!(a.1.zip(b.1).is_none_or(|(x, y)| (x - y).abs() < 1e-9));
        }
    }

    #[test]
    fn blind_spots_exist_for_both_subsystems() {
        let s = Scenario::preset("multi_rap").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for r in 0..2 {
            sample_blind_spot(&s, r, &mut rng).unwrap();
        }
    }

    #[test]
    fn outlier_moves_one_measurement_far() {
        let mut taps = vec![TapMeasurements {
            position: Vec2::new(-100.0, 0.0),
            set: RangeSet::new(1, vec![500.0, 400.0, 300.0], 6.0),
        }];
        let before = taps[0].set.ranges.clone();
        let rap = Vec2::new(100.0, 0.0);
        let truth = [Vec2::new(0.0, 150.0), Vec2::new(0.0, 190.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        inject_outlier(&mut taps, rap, &truth, &OutlierSpec::default(), &mut rng).unwrap();
        let after = &taps[0].set.ranges;
        let moved: Vec<f64> = after.iter().filter(|r| !before.contains(r)).copied().collect();
        let lost: Vec<f64> = before.iter().filter(|r| !after.contains(r)).copied().collect();
        assert_eq!((moved.len(), lost.len()), (1, 1));
        assert!((moved[0] - lost[0]).abs() >= 5.5 * 6.0);
        for q in truth {
            let d = bistatic_geometry(Vec2::new(-100.0, 0.0), rap, q).d_s;
            assert!((moved[0] - d).abs() > 6.0);
        }
    }
}
