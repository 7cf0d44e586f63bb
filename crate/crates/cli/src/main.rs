//! `isac`: run scenes, localize targets and sweep Monte Carlo experiments.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use isac_core::estimator::{default_n_doppler, delay_doppler_spectrum};
use isac_core::harness::{measured_ranges, Algorithm, EstimationMode, Experiment, ExperimentKind, EXPERIMENT_NAMES};
use isac_core::locator::{fuse_multi_rap, localize_all, LocationEstimate};
use isac_core::oracle::{exhaustive_associate, ideal_ranges, IdealMeasurementModel, IdealTap};
use isac_core::pipeline::{sense_scene, simulate_link, PathMode, SensingConfig};
use isac_core::scenario::{Scenario, PRESET_NAMES};
use isac_core::{Error, RangeSet, SolverConfig, SyncModel, TapMeasurements, Vec2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "isac", version, about = "Cooperative bistatic OFDM sensing simulator")]
struct Cli {
    /// Root seed; every output is a pure function of the configuration and this seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for Monte Carlo trials (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scene and write range sets and path estimates.
    Simulate(SimulateArgs),
    /// Localize targets from a range-set file or a freshly simulated scene.
    Localize(LocalizeArgs),
    /// Run a named Monte Carlo experiment and write CSV and JSON summaries.
    Montecarlo(MontecarloArgs),
    /// List the embedded scenarios, or print one as TOML.
    Presets {
        /// Print this preset as a scenario file.
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SyncLevel {
    Perfect,
    Typical,
}

#[derive(Args, Clone)]
struct SceneArgs {
    /// Embedded scenario name (see `isac presets`).
    #[arg(long, conflicts_with = "scenario")]
    preset: Option<String>,
    /// Scenario TOML file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Number of random targets (ignored when the scenario lists fixed targets).
    #[arg(long, short = 'J', default_value_t = 3)]
    targets: usize,
    /// Use only the first K tAPs of the scenario.
    #[arg(long, short = 'K')]
    taps: Option<usize>,
    #[arg(long)]
    mu: Option<u8>,
    #[arg(long)]
    bandwidth_mhz: Option<f64>,
    #[arg(long)]
    tx_power_dbm: Option<f64>,
    #[arg(long)]
    carrier_hz: Option<f64>,
    #[arg(long, value_enum)]
    sync: Option<SyncLevel>,
    /// Reused OFDM symbols M.
    #[arg(long, default_value_t = isac_core::pipeline::DEFAULT_SENSING_SYMBOLS)]
    symbols: usize,
    /// Doppler transform length N_D (default: smallest power of two >= 4M).
    #[arg(long)]
    n_doppler: Option<usize>,
    /// Extract paths until the SNR threshold instead of J + 1 paths, up to this many.
    #[arg(long)]
    max_paths: Option<usize>,
}

impl SceneArgs {
    fn scenario(&self) -> Result<Scenario, Error> {
        let mut s = match (&self.preset, &self.scenario) {
            (_, Some(path)) => Scenario::load(path)?,
            (Some(name), None) => Scenario::preset(name)?,
            (None, None) => Scenario::preset("fig11")?,
        };
        if let Some(mu) = self.mu {
            s.mu = mu;
            s.numerology()?;
            if mu >= 3 {
                s.frequency_range = isac_core::FrequencyRange::Fr2;
            }
        }
        if let Some(bw) = self.bandwidth_mhz {
            s.channel_bandwidth_hz = bw * 1e6;
        }
        if let Some(p) = self.tx_power_dbm {
            s.tx_power_dbm = p;
        }
        if let Some(c) = self.carrier_hz {
            s.carrier_hz = c;
        }
        match self.sync {
            Some(SyncLevel::Perfect) => s.sync = SyncModel::PERFECT,
            Some(SyncLevel::Typical) => s.sync = SyncModel::typical(),
            None => {}
        }
        if let Some(k) = self.taps {
            s = s.with_taps(k)?;
        }
        s.validate()?;
        Ok(s)
    }

    fn sensing(&self) -> Result<SensingConfig, Error> {
        if self.symbols == 0 {
            return Err(Error::InvalidArgument("--symbols must be positive".into()));
        }
        Ok(SensingConfig {
            n_symbols: self.symbols,
            n_doppler: self.n_doppler,
            path_mode: match self.max_paths {
                Some(max_paths) => PathMode::Threshold { max_paths },
                None => PathMode::KnownTargets,
            },
            ..SensingConfig::default()
        })
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Also write the initial delay-Doppler spectrum of each link as CSV.
    #[arg(long)]
    spectrum: bool,
    /// Delay bins kept in spectrum CSVs.
    #[arg(long, default_value_t = 512)]
    spectrum_delay_bins: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Real,
    Ideal,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Greedy,
    Exhaustive,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Range-set file written by `simulate`; without it the scene is simulated here.
    #[arg(long)]
    ranges: Option<PathBuf>,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, value_enum, default_value = "real")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "greedy")]
    algorithm: AlgorithmArg,
    /// Fuse the results of every rAP in the scenario.
    #[arg(long)]
    fuse: bool,
}

#[derive(Args)]
struct MontecarloArgs {
    /// One of: range_cdf, success_vs_power, localization_suite, multi_rap, timing.
    #[arg(long)]
    experiment: String,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    /// Replace the experiment's default scenario with a preset.
    #[arg(long, conflicts_with = "scenario")]
    preset: Option<String>,
    /// Replace the experiment's default scenario with a TOML file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Full experiment definition (TOML `kind = ...` table); overrides the sweep flags.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Comma-separated J values.
    #[arg(long, value_delimiter = ',')]
    j: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TapRanges {
    id: u32,
    position_m: Vec2,
    resolution_m: f64,
    ranges_m: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RangeFile {
    rap_id: u32,
    rap_position_m: Vec2,
    targets: usize,
    taps: Vec<TapRanges>,
}

impl RangeFile {
    fn measurements(&self) -> Vec<TapMeasurements> {
        self.taps
            .iter()
            .map(|t| TapMeasurements {
                position: t.position_m,
                set: RangeSet::new(t.id, t.ranges_m.clone(), t.resolution_m),
            })
            .collect()
    }
}

fn range_file(rap_id: u32, rap: Vec2, targets: usize, m: &[TapMeasurements]) -> RangeFile {
    RangeFile {
        rap_id,
        rap_position_m: rap,
        targets,
        taps: m
            .iter()
            .map(|t| TapRanges {
                id: t.set.tap_id,
                position_m: t.position,
                resolution_m: t.set.resolution,
                ranges_m: t.set.ranges.clone(),
            })
            .collect(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn scene_targets(s: &Scenario, j: usize, seed: u64) -> Vec<isac_core::Target> {
    if s.targets.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        s.random_targets(j, &mut rng)
    } else {
        s.fixed_targets()
    }
}

fn sync_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

#[derive(Serialize)]
struct LinkReport {
    tap_id: u32,
    /// `ok`, or `no_los` when no line-of-sight path could be identified.
    status: &'static str,
    truths: Vec<isac_core::PathTruth>,
    paths: Vec<isac_core::PathEstimate>,
    sto_estimate_s: Option<f64>,
    cfo_estimate_hz: Option<f64>,
    sto_true_s: f64,
    cfo_true_hz: f64,
}

#[derive(Serialize)]
struct SimulateReport {
    scenario: String,
    seed: u64,
    targets: Vec<isac_core::Target>,
    links: Vec<LinkReport>,
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> Result<(), Error> {
    let s = args.scene.scenario()?;
    let cfg = args.scene.sensing()?;
    let targets = scene_targets(&s, args.scene.targets, cli.seed);
    let scene = s.build_scene(0, targets.clone(), &s.sync, &mut sync_rng(cli.seed))?;
    let links = sense_scene(&scene, &cfg, cli.seed)?;
    let mut measured = Vec::new();
    let mut reports = Vec::new();
    for (k, link) in links.into_iter().enumerate() {
        let tap = &scene.taps[k];
        measured.push(TapMeasurements {
            position: tap.position,
            set: link
                .compensation
                .as_ref()
                .map(|c| c.range_set.clone())
                .unwrap_or_else(|| RangeSet::new(tap.id, Vec::new(), tap.range_resolution())),
        });
        reports.push(LinkReport {
            tap_id: tap.id,
            status: if link.compensation.is_some() { "ok" } else { "no_los" },
            sto_estimate_s: link.compensation.as_ref().map(|c| c.sto_s),
            cfo_estimate_hz: link.compensation.as_ref().map(|c| c.cfo_hz),
            sto_true_s: scene.sync[k].sto_s,
            cfo_true_hz: scene.sync[k].cfo_hz,
            truths: link.truths,
            paths: link.paths,
        });
        if args.spectrum {
            let grids = simulate_link(&scene, k, &cfg, cli.seed)?;
            let nd = cfg.n_doppler.unwrap_or_else(|| default_n_doppler(cfg.n_symbols));
            let spec = delay_doppler_spectrum(&grids.estimate, nd, &tap.timing())?;
            std::fs::create_dir_all(&cli.out)?;
            let f = File::create(cli.out.join(format!("spectrum_tap{}.csv", tap.id)))?;
            spec.write_csv(BufWriter::new(f), Some(args.spectrum_delay_bins))?;
        }
    }
    write_json(
        &cli.out.join("ranges.json"),
        &range_file(s.raps[0].id, s.raps[0].position_m, targets.len(), &measured),
    )?;
    write_json(
        &cli.out.join("simulate.json"),
        &SimulateReport { scenario: s.name.clone(), seed: cli.seed, targets, links: reports },
    )?;
    let ok = measured.iter().filter(|m| !m.set.is_empty()).count();
    println!("{} links simulated, {} with ranges; wrote {}", measured.len(), ok, cli.out.display());
    Ok(())
}

#[derive(Serialize)]
struct LocalizeReport {
    algorithm: &'static str,
    rap_id: u32,
    estimates: Vec<LocationEstimate>,
    leftover: Vec<(u32, f64)>,
}

#[derive(Serialize)]
struct LocalizeOutput {
    seed: u64,
    subsystems: Vec<LocalizeReport>,
    fused: Option<Vec<isac_core::locator::FusedEstimate>>,
}

fn localize_one(rf: &RangeFile, algorithm: AlgorithmArg, cfg: &SolverConfig) -> Result<LocalizeReport, Error> {
    let m = rf.measurements();
    if m.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "localization needs at least three tAPs, got K={}",
            m.len()
        )));
    }
    Ok(match algorithm {
        AlgorithmArg::Greedy => {
            let r = localize_all(rf.rap_position_m, &m, rf.targets, cfg)?;
            LocalizeReport { algorithm: "greedy", rap_id: rf.rap_id, estimates: r.estimates, leftover: r.leftover }
        }
        AlgorithmArg::Exhaustive => {
            let r = exhaustive_associate(rf.rap_position_m, &m, rf.targets, cfg.sigma, &cfg.gn, cfg.service_area.as_ref())?;
            let estimates = r
                .association
                .iter()
                .zip(&r.locations)
                .filter_map(|(assoc, loc)| {
                    loc.map(|position| LocationEstimate {
                        position,
                        supporting_taps: m.iter().zip(assoc).filter(|(_, &i)| i > 0).map(|(t, _)| t.set.tap_id).collect(),
                        objective: f64::NAN,
                        per_tap_residuals: Vec::new(),
                        association: m.iter().zip(assoc).filter(|(_, &i)| i > 0).map(|(t, &i)| (t.set.tap_id, i)).collect(),
                    })
                })
                .collect();
            LocalizeReport { algorithm: "exhaustive", rap_id: rf.rap_id, estimates, leftover: Vec::new() }
        }
    })
}

fn cmd_localize(cli: &Cli, args: &LocalizeArgs) -> Result<(), Error> {
    let mut cfg = SolverConfig::default();
    let files: Vec<RangeFile> = if let Some(path) = &args.ranges {
        let text = std::fs::read_to_string(path)?;
        vec![serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?]
    } else {
        let s = args.scene.scenario()?;
        cfg.service_area = Some(s.service_area());
        let targets = scene_targets(&s, args.scene.targets, cli.seed);
        let raps = if args.fuse { s.raps.len() } else { 1 };
        let mut out = Vec::new();
        for r in 0..raps {
            let scene = s.build_scene(r, targets.clone(), &s.sync, &mut sync_rng(cli.seed))?;
            let m = match args.mode {
                ModeArg::Real => measured_ranges(&scene, &args.scene.sensing()?, cli.seed.wrapping_add(r as u64))?,
                ModeArg::Ideal => {
                    let taps: Vec<IdealTap> = scene
                        .taps
                        .iter()
                        .map(|t| IdealTap { id: t.id, position: t.position, resolution: t.range_resolution() })
                        .collect();
                    let pos: Vec<Vec2> = targets.iter().map(|t| t.position).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
                    rng.set_stream(3 + r as u64);
                    ideal_ranges(scene.rap.position, &taps, &pos, &IdealMeasurementModel::default(), &mut rng)
                        .into_iter()
                        .zip(&taps)
                        .map(|(set, t)| TapMeasurements { position: t.position, set })
                        .collect()
                }
            };
            out.push(range_file(scene.rap.id, scene.rap.position, targets.len(), &m));
        }
        out
    };
    let subsystems = files
        .iter()
        .map(|f| localize_one(f, args.algorithm, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let fused = (subsystems.len() > 1).then(|| {
        let sets: Vec<Vec<LocationEstimate>> = subsystems.iter().map(|s| s.estimates.clone()).collect();
        let res = files[0].taps.iter().map(|t| t.resolution_m).fold(f64::INFINITY, f64::min);
        fuse_multi_rap(&sets, res)
    });
    let n: usize = subsystems.iter().map(|s| s.estimates.len()).sum();
    write_json(&cli.out.join("estimates.json"), &LocalizeOutput { seed: cli.seed, subsystems, fused })?;
    println!("{n} location estimates; wrote {}", cli.out.join("estimates.json").display());
    Ok(())
}

fn cmd_montecarlo(cli: &Cli, args: &MontecarloArgs) -> Result<(), Error> {
    let mut exp = Experiment::by_name(&args.experiment, args.trials, cli.seed)?;
    if let Some(name) = &args.preset {
        exp.scenario = Scenario::preset(name)?;
    }
    if let Some(path) = &args.scenario {
        exp.scenario = Scenario::load(path)?;
    }
    if let Some(path) = &args.params {
        let kind: ExperimentKind = toml::from_str(&std::fs::read_to_string(path)?)?;
        if kind.name() != exp.kind.name() {
            return Err(Error::InvalidArgument(format!(
                "params file describes {} but --experiment is {}",
                kind.name(),
                exp.kind.name()
            )));
        }
        exp.kind = kind;
    }
    let mode = args.mode.map(|m| match m {
        ModeArg::Real => EstimationMode::Real,
        ModeArg::Ideal => EstimationMode::Ideal,
    });
    let algorithm = args.algorithm.map(|a| match a {
        AlgorithmArg::Greedy => Algorithm::Greedy,
        AlgorithmArg::Exhaustive => Algorithm::Exhaustive,
    });
    match &mut exp.kind {
        ExperimentKind::LocalizationSuite { k_values, j_values, modes, algorithms, .. } => {
            if let Some(k) = &args.k {
                *k_values = k.clone();
            }
            if let Some(j) = &args.j {
                *j_values = j.clone();
            }
            if let Some(m) = mode {
                *modes = vec![m];
            }
            if let Some(a) = algorithm {
                *algorithms = vec![a];
            }
        }
        ExperimentKind::Timing { k_values, j_values, .. } => {
            if let Some(k) = &args.k {
                *k_values = k.clone();
            }
            if let Some(j) = &args.j {
                *j_values = j.clone();
            }
        }
        ExperimentKind::MultiRap { j_values, mode: m, .. } => {
            if let Some(j) = &args.j {
                *j_values = j.clone();
            }
            if let Some(mm) = mode {
                *m = mm;
            }
        }
        ExperimentKind::RangeCdf { cases, .. } => {
            if let Some(j) = &args.j {
                let syncs: Vec<SyncModel> = cases.iter().map(|c| c.sync).fold(Vec::new(), |mut acc, s| {
                    if !acc.contains(&s) {
                        acc.push(s);
                    }
                    acc
                });
                let template = cases[0];
                *cases = j
                    .iter()
                    .flat_map(|&targets| syncs.iter().map(move |&sync| isac_core::harness::RangeCase { targets, sync, ..template }))
                    .collect();
            }
        }
        ExperimentKind::SuccessVsPower { .. } => {}
    }
    if exp.trials == 0 {
        return Err(Error::InvalidArgument("--trials must be positive".into()));
    }
    let out = exp.run()?;
    let (csv, json) = out.write_to(&cli.out)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn cmd_presets(show: Option<&str>) -> Result<(), Error> {
    match show {
        Some(name) => print!("{}", Scenario::preset(name)?.to_toml_string()),
        None => {
            for name in PRESET_NAMES {
                let s = Scenario::preset(name)?;
                println!(
                    "{name:<10} {} tAP(s), {} rAP(s), mu={}, {} MHz, R={} m",
                    s.taps.len(),
                    s.raps.len(),
                    s.mu,
                    s.channel_bandwidth_hz / 1e6,
                    s.area_radius_m
                );
            }
            println!("experiments: {}", EXPERIMENT_NAMES.join(", "));
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Localize(a) => cmd_localize(cli, a),
        Command::Montecarlo(a) => cmd_montecarlo(cli, a),
        Command::Presets { show } => cmd_presets(show.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
