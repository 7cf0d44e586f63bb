//! Stage I: delay-Doppler spectrum, iterative path extraction and bistatic ranges.
//!
//! The correlation used throughout is
//! `C(p, q) = sum_i sum_m H[i,m] exp(+j 2 pi p i / Nf) exp(-j 2 pi q m / Nd)`,
//! which is `Nd` times the spectrum value at continuous bin `(p, q)`.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::airsim::{channel_estimate, SymbolGrid};
use crate::error::{Error, Result};
use crate::geometry::SPEED_OF_LIGHT;
use crate::numerology::SensingTiming;

/// Default detection threshold on per-path SNR (dB).
pub const DEFAULT_SNR_THRESHOLD_DB: f64 = 13.0;

/// Smallest power of two that is at least `4 * n_symbols`.
pub fn default_n_doppler(n_symbols: usize) -> usize {
    (4 * n_symbols.max(1)).next_power_of_two()
}

/// Magnitude of the delay-Doppler spectrum, `Nf` delay rows by `Nd` Doppler columns.
#[derive(Debug, Clone)]
pub struct DelayDopplerSpectrum {
    pub values: Array2<f64>,
    pub delay_bin_s: f64,
    pub doppler_bin_hz: f64,
}

impl DelayDopplerSpectrum {
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((p, q), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (p, q);
            }
        }
        best
    }

    /// Signed Doppler (Hz) of column `q`.
    pub fn doppler_of_bin(&self, q: usize) -> f64 {
        signed_bin(q as f64, self.values.ncols()) * self.doppler_bin_hz
    }

    /// Export rows `delay_m, doppler_hz, magnitude_db` for delay bins below `max_delay_bins`.
    pub fn write_csv<W: Write>(&self, w: W, max_delay_bins: Option<usize>) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["delay_m", "doppler_hz", "magnitude_db"])?;
        let rows = max_delay_bins.unwrap_or(self.values.nrows()).min(self.values.nrows());
        let nd = self.values.ncols();
        // Doppler columns in ascending signed order.
        let mut cols: Vec<usize> = (0..nd).collect();
        cols.sort_by(|a, b| signed_bin(*a as f64, nd).total_cmp(&signed_bin(*b as f64, nd)));
        for p in 0..rows {
            for &q in &cols {
                let mag = self.values[[p, q]];
                out.write_record(&[
                    format!("{:.4}", p as f64 * self.delay_bin_s * SPEED_OF_LIGHT),
                    format!("{:.3}", self.doppler_of_bin(q)),
                    format!("{:.3}", 20.0 * mag.max(1e-300).log10()),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn signed_bin(q: f64, nd: usize) -> f64 {
    let n = nd as f64;
    let q = q.rem_euclid(n);
    if q >= n / 2.0 {
        q - n
    } else {
        q
    }
}

/// FFT plans reused across extraction iterations.
struct SpectrumEngine {
    nf: usize,
    nd: usize,
    inverse: Arc<dyn Fft<f64>>,
    forward: Arc<dyn Fft<f64>>,
}

impl SpectrumEngine {
    fn new(nf: usize, nd: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            nf,
            nd,
            inverse: planner.plan_fft_inverse(nf),
            forward: planner.plan_fft_forward(nd),
        }
    }

    /// `|P|` with zero padding of both axes and `1/Nd` scaling.
    fn magnitudes(&self, h: &Array2<Complex64>) -> Array2<f64> {
        let (nc, m) = h.dim();
        let (nf, nd) = (self.nf, self.nd);
        let mut cols = vec![Complex64::new(0.0, 0.0); nf * m];
        for (j, chunk) in cols.chunks_exact_mut(nf).enumerate() {
            for i in 0..nc {
                chunk[i] = h[[i, j]];
            }
        }
        self.inverse.process(&mut cols);
        let mut rows = vec![Complex64::new(0.0, 0.0); nf * nd];
        for (p, chunk) in rows.chunks_exact_mut(nd).enumerate() {
            for j in 0..m {
                chunk[j] = cols[j * nf + p];
            }
        }
        self.forward.process(&mut rows);
        let scale = 1.0 / nd as f64;
        Array2::from_shape_vec((nf, nd), rows.iter().map(|z| z.norm() * scale).collect())
            .expect("shape matches buffer")
    }
}

fn check_doppler(h: &Array2<Complex64>, n_doppler: usize, nf: usize) -> Result<()> {
    if n_doppler < h.ncols() {
        return Err(Error::InvalidArgument(format!(
            "n_doppler {} is smaller than the number of symbols {}",
            n_doppler,
            h.ncols()
        )));
    }
    if h.nrows() > nf {
        return Err(Error::InvalidArgument(format!(
            "{} subcarriers exceed the transform size {}",
            h.nrows(),
            nf
        )));
    }
    Ok(())
}

pub fn delay_doppler_spectrum(
    estimate: &SymbolGrid,
    n_doppler: usize,
    timing: &SensingTiming,
) -> Result<DelayDopplerSpectrum> {
    check_doppler(&estimate.data, n_doppler, timing.fft_size)?;
    let engine = SpectrumEngine::new(timing.fft_size, n_doppler);
    Ok(DelayDopplerSpectrum {
        values: engine.magnitudes(&estimate.data),
        delay_bin_s: timing.delay_bin_s(),
        doppler_bin_hz: timing.doppler_bin_hz(n_doppler),
    })
}

/// Complex correlation `C(p, q)` at continuous bins.
pub fn correlation(h: &Array2<Complex64>, p: f64, q: f64, nf: usize, nd: usize) -> Complex64 {
    let w = collapse_symbols(h, q, nd);
    horner(&w, Complex64::cis(2.0 * PI * p / nf as f64))
}

// sum_k c[k] z^k
fn horner(c: &[Complex64], z: Complex64) -> Complex64 {
    c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &ck| acc * z + ck)
}

// w_i = sum_m H[i,m] exp(-j 2 pi q m / Nd)
fn collapse_symbols(h: &Array2<Complex64>, q: f64, nd: usize) -> Vec<Complex64> {
    let y: Vec<Complex64> = (0..h.ncols())
        .map(|m| Complex64::cis(-2.0 * PI * q * m as f64 / nd as f64))
        .collect();
    h.rows().into_iter().map(|row| row.iter().zip(&y).map(|(a, b)| a * b).sum()).collect()
}

// v_m = sum_i H[i,m] exp(+j 2 pi p i / Nf)
fn collapse_subcarriers(h: &Array2<Complex64>, p: f64, nf: usize) -> Vec<Complex64> {
    let z = Complex64::cis(2.0 * PI * p / nf as f64);
    h.columns()
        .into_iter()
        .map(|col| col.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c))
        .collect()
}

const SCAN_POINTS: usize = 21;
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Maximise `f` over `[lo, hi]`: coarse scan then golden-section on the best bracket.
fn line_maximise(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let mut best_k = 0;
    let mut best_v = f64::NEG_INFINITY;
    for k in 0..SCAN_POINTS {
        let v = f(lo + k as f64 * step);
        if v > best_v {
            best_v = v;
            best_k = k;
        }
    }
    let mut a = lo + best_k.saturating_sub(1) as f64 * step;
    let mut b = (lo + (best_k + 1) as f64 * step).min(hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    // The scan point may beat the bracket interior when the bracket hits the box edge.
    let edge = lo + best_k as f64 * step;
    if f(edge) > f(x) {
        edge
    } else {
        x
    }
}

/// Width below which the alternating line searches stop.
pub const REFINE_TOLERANCE_BINS: f64 = 1e-9;

/// Refine a coarse spectrum peak inside the `+-1` bin box around it.
pub fn refine_peak_estimate(
    h: &Array2<Complex64>,
    coarse: (usize, usize),
    nf: usize,
    nd: usize,
) -> (f64, f64) {
    let (p0, q0) = (coarse.0 as f64, coarse.1 as f64);
    let (mut p, mut q) = (p0, q0);
    for _ in 0..40 {
        let w = collapse_symbols(h, q, nd);
        let p_new = line_maximise(
            |x| horner(&w, Complex64::cis(2.0 * PI * x / nf as f64)).norm_sqr(),
            p0 - 1.0,
            p0 + 1.0,
            REFINE_TOLERANCE_BINS,
        );
        let v = collapse_subcarriers(h, p_new, nf);
        let q_new = line_maximise(
            |y| horner(&v, Complex64::cis(-2.0 * PI * y / nd as f64)).norm_sqr(),
            q0 - 1.0,
            q0 + 1.0,
            REFINE_TOLERANCE_BINS,
        );
        let moved = (p_new - p).abs().max((q_new - q).abs());
        p = p_new;
        q = q_new;
        if moved < 10.0 * REFINE_TOLERANCE_BINS {
            break;
        }
    }
    (p, q)
}

/// Refine a coarse peak of the channel estimate formed from `tx` and `rx`.
pub fn refine_peak(
    tx: &SymbolGrid,
    rx: &SymbolGrid,
    coarse: (usize, usize),
    timing: &SensingTiming,
    n_doppler: usize,
) -> Result<(f64, f64)> {
    let est = channel_estimate(tx, rx)?;
    check_doppler(&est.data, n_doppler, timing.fft_size)?;
    Ok(refine_peak_estimate(&est.data, coarse, timing.fft_size, n_doppler))
}

/// Channel component `alpha * exp(-j 2 pi i p / Nf) * exp(j 2 pi m q / Nd)`.
pub fn estimate_component(
    alpha: Complex64,
    p: f64,
    q: f64,
    dims: (usize, usize),
    nf: usize,
    nd: usize,
) -> Array2<Complex64> {
    let delay: Vec<Complex64> = (0..dims.0)
        .map(|i| Complex64::cis(-2.0 * PI * i as f64 * p / nf as f64))
        .collect();
    let doppler: Vec<Complex64> = (0..dims.1)
        .map(|m| alpha * Complex64::cis(2.0 * PI * m as f64 * q / nd as f64))
        .collect();
    Array2::from_shape_fn(dims, |(i, m)| delay[i] * doppler[m])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    #[serde(with = "complex_pair")]
    pub amplitude: Complex64,
    pub delay_s: f64,
    pub doppler_hz: f64,
    pub refined_bins: (f64, f64),
    pub snr_db: f64,
    pub valid: bool,
}

mod complex_pair {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(z: &Complex64, s: S) -> Result<S::Ok, S::Error> {
        [z.re, z.im].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
        let [re, im] = <[f64; 2]>::deserialize(d)?;
        Ok(Complex64::new(re, im))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PathCount {
    /// Extract exactly this many paths (LoS included).
    Known { n_paths: usize },
    /// Extract until the next path falls below the SNR threshold.
    Threshold { max_paths: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub path_count: PathCount,
    /// `None` picks [`default_n_doppler`].
    pub n_doppler: Option<usize>,
    pub snr_threshold_db: f64,
}

impl ExtractionConfig {
    pub fn known(n_paths: usize) -> Self {
        Self {
            path_count: PathCount::Known { n_paths },
            n_doppler: None,
            snr_threshold_db: DEFAULT_SNR_THRESHOLD_DB,
        }
    }

    pub fn n_doppler_for(&self, n_symbols: usize) -> usize {
        self.n_doppler.unwrap_or_else(|| default_n_doppler(n_symbols))
    }
}

fn snr_db(alpha: Complex64, cells: f64, noise_var: f64) -> f64 {
    let energy = alpha.norm_sqr() * cells;
    if noise_var <= 0.0 {
        return if energy > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    10.0 * (energy / noise_var).log10()
}

/// Iterative extraction on a channel estimate. Paths come out in extraction order.
pub fn extract_paths_from_estimate(
    estimate: &Array2<Complex64>,
    timing: &SensingTiming,
    config: &ExtractionConfig,
) -> Result<Vec<PathEstimate>> {
    let (nc, m) = estimate.dim();
    let nd = config.n_doppler_for(m);
    let nf = timing.fft_size;
    check_doppler(estimate, nd, nf)?;
    let max_paths = match config.path_count {
        PathCount::Known { n_paths } | PathCount::Threshold { max_paths: n_paths } => n_paths,
    };
    if max_paths == 0 {
        return Err(Error::InvalidArgument("at least one path must be extracted".into()));
    }
    let engine = SpectrumEngine::new(nf, nd);
    let cells = (nc * m) as f64;
    let mut residual = estimate.clone();
    let mut out = Vec::with_capacity(max_paths);
    for _ in 0..max_paths {
        let spectrum = engine.magnitudes(&residual);
        let mut coarse = (0, 0);
        let mut best = f64::NEG_INFINITY;
        for ((p, q), &v) in spectrum.indexed_iter() {
            if v > best {
                best = v;
                coarse = (p, q);
            }
        }
        let (p, q) = refine_peak_estimate(&residual, coarse, nf, nd);
        let alpha = correlation(&residual, p, q, nf, nd) / cells;
        let component = estimate_component(alpha, p, q, (nc, m), nf, nd);
        let next = &residual - &component;
        let path = PathEstimate {
            amplitude: alpha,
            delay_s: p.rem_euclid(nf as f64) * timing.delay_bin_s(),
            doppler_hz: signed_bin(q, nd) * timing.doppler_bin_hz(nd),
            refined_bins: (p, q),
            snr_db: 0.0,
            valid: true,
        };
        if let PathCount::Threshold { .. } = config.path_count {
            let noise_var = next.iter().map(|z| z.norm_sqr()).sum::<f64>() / cells;
            if snr_db(alpha, cells, noise_var) < config.snr_threshold_db {
                break;
            }
        }
        residual = next;
        out.push(path);
    }
    let noise_var = residual.iter().map(|z| z.norm_sqr()).sum::<f64>() / cells;
    for path in &mut out {
        path.snr_db = snr_db(path.amplitude, cells, noise_var);
        path.valid = path.snr_db >= config.snr_threshold_db;
    }
    Ok(out)
}

pub fn extract_paths(
    tx: &SymbolGrid,
    rx: &SymbolGrid,
    timing: &SensingTiming,
    config: &ExtractionConfig,
) -> Result<Vec<PathEstimate>> {
    let est = channel_estimate(tx, rx)?;
    extract_paths_from_estimate(&est.data, timing, config)
}

/// Bistatic range measurements of one tAP, sorted in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeSet {
    pub tap_id: u32,
    pub ranges: Vec<f64>,
    pub resolution: f64,
}

impl RangeSet {
    pub fn new(tap_id: u32, mut ranges: Vec<f64>, resolution: f64) -> Self {
        ranges.sort_by(|a, b| b.total_cmp(a));
        Self { tap_id, ranges, resolution }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compensation {
    pub range_set: RangeSet,
    pub sto_s: f64,
    pub cfo_hz: f64,
    /// Position of the LoS path in the input list.
    pub los_index: usize,
}

/// Pick the LoS path, estimate STO/CFO from it and turn the rest into ranges.
///
/// `doppler_resolution_hz` is `1/(M T)`; the LoS Doppler must stay within twice that.
pub fn compensate_and_range(
    paths: &[PathEstimate],
    tap_id: u32,
    baseline_m: f64,
    range_resolution: f64,
    doppler_resolution_hz: f64,
    max_delay_s: f64,
) -> Result<Compensation> {
    let gate = 2.0 * doppler_resolution_hz;
    let los_index = match paths.first() {
        None => return Err(Error::NoLosCandidate),
        Some(first) if first.doppler_hz.abs() < gate => 0,
        Some(_) => {
            let best = paths
                .iter()
                .take(2)
                .enumerate()
                .min_by(|a, b| a.1.doppler_hz.abs().total_cmp(&b.1.doppler_hz.abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if paths[best].doppler_hz.abs() >= gate {
                return Err(Error::NoLosCandidate);
            }
            best
        }
    };
    let los = paths[los_index];
    let sto_s = los.delay_s - baseline_m / SPEED_OF_LIGHT;
    let cfo_hz = los.doppler_hz;
    let ranges = paths
        .iter()
        .enumerate()
        .filter(|(i, p)| *i != los_index && p.valid)
        .map(|(_, p)| SPEED_OF_LIGHT * (p.delay_s - sto_s).rem_euclid(max_delay_s))
        .filter(|d| *d > 0.0)
        .collect();
    Ok(Compensation {
        range_set: RangeSet::new(tap_id, ranges, range_resolution),
        sto_s,
        cfo_hz,
        los_index,
    })
}
