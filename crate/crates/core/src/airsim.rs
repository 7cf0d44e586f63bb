//! Frequency-domain symbol grids, sensing channels and noisy reception.
//!
//! Everything lives on the `Nc x M` subcarrier/symbol grid; no time-domain
//! waveform or cyclic prefix is ever materialised.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerology::SensingTiming;
use crate::scene::{PathTruth, SyncError};

const GRID_MAGIC: &[u8; 8] = b"ISACGRID";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Transmitted,
    Received,
    ChannelEstimate,
}

/// `Nc x M` complex grid: rows are subcarriers, columns are symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolGrid {
    pub data: Array2<Complex64>,
    pub kind: GridKind,
}

impl SymbolGrid {
    pub fn new(data: Array2<Complex64>, kind: GridKind) -> Self {
        Self { data, kind }
    }

    pub fn n_subcarriers(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_symbols(&self) -> usize {
        self.data.ncols()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Write the grid as a 16-byte header followed by row-major complex64 pairs.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.n_subcarriers() as u32).to_le_bytes())?;
        w.write_all(&(self.n_symbols() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for z in self.data.iter() {
            buf.extend_from_slice(&(z.re as f32).to_le_bytes());
            buf.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R, kind: GridKind) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..8] != GRID_MAGIC {
            return Err(Error::BadGridFile("wrong magic".into()));
        }
        let nc = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let m = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != nc * m * 8 {
            return Err(Error::BadGridFile(format!(
                "expected {} payload bytes, found {}",
                nc * m * 8,
                body.len()
            )));
        }
        let values: Vec<Complex64> = body
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[0..4].try_into().unwrap());
                let im = f32::from_le_bytes(c[4..8].try_into().unwrap());
                Complex64::new(f64::from(re), f64::from(im))
            })
            .collect();
        let data = Array2::from_shape_vec((nc, m), values)
            .map_err(|e| Error::BadGridFile(e.to_string()))?;
        Ok(Self { data, kind })
    }
}

/// Unit-modulus constellations usable for the reused data symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Constellation {
    #[default]
    Qpsk,
    /// `n`-ary PSK with a point at phase 0.
    Psk(u32),
}

impl Constellation {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> Complex64 {
        match self {
            Constellation::Qpsk => {
                let re = if rng.random::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
                let im = if rng.random::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
                Complex64::new(re, im)
            }
            Constellation::Psk(n) => {
                let k = rng.random_range(0..n.max(1));
                Complex64::from_polar(1.0, 2.0 * PI * f64::from(k) / f64::from(n.max(1)))
            }
        }
    }
}

pub fn generate_symbols(n_subcarriers: usize, n_symbols: usize, seed: u64) -> SymbolGrid {
    generate_symbols_with(n_subcarriers, n_symbols, Constellation::Qpsk, seed)
}

pub fn generate_symbols_with(
    n_subcarriers: usize,
    n_symbols: usize,
    constellation: Constellation,
    seed: u64,
) -> SymbolGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_simple_fn((n_subcarriers, n_symbols), || constellation.draw(&mut rng));
    SymbolGrid::new(data, GridKind::Transmitted)
}

/// Frequency-domain sensing channel `h[i, m]` of one tAP-rAP link.
///
/// `h[i,m] = sum_l a_l exp(-j 2 pi i scs (tau_l + sto)) exp(j 2 pi m T (fd_l + cfo))`
pub fn channel_matrix(
    paths: &[PathTruth],
    sync: SyncError,
    timing: &SensingTiming,
    n_subcarriers: usize,
    n_symbols: usize,
) -> Array2<Complex64> {
    let mut h = Array2::<Complex64>::zeros((n_subcarriers, n_symbols));
    for path in paths {
        let tau = path.delay_s + sync.sto_s;
        let fd = path.doppler_hz + sync.cfo_hz;
        let delay_phase: Vec<Complex64> = (0..n_subcarriers)
            .map(|i| Complex64::cis(-2.0 * PI * i as f64 * timing.scs_hz * tau))
            .collect();
        let doppler_phase: Vec<Complex64> = (0..n_symbols)
            .map(|m| Complex64::cis(2.0 * PI * m as f64 * timing.symbol_period_s * fd) * path.amplitude)
            .collect();
        for ((i, m), v) in h.indexed_iter_mut() {
            *v += delay_phase[i] * doppler_phase[m];
        }
    }
    h
}

fn check_shape(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `s * h + z` with `z` circularly-symmetric Gaussian of variance `noise_power`.
pub fn receive(
    tx: &SymbolGrid,
    channel: &Array2<Complex64>,
    noise_power: f64,
    seed: u64,
) -> Result<SymbolGrid> {
    check_shape(&tx.data, channel)?;
    let mut data = &tx.data * channel;
    if noise_power > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (noise_power / 2.0).sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in data.iter_mut() {
            *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    Ok(SymbolGrid::new(data, GridKind::Received))
}

/// Element-wise `conj(s) * s_hat`.
pub fn channel_estimate(tx: &SymbolGrid, rx: &SymbolGrid) -> Result<SymbolGrid> {
    check_shape(&tx.data, &rx.data)?;
    let mut data = Array2::<Complex64>::zeros(tx.data.dim());
    Zip::from(&mut data)
        .and(&tx.data)
        .and(&rx.data)
        .for_each(|h, s, r| *h = s.conj() * r);
    Ok(SymbolGrid::new(data, GridKind::ChannelEstimate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerology::{max_subcarriers, FrequencyRange, Numerology};

    fn timing() -> SensingTiming {
        let n = Numerology::normal(1).unwrap();
        let bw = max_subcarriers(1, FrequencyRange::Fr1, 50e6).unwrap();
        SensingTiming::new(&n, &bw)
    }

    fn path(delay_s: f64, doppler_hz: f64, amplitude: f64) -> PathTruth {
        PathTruth { tap_id: 1, path_index: 0, delay_s, doppler_hz, amplitude }
    }

    #[test]
    fn symbols_are_unit_modulus_qpsk_and_seeded() {
        let g = generate_symbols(64, 6, 11);
        let r = FRAC_1_SQRT_2;
        for z in g.data.iter() {
            assert!((z.norm() - 1.0).abs() < 1e-12);
            assert!((z.re.abs() - r).abs() < 1e-15 && (z.im.abs() - r).abs() < 1e-15);
        }
        assert_eq!(g, generate_symbols(64, 6, 11));
        assert_ne!(g, generate_symbols(64, 6, 12));
        let p8 = generate_symbols_with(32, 4, Constellation::Psk(8), 1);
        assert!(p8.data.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn channel_identity_and_on_grid_ramp() {
        let t = timing();
        let h = channel_matrix(&[path(0.0, 0.0, 1.0)], SyncError::default(), &t, 40, 5);
        assert!(h.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-12));

        let p0 = 37.0;
        let tau = p0 * t.delay_bin_s();
        let h = channel_matrix(&[path(tau, 0.0, 1.0)], SyncError::default(), &t, 40, 5);
        for ((i, _), z) in h.indexed_iter() {
            let want = Complex64::cis(-2.0 * PI * i as f64 * p0 / 4096.0);
            assert!((z - want).norm() < 1e-9);
        }
    }

    #[test]
    fn channel_is_linear_in_paths() {
        let t = timing();
        let a = path(1.3e-6, 120.0, 0.7);
        let b = path(2.9e-6, -40.0, 0.2);
        let sync = SyncError { sto_s: 5e-9, cfo_hz: 200.0 };
        let both = channel_matrix(&[a, b], sync, &t, 100, 6);
        let sum = channel_matrix(&[a], sync, &t, 100, 6) + channel_matrix(&[b], sync, &t, 100, 6);
        assert!(both.iter().zip(sum.iter()).all(|(x, y)| (x - y).norm() < 1e-12));
    }

    #[test]
    fn noiseless_estimate_reproduces_channel() {
        let t = timing();
        let h = channel_matrix(&[path(1e-6, 50.0, 0.3)], SyncError::default(), &t, 200, 6);
        let tx = generate_symbols(200, 6, 1);
        let rx = receive(&tx, &h, 0.0, 2).unwrap();
        assert_eq!(rx.data, &tx.data * &h);
        let est = channel_estimate(&tx, &rx).unwrap();
        assert!(est.data.iter().zip(h.iter()).all(|(x, y)| (x - y).norm() < 1e-12));
        assert_eq!(est.kind, GridKind::ChannelEstimate);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tx = generate_symbols(10, 2, 1);
        let h = Array2::zeros((10, 3));
        assert!(matches!(receive(&tx, &h, 0.0, 0), Err(Error::ShapeMismatch(_))));
        let rx = SymbolGrid::new(Array2::zeros((9, 2)), GridKind::Received);
        assert!(channel_estimate(&tx, &rx).is_err());
    }

    #[test]
    fn noise_statistics() {
        let n = 1_000_000;
        let tx = SymbolGrid::new(Array2::from_elem((n, 1), Complex64::new(1.0, 0.0)), GridKind::Transmitted);
        let h = Array2::zeros((n, 1));
        let sigma2 = 2.5e-3;
        let rx = receive(&tx, &h, sigma2, 99).unwrap();
        let power = rx.energy() / n as f64;
        assert!((power / sigma2 - 1.0).abs() < 0.01);
        let mean = rx.data.iter().sum::<Complex64>() / n as f64;
        assert!(mean.norm() < 3.0 * sigma2.sqrt() / 1e3);
        // The estimate of a zero channel is rotated noise with unchanged variance.
        let tx = generate_symbols(1000, 100, 4);
        let rx = receive(&tx, &Array2::zeros((1000, 100)), sigma2, 5).unwrap();
        let est = channel_estimate(&tx, &rx).unwrap();
        assert!((est.energy() - rx.energy()).abs() < 1e-9 * rx.energy());
    }

    #[test]
    fn energy_concentrates() {
        let t = timing();
        let paths = [path(1.1e-6, 30.0, 1.0), path(2.3e-6, -80.0, 0.5)];
        let (nc, m) = (1596, 70);
        let h = channel_matrix(&paths, SyncError::default(), &t, nc, m);
        let tx = generate_symbols(nc, m, 8);
        let sigma2 = 0.4;
        let est = channel_estimate(&tx, &receive(&tx, &h, sigma2, 9).unwrap()).unwrap();
        let want = (1.0 + 0.25 + sigma2) * (nc * m) as f64;
        assert!((est.energy() / want - 1.0).abs() < 0.05);
    }

    #[test]
    fn dump_round_trip() {
        let g = generate_symbols(7, 3, 5);
        let mut buf = Vec::new();
        g.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 7 * 3 * 8);
        let back = SymbolGrid::read_dump(buf.as_slice(), GridKind::Transmitted).unwrap();
        assert!(back.data.iter().zip(g.data.iter()).all(|(a, b)| (a - b).norm() < 1e-7));
        buf[0] = b'X';
        assert!(SymbolGrid::read_dump(buf.as_slice(), GridKind::Transmitted).is_err());
    }
}
