//! 5G NR frame-structure arithmetic.
//!
//! Subcarrier spacing, sampling interval, cyclic-prefix lengths and the
//! maximum transmission bandwidth table. Everything downstream is
//! parameterised by a [`Numerology`] plus a [`BandwidthConfig`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// FFT size of one OFDM symbol (without CP), fixed for every numerology.
pub const FFT_SIZE: usize = 4096;

/// Subcarriers per resource block.
pub const SUBCARRIERS_PER_RB: u32 = 12;

const BASE_SCS_HZ: f64 = 15_000.0;

/// NR basic time unit `T_c = 1 / (480 kHz * 4096)` in seconds.
pub const BASIC_TIME_UNIT_S: f64 = 1.0 / (480_000.0 * 4096.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CpMode {
    Normal,
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyRange {
    Fr1,
    Fr2,
}

/// An OFDM numerology: subcarrier-spacing index `mu` and CP mode.
///
/// Construction validates the pair, so every accessor is infallible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawNumerology", into = "RawNumerology")]
pub struct Numerology {
    mu: u8,
    cp_mode: CpMode,
}

#[derive(Serialize, Deserialize)]
struct RawNumerology {
    mu: u8,
    cp_mode: CpMode,
}

impl TryFrom<RawNumerology> for Numerology {
    type Error = Error;
    fn try_from(raw: RawNumerology) -> Result<Self> {
        Numerology::new(raw.mu, raw.cp_mode)
    }
}

impl From<Numerology> for RawNumerology {
    fn from(n: Numerology) -> Self {
        RawNumerology {
            mu: n.mu,
            cp_mode: n.cp_mode,
        }
    }
}

impl Numerology {
    pub fn new(mu: u8, cp_mode: CpMode) -> Result<Self> {
        if mu > 6 {
            return Err(Error::InvalidMu(mu));
        }
        if cp_mode == CpMode::Extended && mu != 2 {
            return Err(Error::ExtendedCpUnsupported(mu));
        }
        Ok(Self { mu, cp_mode })
    }

    pub fn normal(mu: u8) -> Result<Self> {
        Self::new(mu, CpMode::Normal)
    }

    pub fn mu(&self) -> u8 {
        self.mu
    }

    pub fn cp_mode(&self) -> CpMode {
        self.cp_mode
    }

    /// Subcarrier spacing `2^mu * 15 kHz`.
    pub fn scs_hz(&self) -> f64 {
        BASE_SCS_HZ * f64::from(1u32 << self.mu)
    }

    /// Sampling interval `1 / (4096 * scs)`.
    pub fn sample_interval_s(&self) -> f64 {
        1.0 / (FFT_SIZE as f64 * self.scs_hz())
    }

    pub fn fft_size(&self) -> usize {
        FFT_SIZE
    }

    pub fn symbols_per_slot(&self) -> u32 {
        match self.cp_mode {
            CpMode::Normal => 14,
            CpMode::Extended => 12,
        }
    }

    /// Frequency ranges in which this numerology may be used.
    pub fn frequency_ranges(&self) -> &'static [FrequencyRange] {
        match self.mu {
            0 | 1 => &[FrequencyRange::Fr1],
            2 => &[FrequencyRange::Fr1, FrequencyRange::Fr2],
            _ => &[FrequencyRange::Fr2],
        }
    }

    /// CP length of symbol `l_s` in samples of [`Self::sample_interval_s`].
    pub fn cp_samples(&self, symbol_index_in_slot: u32) -> Result<u32> {
        self.check_index(symbol_index_in_slot)?;
        Ok(match self.cp_mode {
            CpMode::Extended => 1024,
            CpMode::Normal if symbol_index_in_slot == 0 || symbol_index_in_slot == 7 => {
                288 + (1 << (self.mu + 5))
            }
            CpMode::Normal => 288,
        })
    }

    /// CP length of symbol `l_s` in basic time units `T_c`, the form used by TS 38.211.
    pub fn cp_basic_units(&self, symbol_index_in_slot: u32) -> Result<u32> {
        self.check_index(symbol_index_in_slot)?;
        const KAPPA: u32 = 64;
        let shift = u32::from(self.mu);
        Ok(match self.cp_mode {
            CpMode::Extended => (512 * KAPPA) >> shift,
            CpMode::Normal if symbol_index_in_slot == 0 || symbol_index_in_slot == 7 => {
                ((144 * KAPPA) >> shift) + 16 * KAPPA
            }
            CpMode::Normal => (144 * KAPPA) >> shift,
        })
    }

    /// Duration of symbol `l_s` including its cyclic prefix.
    pub fn symbol_period(&self, symbol_index_in_slot: u32) -> Result<f64> {
        let cp = self.cp_samples(symbol_index_in_slot)?;
        Ok((FFT_SIZE as f64 + f64::from(cp)) * self.sample_interval_s())
    }

    /// CP length used for every reused sensing symbol (symbols 0 and 7 are avoided).
    pub fn sensing_cp_samples(&self) -> u32 {
        match self.cp_mode {
            CpMode::Normal => 288,
            CpMode::Extended => 1024,
        }
    }

    /// Uniform symbol period applied to the whole sensing burst.
    pub fn sensing_symbol_period(&self) -> f64 {
        (FFT_SIZE as f64 + f64::from(self.sensing_cp_samples())) * self.sample_interval_s()
    }

    /// Duration of the sensing-symbol cyclic prefix in seconds.
    pub fn sensing_cp_duration(&self) -> f64 {
        f64::from(self.sensing_cp_samples()) * self.sample_interval_s()
    }

    fn check_index(&self, index: u32) -> Result<()> {
        if index >= self.symbols_per_slot() {
            return Err(Error::SymbolIndexOutOfRange {
                index,
                symbols_per_slot: self.symbols_per_slot(),
            });
        }
        Ok(())
    }
}

/// Active-subcarrier configuration for one channel bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthConfig {
    pub channel_bw_hz: f64,
    pub n_rb: u32,
    pub n_subcarriers: u32,
}

/// Channel bandwidths (MHz) that index the columns of [`MAX_RB_TABLE`].
pub const CHANNEL_BANDWIDTHS_MHZ: [u32; 4] = [20, 50, 100, 200];

/// Maximum transmission bandwidth `N_RB` per (mu, FR) row; `None` marks N/A.
pub const MAX_RB_TABLE: [(u8, FrequencyRange, [Option<u32>; 4]); 5] = [
    (0, FrequencyRange::Fr1, [Some(106), Some(270), None, None]),
    (1, FrequencyRange::Fr1, [Some(51), Some(133), Some(273), None]),
    (2, FrequencyRange::Fr1, [Some(24), Some(65), Some(135), None]),
    (2, FrequencyRange::Fr2, [None, Some(66), Some(132), Some(264)]),
    (3, FrequencyRange::Fr2, [None, Some(32), Some(66), Some(132)]),
];

/// Look up the maximum number of resource blocks for a channel bandwidth.
pub fn max_subcarriers(mu: u8, fr: FrequencyRange, channel_bw_hz: f64) -> Result<BandwidthConfig> {
    let not_available = || Error::BandwidthNotAvailable {
        mu,
        fr,
        channel_bw_mhz: channel_bw_hz / 1e6,
    };
    let column = CHANNEL_BANDWIDTHS_MHZ
        .iter()
        .position(|&mhz| (f64::from(mhz) * 1e6 - channel_bw_hz).abs() < 1.0)
        .ok_or_else(not_available)?;
    let n_rb = MAX_RB_TABLE
        .iter()
        .find(|(m, f, _)| *m == mu && *f == fr)
        .and_then(|(_, _, row)| row[column])
        .ok_or_else(not_available)?;
    Ok(BandwidthConfig {
        channel_bw_hz,
        n_rb,
        n_subcarriers: SUBCARRIERS_PER_RB * n_rb,
    })
}

/// Timing quantities consumed by the simulator and the delay-Doppler estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensingTiming {
    pub scs_hz: f64,
    pub symbol_period_s: f64,
    pub fft_size: usize,
    pub n_subcarriers: usize,
}

impl SensingTiming {
    pub fn new(numerology: &Numerology, bandwidth: &BandwidthConfig) -> Self {
        Self {
            scs_hz: numerology.scs_hz(),
            symbol_period_s: numerology.sensing_symbol_period(),
            fft_size: numerology.fft_size(),
            n_subcarriers: bandwidth.n_subcarriers as usize,
        }
    }

    /// Delay spanned by one bin of the zero-padded delay transform.
    pub fn delay_bin_s(&self) -> f64 {
        1.0 / (self.fft_size as f64 * self.scs_hz)
    }

    /// Doppler spanned by one bin of an `n_doppler`-point transform.
    pub fn doppler_bin_hz(&self, n_doppler: usize) -> f64 {
        1.0 / (n_doppler as f64 * self.symbol_period_s)
    }

    /// Maximum unambiguous delay `1/scs`.
    pub fn max_delay_s(&self) -> f64 {
        1.0 / self.scs_hz
    }
}
