use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numerology index mu={0} is outside 0..=6")]
    InvalidMu(u8),
    #[error("extended cyclic prefix is only defined for mu=2 (got mu={0})")]
    ExtendedCpUnsupported(u8),
    #[error("symbol index {index} out of range for a slot of {symbols_per_slot} symbols")]
    SymbolIndexOutOfRange { index: u32, symbols_per_slot: u32 },
    #[error("no transmission bandwidth configuration for mu={mu}, {fr:?}, {channel_bw_mhz} MHz")]
    BandwidthNotAvailable {
        mu: u8,
        fr: crate::numerology::FrequencyRange,
        channel_bw_mhz: f64,
    },
    #[error("grid shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("target coincides with an access point")]
    CoincidentTarget,
    #[error("no line-of-sight candidate among extracted paths")]
    NoLosCandidate,
    #[error("range-sum system is rank deficient (collinear transmitters)")]
    RankDeficient,
    #[error("Gauss-Newton failed to converge")]
    SolverDiverged,
    #[error("no feasible association survived pruning")]
    NoFeasibleAssociation,
    #[error("exhaustive search size {0} exceeds the guard")]
    SearchTooLarge(u128),
    #[error("unknown experiment {name:?}; valid names: {valid}")]
    UnknownExperiment { name: String, valid: String },
    #[error("unknown preset {name:?}; valid names: {valid}")]
    UnknownPreset { name: String, valid: String },
    #[error("bad grid file: {0}")]
    BadGridFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("scenario parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for errors caused by invalid user input rather than a failed computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidMu(_)
                | Error::ExtendedCpUnsupported(_)
                | Error::SymbolIndexOutOfRange { .. }
                | Error::BandwidthNotAvailable { .. }
                | Error::InvalidArgument(_)
                | Error::UnknownExperiment { .. }
                | Error::UnknownPreset { .. }
                | Error::Toml(_)
                | Error::BadGridFile(_)
        )
    }
}
