use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside the range of {int_bits}.{frac_bits} fixed point")]
    Range {
        value: f64,
        int_bits: u32,
        frac_bits: u32,
    },
    #[error("share modulus tags differ")]
    TagMismatch,
    #[error("correlated randomness item {id} was already consumed")]
    TripleReuse { id: u64 },
    #[error("peer did not answer in time")]
    PeerTimeout,
    #[error("corrupt frame: {0}")]
    FrameCorrupt(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no table entry for the looked-up key")]
    MissingKey,
    #[error("all single-use tables are consumed")]
    TableExhausted,
    #[error("no multi-use table left to advance to")]
    NoTablesLeft,
    #[error("privacy budget of the current table is spent")]
    BudgetExhausted,
    #[error("peer sent an invalid curve point")]
    InvalidPoint,
    #[error("not enough samples for the audit: {0}")]
    InsufficientSamples(String),
    #[error("offline material ran out or arrived out of order: {0}")]
    OfflineUnderprovisioned(String),
    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),
    #[error("bundle version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("connection failed: {0}")]
    ConnectionFailed(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
