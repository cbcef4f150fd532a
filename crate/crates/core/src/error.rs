use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes, expected \"BAT1\"")]
    BadMagic,

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("unknown dtype code {0}")]
    BadDtype(u8),

    #[error("bad dims: {0}")]
    BadDims(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid label {token} (must be in 1..={vocab})")]
    InvalidLabel { token: usize, vocab: usize },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("path enumeration too large: T + U = {0} exceeds 20")]
    TooLarge(usize),

    #[error("degenerate CIF weights: sum {0:e} below 1e-8")]
    DegenerateWeights(f64),

    #[error("CIF fired {got} times, expected {expected}")]
    FireCountMismatch { expected: usize, got: usize },

    #[error("band infeasible: U = {u} exceeds T + R_d + R_u = {t} + {r_d} + {r_u}")]
    BandInfeasible {
        u: usize,
        t: usize,
        r_d: usize,
        r_u: usize,
    },

    #[error("no decodable utterances")]
    EmptySet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
