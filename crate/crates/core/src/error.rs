use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Operand shapes do not conform; both shapes are reported.
    #[error("{op}: dimension mismatch, {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A public operation produced or consumed a NaN/Inf.
    #[error("{op}: non-finite value encountered ({detail})")]
    NonFinite { op: &'static str, detail: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    /// A sweep cell failed; coordinates identify the cell.
    #[error("sweep cell (policy={policy}, rank={rank}, seed={seed}) failed: {source}")]
    SweepCell {
        policy: String,
        rank: usize,
        seed: u64,
        #[source]
        source: Box<CoreError>,
    },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed adapter snapshot bytes.
    #[error("snapshot: {0}")]
    Snapshot(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
