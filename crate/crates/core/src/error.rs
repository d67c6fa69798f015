use std::fmt;

/// A rank that was waiting when the simulator found no runnable rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedRank {
    pub rank: usize,
    pub waiting_on: String,
}

impl fmt::Display for BlockedRank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rank {} waiting on {}", self.rank, self.waiting_on)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The caller violated an API precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Ranks disagreed about the shape of a collective object, or a message
    /// arrived that the protocol does not allow.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("deadlock: {}", format_blocked(.blocked))]
    Deadlock { blocked: Vec<BlockedRank> },

    #[error("rank {rank} failed: {message}")]
    RankFailed { rank: usize, message: String },

    /// Returned to ranks that were still running when another rank failed.
    #[error("run aborted")]
    Aborted,

    #[error("deadline of {deadline_us} us exceeded on rank {rank}")]
    DeadlineExceeded { rank: usize, deadline_us: f64 },

    #[error("malformed trace: {0}")]
    MalformedTrace(String),

    #[error("numerical breakdown at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },

    #[error("i/o error after {bytes_written} bytes written: {source}")]
    Io {
        bytes_written: u64,
        #[source]
        source: std::io::Error,
    },
}

fn format_blocked(blocked: &[BlockedRank]) -> String {
    blocked
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParams(msg.into())
    }

    pub(crate) fn io(bytes_written: u64, source: std::io::Error) -> Self {
        Error::Io {
            bytes_written,
            source,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::io(0, source)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
