//! Process-group decoupling over asynchronous streams.
//!
//! A run consists of `P` simulated ranks partitioned into named groups. Ranks
//! of one group feed ranks of another through typed, flow-controlled streams,
//! so a slow or irregular operation can be moved off the critical path of the
//! rest of the computation. The crate ships the deterministic simulator that
//! executes such programs, the stream library, an analytical performance model
//! and three reference applications.

pub mod apps;
pub mod codec;
pub mod error;
pub mod layout;
pub mod model;
pub mod runtime;
pub mod stream;

pub use error::{BlockedRank, Error, Result};
pub use layout::{decoupled_rank_count, Group, GroupLayout};
pub use runtime::{
    run, EventTrace, NoiseSpec, Rank, RunOutput, SimConfig, SimTime, Tag, TimeSource, TraceRecord, TraceTag,
};
pub use stream::{
    operator, NoOperator, OperateSummary, Operator, SendTicket, Stream, StreamChannel, StreamElementType, StreamState,
};
