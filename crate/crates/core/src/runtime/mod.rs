//! Deterministic in-process execution of `P` simulated ranks.

mod collective;
mod config;
mod engine;
mod rank;
mod trace;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::thread;

pub use config::{NoiseSpec, SimConfig, SimTime, TimeSource, DEFAULT_INFLIGHT_WINDOW};
pub use engine::{ChannelId, Message, StreamKey, Tag, TransportStats};
pub use rank::Rank;
pub use trace::{overlap, EventTrace, RankTotals, TraceRecord, TraceSummary, TraceTag};

use crate::error::{Error, Result};
use crate::layout::GroupLayout;
use engine::Engine;

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunOutput<T> {
    /// Per-rank program return values, indexed by rank.
    pub results: Vec<T>,
    pub trace: EventTrace,
    pub stats: TransportStats,
    /// Time at which each rank's program returned.
    pub finish_times: Vec<SimTime>,
}

impl<T> RunOutput<T> {
    /// Time at which the last rank finished.
    pub fn makespan(&self) -> SimTime {
        self.finish_times.iter().copied().max().unwrap_or(SimTime::ZERO)
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// Runs `program` once per rank of `layout` and waits for all of them.
///
/// The first rank failure (an `Err` return or a panic) aborts the run and is
/// reported; a state in which every unfinished rank waits on a message that
/// can never arrive is reported as [`Error::Deadlock`]. Stream data left
/// undelivered at the end is a protocol error.
pub fn run<T, F>(layout: &GroupLayout, config: &SimConfig, program: F) -> Result<RunOutput<T>>
where
    T: Send,
    F: Fn(&mut Rank<'_>) -> Result<T> + Sync,
{
    config.validate()?;
    if layout.total_ranks() != config.total_ranks {
        return Err(Error::invalid(format!(
            "layout has {} ranks but config has {}",
            layout.total_ranks(),
            config.total_ranks
        )));
    }
    let engine = Engine::new(config.clone());
    let program = &program;
    let engine_ref = &engine;

    let outcomes: Vec<_> = thread::scope(|scope| {
        let handles: Vec<_> = (0..config.total_ranks)
            .map(|r| {
                thread::Builder::new()
                    .name(format!("rank-{r}"))
                    .stack_size(4 << 20)
                    .spawn_scoped(scope, move || {
                        let mut rank = Rank::new(engine_ref, layout, r);
                        let result = engine_ref.enter(r).and_then(|t| {
                            rank.set_clock(t);
                            catch_unwind(AssertUnwindSafe(|| program(&mut rank))).unwrap_or_else(|p| {
                                Err(Error::RankFailed {
                                    rank: r,
                                    message: panic_message(p),
                                })
                            })
                        });
                        let finished = rank.now();
                        match result {
                            Ok(v) => {
                                let trace = rank.take_trace();
                                engine_ref.finish(r);
                                Some((v, trace, finished))
                            }
                            Err(e) => {
                                engine_ref.fail(r, e);
                                None
                            }
                        }
                    })
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread does not unwind"))
            .collect()
    });

    if let Some(err) = engine.take_failure() {
        return Err(err);
    }
    let undelivered = engine.undelivered();
    if let Some(&(dest, tag, src)) = undelivered.first() {
        return Err(Error::protocol(format!(
            "{} message(s) never received, first: {tag:?} from rank {src} to rank {dest}",
            undelivered.len()
        )));
    }

    let mut results = Vec::with_capacity(outcomes.len());
    let mut records = Vec::new();
    let mut finish_times = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let (v, trace, t) = outcome.ok_or(Error::Aborted)?;
        results.push(v);
        records.extend(trace);
        finish_times.push(t);
    }
    Ok(RunOutput {
        results,
        trace: EventTrace::new(records),
        stats: engine.stats(),
        finish_times,
    })
}

#[cfg(test)]
mod tests;
