use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{SimConfig, SimTime, TimeSource};
use super::engine::{Engine, Message, Received, Tag};
use super::trace::{TraceRecord, TraceTag};
use crate::error::{Error, Result};
use crate::layout::{Group, GroupLayout};

/// Handle through which one simulated rank computes and communicates.
///
/// A `Rank` is confined to its worker thread. Every operation that consumes
/// time goes through it so the event trace covers the whole run.
pub struct Rank<'e> {
    engine: &'e Engine,
    layout: &'e GroupLayout,
    id: usize,
    clock: SimTime,
    rng: ChaCha8Rng,
    trace: Vec<TraceRecord>,
    op_names: HashMap<String, Arc<str>>,
    next_seq: u64,
    collective_seq: HashMap<u64, u64>,
    channel_seq: HashMap<(usize, usize), u32>,
}

impl<'e> Rank<'e> {
    pub(crate) fn new(engine: &'e Engine, layout: &'e GroupLayout, id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(engine.config().rng_seed);
        rng.set_stream(id as u64);
        Rank {
            engine,
            layout,
            id,
            clock: SimTime::ZERO,
            rng,
            trace: Vec::new(),
            op_names: HashMap::new(),
            next_seq: 0,
            collective_seq: HashMap::new(),
            channel_seq: HashMap::new(),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn size(&self) -> usize {
        self.layout.total_ranks()
    }

    pub fn layout(&self) -> &'e GroupLayout {
        self.layout
    }

    pub fn config(&self) -> &'e SimConfig {
        self.engine.config()
    }

    pub fn group(&self) -> &'e Group {
        self.layout.group_of(self.id).expect("layout covers every rank")
    }

    pub fn is_member(&self, group: &str) -> bool {
        self.group().name == group
    }

    /// Current time on this rank.
    pub fn now(&self) -> SimTime {
        match self.config().time_source {
            TimeSource::Virtual => self.clock,
            TimeSource::WallClock => self.engine.now(self.id),
        }
    }

    pub(crate) fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    pub(crate) fn set_clock(&mut self, t: SimTime) {
        self.clock = t;
    }

    pub(crate) fn engine(&self) -> &'e Engine {
        self.engine
    }

    fn record(&mut self, start: SimTime, end: SimTime, tag: TraceTag) {
        if self.config().trace {
            self.trace.push(TraceRecord::new(self.id, start, end, tag));
        }
    }

    fn op_tag(&mut self, op: &str) -> TraceTag {
        if let Some(name) = self.op_names.get(op) {
            return TraceTag::Compute(name.clone());
        }
        let name: Arc<str> = Arc::from(op);
        self.op_names.insert(op.to_string(), name.clone());
        TraceTag::Compute(name)
    }

    /// Performs `nominal_us` of work for operation `op`, stretched by a noise
    /// sample drawn from this rank's stream. Returns the elapsed time in
    /// microseconds.
    pub fn compute(&mut self, op: &str, nominal_us: f64) -> Result<f64> {
        if !nominal_us.is_finite() || nominal_us < 0.0 {
            return Err(Error::usage(format!("work cost must be finite and >= 0, got {nominal_us}")));
        }
        let slowdown = self.config().noise.sample(&mut self.rng);
        let dt = SimTime::from_micros(nominal_us * (1.0 + slowdown));
        let start = self.now();
        let end = self.engine.advance(self.id, dt)?;
        // in virtual mode a yield may happen after the advance; the work itself
        // occupies [start, start + dt]
        let end = match self.config().time_source {
            TimeSource::Virtual => start + dt,
            TimeSource::WallClock => end,
        };
        self.clock = end;
        let tag = self.op_tag(op);
        self.record(start, end, tag);
        Ok((end - start).as_micros())
    }

    /// [`Rank::compute`] under the generic op name `work`.
    pub fn simulate_work(&mut self, nominal_us: f64) -> Result<f64> {
        self.compute("work", nominal_us)
    }

    /// Spends `cost_us` on I/O without noise.
    pub fn io(&mut self, cost_us: f64) -> Result<()> {
        let dt = SimTime::from_micros(cost_us);
        let start = self.now();
        self.engine.advance(self.id, dt)?;
        let end = match self.config().time_source {
            TimeSource::Virtual => start + dt,
            TimeSource::WallClock => self.engine.now(self.id),
        };
        self.clock = end;
        self.record(start, end, TraceTag::Io);
        Ok(())
    }

    /// Runs `op` while holding the serial resource `resource` for `cost_us`.
    /// Waiting for the resource is traced as idle and the holding interval
    /// as I/O.
    pub fn serial_io<T>(&mut self, resource: u64, cost_us: f64, op: impl FnOnce() -> Result<T>) -> Result<T> {
        let (requested, start, end) = self.engine.acquire(self.id, resource, SimTime::from_micros(cost_us))?;
        let out = op()?;
        if start > requested {
            self.record(requested, start, TraceTag::Idle);
        }
        self.record(start, end, TraceTag::Io);
        self.clock = end;
        Ok(out)
    }

    fn transfer_time(&self, bytes: usize) -> SimTime {
        let c = self.config();
        SimTime::from_micros(c.latency_us + bytes as f64 * c.byte_cost_us)
    }

    /// Point-to-point send. Costs the configured send overhead on this rank.
    pub fn send(&mut self, dest: usize, tag: Tag, body: Vec<u8>) -> Result<()> {
        let overhead = SimTime::from_micros(self.config().send_overhead_us);
        let transfer = self.transfer_time(body.len());
        let seq = self.next_seq;
        self.next_seq += 1;
        let start = self.now();
        self.engine.post(self.id, dest, tag, seq, body, overhead, transfer)?;
        let end = match self.config().time_source {
            TimeSource::Virtual => start + overhead,
            TimeSource::WallClock => self.engine.now(self.id),
        };
        self.clock = end;
        self.record(start, end, TraceTag::Send);
        Ok(())
    }

    /// Send without overhead or trace record; used for flow-control credits.
    pub(crate) fn send_silent(&mut self, dest: usize, tag: Tag, body: Vec<u8>) -> Result<()> {
        let transfer = self.transfer_time(body.len());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.engine
            .post(self.id, dest, tag, seq, body, SimTime::ZERO, transfer)?;
        Ok(())
    }

    fn finish_recv(&mut self, got: Received, record_recv: bool) -> Result<Message> {
        if got.now > got.waited_from {
            self.record(got.waited_from, got.now, TraceTag::Idle);
        }
        self.clock = got.now;
        if record_recv {
            let overhead = SimTime::from_micros(self.config().recv_overhead_us);
            let start = self.now();
            let end = if overhead > SimTime::ZERO {
                let e = self.engine.advance(self.id, overhead)?;
                match self.config().time_source {
                    TimeSource::Virtual => start + overhead,
                    TimeSource::WallClock => e,
                }
            } else {
                start
            };
            self.clock = end;
            self.record(start, end, TraceTag::Recv);
        }
        Ok(got.message)
    }

    /// Blocking receive of the earliest message with `tag` (from `src` when
    /// given). Waiting time is traced as idle.
    pub fn recv(&mut self, tag: Tag, src: Option<usize>) -> Result<Message> {
        let got = self
            .engine
            .recv(self.id, tag, src, true)?
            .expect("blocking receive returns a message");
        self.finish_recv(got, true)
    }

    /// Non-blocking receive: returns a message only if one is deliverable now.
    pub fn try_recv(&mut self, tag: Tag, src: Option<usize>) -> Result<Option<Message>> {
        match self.engine.recv(self.id, tag, src, false)? {
            Some(got) => self.finish_recv(got, true).map(Some),
            None => Ok(None),
        }
    }

    pub(crate) fn recv_silent(&mut self, tag: Tag, blocking: bool) -> Result<Option<Message>> {
        match self.engine.recv(self.id, tag, None, blocking)? {
            Some(got) => self.finish_recv(got, false).map(Some),
            None => Ok(None),
        }
    }

    pub(crate) fn next_collective_seq(&mut self, group: u64) -> u64 {
        let c = self.collective_seq.entry(group).or_insert(0);
        let seq = *c;
        *c += 1;
        seq
    }

    pub(crate) fn next_channel_instance(&mut self, producer: usize, consumer: usize) -> u32 {
        let c = self.channel_seq.entry((producer, consumer)).or_insert(0);
        let n = *c;
        *c += 1;
        n
    }

    /// Registers a stream element layout for this run. Idempotent; a layout
    /// name re-registered with a different size is rejected.
    pub fn register_element_type(&self, layout: &str, bytes: usize) -> Result<()> {
        self.engine.register_element_type(layout, bytes)
    }
}
