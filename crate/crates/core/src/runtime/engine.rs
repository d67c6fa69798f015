//! Shared transport and scheduler.
//!
//! In virtual-time mode exactly one rank runs at a time: the one with the
//! smallest `(clock, rank)` among runnable ranks, where a blocked receiver
//! counts as runnable at the delivery time of its earliest matching message.
//! A running rank keeps the baton only while it is still that minimum, so
//! every receive observes all messages that could have been delivered by its
//! clock. Ties are broken by rank id and messages are ordered by
//! `(deliver_at, src, seq)`, which makes runs bit-for-bit reproducible.
//!
//! In wall-clock mode all ranks run concurrently and messages are delivered
//! on arrival.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::config::{SimConfig, SimTime, TimeSource};
use crate::error::{BlockedRank, Error, Result};

/// Identity of a channel: producer and consumer group indices plus the
/// ordinal of this channel among channels created between the same pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelId {
    pub producer: u32,
    pub consumer: u32,
    pub instance: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamKey {
    pub channel: ChannelId,
    pub index: u32,
}

/// Transport-level message class used for matching receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    User(u64),
    Collective { group: u64, seq: u64 },
    Stream(StreamKey),
    Credit(StreamKey),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub src: usize,
    pub tag: Tag,
    pub seq: u64,
    pub deliver_at: SimTime,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub messages: u64,
    pub bytes: u64,
    /// Largest number of queued stream envelopes, terminate markers
    /// included, seen on any single (consumer, stream, producer) link.
    pub max_stream_backlog: usize,
}

type Key = (SimTime, usize, u64);

#[derive(Default)]
struct Mailbox {
    queues: HashMap<Tag, BTreeMap<Key, Vec<u8>>>,
}

impl Mailbox {
    fn earliest(&self, tag: Tag, src: Option<usize>) -> Option<Key> {
        let q = self.queues.get(&tag)?;
        match src {
            None => q.keys().next().copied(),
            Some(s) => q.keys().find(|k| k.1 == s).copied(),
        }
    }

    fn take(&mut self, tag: Tag, key: Key) -> Vec<u8> {
        let q = self.queues.get_mut(&tag).expect("queue exists");
        let body = q.remove(&key).expect("message exists");
        if q.is_empty() {
            self.queues.remove(&tag);
        }
        body
    }

    fn leftovers(&self) -> impl Iterator<Item = (Tag, usize)> + '_ {
        self.queues
            .iter()
            .flat_map(|(tag, q)| q.keys().map(move |k| (*tag, k.1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ready,
    Blocked { tag: Tag, src: Option<usize> },
    Done,
    Failed,
}

struct Slot {
    clock: SimTime,
    status: Status,
}

struct State {
    slots: Vec<Slot>,
    current: Option<usize>,
    mailboxes: Vec<Mailbox>,
    failure: Option<Error>,
    aborted: bool,
    element_types: HashMap<String, usize>,
    stream_types: HashMap<StreamKey, (String, usize)>,
    busy_until: HashMap<u64, SimTime>,
    backlog: HashMap<(usize, StreamKey, usize), usize>,
    stats: TransportStats,
}

impl State {
    fn effective_time(&self, r: usize) -> Option<SimTime> {
        let slot = &self.slots[r];
        match slot.status {
            Status::Ready => Some(slot.clock),
            Status::Blocked { tag, src } => self.mailboxes[r]
                .earliest(tag, src)
                .map(|k| k.0.max(slot.clock)),
            Status::Done | Status::Failed => None,
        }
    }

    fn next_candidate(&self, exclude: Option<usize>) -> Option<(SimTime, usize)> {
        (0..self.slots.len())
            .filter(|&r| Some(r) != exclude)
            .filter_map(|r| self.effective_time(r).map(|t| (t, r)))
            .min()
    }

    fn blocked_ranks(&self) -> Vec<BlockedRank> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(rank, s)| match s.status {
                Status::Blocked { tag, src } => Some(BlockedRank {
                    rank,
                    waiting_on: match src {
                        Some(src) => format!("{tag:?} from rank {src}"),
                        None => format!("{tag:?}"),
                    },
                }),
                _ => None,
            })
            .collect()
    }

    /// True when no rank can make progress: nobody is computing and no
    /// blocked rank has a matching message.
    fn stuck(&self) -> bool {
        let mut any_blocked = false;
        for (r, s) in self.slots.iter().enumerate() {
            match s.status {
                Status::Ready => return false,
                Status::Blocked { tag, src } => {
                    if self.mailboxes[r].earliest(tag, src).is_some() {
                        return false;
                    }
                    any_blocked = true;
                }
                Status::Done | Status::Failed => {}
            }
        }
        any_blocked
    }
}

pub(crate) struct Engine {
    state: Mutex<State>,
    wake: Vec<Condvar>,
    config: SimConfig,
    origin: Instant,
    wall_resources: Mutex<HashMap<u64, Arc<Mutex<()>>>>,
}

/// What a receive observed: the message plus the interval spent waiting.
pub(crate) struct Received {
    pub message: Message,
    pub waited_from: SimTime,
    pub now: SimTime,
}

impl Engine {
    pub fn new(config: SimConfig) -> Self {
        let p = config.total_ranks;
        let virtual_mode = config.time_source == TimeSource::Virtual;
        Engine {
            state: Mutex::new(State {
                slots: (0..p)
                    .map(|_| Slot {
                        clock: SimTime::ZERO,
                        status: Status::Ready,
                    })
                    .collect(),
                current: virtual_mode.then_some(0),
                mailboxes: (0..p).map(|_| Mailbox::default()).collect(),
                failure: None,
                aborted: false,
                element_types: HashMap::new(),
                stream_types: HashMap::new(),
                busy_until: HashMap::new(),
                backlog: HashMap::new(),
                stats: TransportStats::default(),
            }),
            wake: (0..p).map(|_| Condvar::new()).collect(),
            config,
            origin: Instant::now(),
            wall_resources: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    fn is_virtual(&self) -> bool {
        self.config.time_source == TimeSource::Virtual
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wall_now(&self) -> SimTime {
        SimTime::from_nanos(self.origin.elapsed().as_nanos() as u64)
    }

    fn check_deadline(&self, rank: usize, now: SimTime) -> Result<()> {
        match self.config.deadline_us {
            Some(d) if now > SimTime::from_micros(d) => Err(Error::DeadlineExceeded { rank, deadline_us: d }),
            _ => Ok(()),
        }
    }

    fn notify_all(&self) {
        for cv in &self.wake {
            cv.notify_all();
        }
    }

    fn abort_locked(&self, g: &mut State, err: Error) {
        if g.failure.is_none() {
            g.failure = Some(err);
        }
        g.aborted = true;
        g.current = None;
        self.notify_all();
    }

    /// Aborts the run on a deadline overrun and returns the error to raise.
    fn deadline_abort(&self, g: &mut State, rank: usize) -> Error {
        let d = self.config.deadline_us.unwrap_or(f64::INFINITY);
        self.abort_locked(g, Error::DeadlineExceeded { rank, deadline_us: d });
        Error::DeadlineExceeded { rank, deadline_us: d }
    }

    fn wait_turn<'a>(&'a self, me: usize, mut g: MutexGuard<'a, State>) -> Result<MutexGuard<'a, State>> {
        while g.current != Some(me) && !g.aborted {
            g = self.wake[me].wait(g).unwrap_or_else(|e| e.into_inner());
        }
        if g.aborted {
            return Err(Error::Aborted);
        }
        Ok(g)
    }

    fn yield_if_needed<'a>(&'a self, me: usize, g: MutexGuard<'a, State>) -> Result<MutexGuard<'a, State>> {
        let mine = (g.slots[me].clock, me);
        match g.next_candidate(Some(me)) {
            Some(next) if next < mine => {
                let mut g = g;
                g.current = Some(next.1);
                self.wake[next.1].notify_one();
                self.wait_turn(me, g)
            }
            _ => Ok(g),
        }
    }

    /// Blocks until this rank may start running.
    pub fn enter(&self, me: usize) -> Result<SimTime> {
        if !self.is_virtual() {
            return Ok(self.wall_now());
        }
        let g = self.wait_turn(me, self.lock())?;
        Ok(g.slots[me].clock)
    }

    pub fn now(&self, me: usize) -> SimTime {
        if self.is_virtual() {
            self.lock().slots[me].clock
        } else {
            self.wall_now()
        }
    }

    /// Advances this rank's clock by `dt` (or sleeps for it in wall-clock
    /// mode) and returns the new time.
    pub fn advance(&self, me: usize, dt: SimTime) -> Result<SimTime> {
        if self.is_virtual() {
            let mut g = self.lock();
            if g.aborted {
                return Err(Error::Aborted);
            }
            g.slots[me].clock += dt;
            let now = g.slots[me].clock;
            if self.check_deadline(me, now).is_err() {
                return Err(self.deadline_abort(&mut g, me));
            }
            let g = self.yield_if_needed(me, g)?;
            Ok(g.slots[me].clock)
        } else {
            if dt > SimTime::ZERO {
                std::thread::sleep(Duration::from_nanos(dt.as_nanos()));
            }
            if self.lock().aborted {
                return Err(Error::Aborted);
            }
            let now = self.wall_now();
            self.check_deadline(me, now)?;
            Ok(now)
        }
    }

    /// Enqueues a message. The sender first pays `overhead`; the message is
    /// deliverable `latency + transfer` later. Returns the sender's clock
    /// after the overhead.
    #[allow(clippy::too_many_arguments)]
    pub fn post(
        &self,
        me: usize,
        dest: usize,
        tag: Tag,
        seq: u64,
        body: Vec<u8>,
        overhead: SimTime,
        transfer: SimTime,
    ) -> Result<SimTime> {
        if dest >= self.wake.len() {
            return Err(Error::usage(format!("send to rank {dest} outside 0..{}", self.wake.len())));
        }
        if !self.is_virtual() && overhead > SimTime::ZERO {
            std::thread::sleep(Duration::from_nanos(overhead.as_nanos()));
        }
        let mut g = self.lock();
        if g.aborted {
            return Err(Error::Aborted);
        }
        let sent = if self.is_virtual() {
            g.slots[me].clock += overhead;
            g.slots[me].clock
        } else {
            self.wall_now()
        };
        let deliver_at = if self.is_virtual() { sent + transfer } else { sent };
        g.stats.messages += 1;
        g.stats.bytes += body.len() as u64;
        if let Tag::Stream(key) = tag {
            let depth = g.backlog.entry((dest, key, me)).or_insert(0);
            *depth += 1;
            let depth = *depth;
            g.stats.max_stream_backlog = g.stats.max_stream_backlog.max(depth);
        }
        g.mailboxes[dest]
            .queues
            .entry(tag)
            .or_default()
            .insert((deliver_at, me, seq), body);
        if self.is_virtual() {
            if self.check_deadline(me, sent).is_err() {
                return Err(self.deadline_abort(&mut g, me));
            }
            let g = self.yield_if_needed(me, g)?;
            Ok(g.slots[me].clock)
        } else {
            self.wake[dest].notify_all();
            Ok(sent)
        }
    }

    fn take_locked(g: &mut State, me: usize, tag: Tag, key: Key) -> Message {
        let body = g.mailboxes[me].take(tag, key);
        if let Tag::Stream(stream) = tag {
            if let Some(d) = g.backlog.get_mut(&(me, stream, key.1)) {
                *d -= 1;
            }
        }
        Message {
            src: key.1,
            tag,
            seq: key.2,
            deliver_at: key.0,
            body,
        }
    }

    /// Receives the earliest deliverable message matching `tag` (and `src`
    /// if given). With `blocking == false` returns `None` when nothing is
    /// deliverable yet.
    pub fn recv(&self, me: usize, tag: Tag, src: Option<usize>, blocking: bool) -> Result<Option<Received>> {
        if self.is_virtual() {
            self.recv_virtual(me, tag, src, blocking)
        } else {
            self.recv_wall(me, tag, src, blocking)
        }
    }

    fn recv_virtual(&self, me: usize, tag: Tag, src: Option<usize>, blocking: bool) -> Result<Option<Received>> {
        let mut g = self.lock();
        if g.aborted {
            return Err(Error::Aborted);
        }
        let waited_from = g.slots[me].clock;
        loop {
            if let Some(key) = g.mailboxes[me].earliest(tag, src) {
                if key.0 <= g.slots[me].clock {
                    g.slots[me].status = Status::Ready;
                    let message = Self::take_locked(&mut g, me, tag, key);
                    let now = g.slots[me].clock;
                    return Ok(Some(Received {
                        message,
                        waited_from,
                        now,
                    }));
                }
            }
            if !blocking {
                return Ok(None);
            }
            g.slots[me].status = Status::Blocked { tag, src };
            match g.next_candidate(None) {
                None => {
                    let blocked = g.blocked_ranks();
                    self.abort_locked(&mut g, Error::Deadlock { blocked: blocked.clone() });
                    return Err(Error::Deadlock { blocked });
                }
                Some((t, n)) if n == me => {
                    g.slots[me].clock = t;
                    g.slots[me].status = Status::Ready;
                }
                Some((_, n)) => {
                    g.current = Some(n);
                    self.wake[n].notify_one();
                    g = self.wait_turn(me, g)?;
                    if let Some(key) = g.mailboxes[me].earliest(tag, src) {
                        let clock = g.slots[me].clock.max(key.0);
                        g.slots[me].clock = clock;
                    }
                    g.slots[me].status = Status::Ready;
                }
            }
            let now = g.slots[me].clock;
            if self.check_deadline(me, now).is_err() {
                return Err(self.deadline_abort(&mut g, me));
            }
        }
    }

    fn recv_wall(&self, me: usize, tag: Tag, src: Option<usize>, blocking: bool) -> Result<Option<Received>> {
        let waited_from = self.wall_now();
        let mut g = self.lock();
        loop {
            if g.aborted {
                return Err(Error::Aborted);
            }
            if let Some(key) = g.mailboxes[me].earliest(tag, src) {
                g.slots[me].status = Status::Ready;
                let message = Self::take_locked(&mut g, me, tag, key);
                return Ok(Some(Received {
                    message,
                    waited_from,
                    now: self.wall_now(),
                }));
            }
            if !blocking {
                return Ok(None);
            }
            g.slots[me].status = Status::Blocked { tag, src };
            if g.stuck() {
                let blocked = g.blocked_ranks();
                self.abort_locked(&mut g, Error::Deadlock { blocked: blocked.clone() });
                return Err(Error::Deadlock { blocked });
            }
            let now = self.wall_now();
            if self.check_deadline(me, now).is_err() {
                return Err(self.deadline_abort(&mut g, me));
            }
            g = self.wake[me]
                .wait_timeout(g, Duration::from_millis(20))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Occupies the serial resource `id` for `duration`, waiting until it is
    /// free. Returns `(requested, start, end)`.
    pub fn acquire(&self, me: usize, id: u64, duration: SimTime) -> Result<(SimTime, SimTime, SimTime)> {
        if self.is_virtual() {
            let mut g = self.lock();
            if g.aborted {
                return Err(Error::Aborted);
            }
            let requested = g.slots[me].clock;
            let busy = g.busy_until.get(&id).copied().unwrap_or(SimTime::ZERO);
            let start = requested.max(busy);
            let end = start + duration;
            g.busy_until.insert(id, end);
            g.slots[me].clock = end;
            if self.check_deadline(me, end).is_err() {
                return Err(self.deadline_abort(&mut g, me));
            }
            let _g = self.yield_if_needed(me, g)?;
            Ok((requested, start, end))
        } else {
            let requested = self.wall_now();
            let lock = {
                let mut map = self.wall_resources.lock().unwrap_or_else(|e| e.into_inner());
                map.entry(id).or_default().clone()
            };
            let _held = lock.lock().unwrap_or_else(|e| e.into_inner());
            let start = self.wall_now();
            std::thread::sleep(Duration::from_nanos(duration.as_nanos()));
            Ok((requested, start, self.wall_now()))
        }
    }

    pub fn finish(&self, me: usize) {
        let mut g = self.lock();
        g.slots[me].status = Status::Done;
        if g.aborted {
            return;
        }
        if self.is_virtual() {
            match g.next_candidate(None) {
                Some((_, n)) => {
                    g.current = Some(n);
                    self.wake[n].notify_one();
                }
                None => {
                    g.current = None;
                    if g.slots.iter().any(|s| matches!(s.status, Status::Blocked { .. })) {
                        let blocked = g.blocked_ranks();
                        self.abort_locked(&mut g, Error::Deadlock { blocked });
                    }
                }
            }
        } else if g.stuck() {
            let blocked = g.blocked_ranks();
            self.abort_locked(&mut g, Error::Deadlock { blocked });
        }
    }

    pub fn fail(&self, me: usize, err: Error) {
        let mut g = self.lock();
        g.slots[me].status = Status::Failed;
        let err = match err {
            e @ (Error::Aborted | Error::Deadlock { .. } | Error::DeadlineExceeded { .. }) => e,
            Error::RankFailed { rank, message } => Error::RankFailed { rank, message },
            other => Error::RankFailed {
                rank: me,
                message: other.to_string(),
            },
        };
        if !matches!(err, Error::Aborted) {
            self.abort_locked(&mut g, err);
        } else {
            g.aborted = true;
            self.notify_all();
        }
    }

    pub fn take_failure(&self) -> Option<Error> {
        let mut g = self.lock();
        match g.failure.take() {
            Some(e) => Some(e),
            None if g.aborted => Some(Error::Aborted),
            None => None,
        }
    }

    pub fn stats(&self) -> TransportStats {
        self.lock().stats
    }

    /// Messages still queued after every rank finished, excluding flow-control
    /// credits.
    pub fn undelivered(&self) -> Vec<(usize, Tag, usize)> {
        let g = self.lock();
        let mut out: Vec<_> = g
            .mailboxes
            .iter()
            .enumerate()
            .flat_map(|(dest, mb)| mb.leftovers().map(move |(tag, src)| (dest, tag, src)))
            .filter(|(_, tag, _)| !matches!(tag, Tag::Credit(_)))
            .collect();
        out.sort();
        out
    }

    pub fn register_element_type(&self, layout: &str, bytes: usize) -> Result<()> {
        let mut g = self.lock();
        match g.element_types.get(layout) {
            Some(&b) if b != bytes => Err(Error::usage(format!(
                "element layout `{layout}` already registered with {b} bytes, not {bytes}"
            ))),
            _ => {
                g.element_types.insert(layout.to_string(), bytes);
                Ok(())
            }
        }
    }

    pub fn element_type_bytes(&self, layout: &str) -> Option<usize> {
        self.lock().element_types.get(layout).copied()
    }

    /// Records the element type a rank attached for `key`; all ranks of a
    /// channel must attach identical types.
    pub fn agree_stream_type(&self, key: StreamKey, layout: &str, bytes: usize) -> Result<()> {
        let mut g = self.lock();
        match g.stream_types.get(&key) {
            Some((l, b)) if l != layout || *b != bytes => Err(Error::protocol(format!(
                "stream {key:?} attached as `{l}`/{b} bytes on one rank and `{layout}`/{bytes} bytes on another"
            ))),
            Some(_) => Ok(()),
            None => {
                g.stream_types.insert(key, (layout.to_string(), bytes));
                Ok(())
            }
        }
    }
}
