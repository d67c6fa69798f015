//! Channels between process groups and the fine-grained streams on them.
//!
//! A [`StreamChannel`] links a producer group to a consumer group. Streams
//! attached to it carry fixed-size elements; every consumer rank applies its
//! [`Operator`] to elements as they arrive, first come first served across
//! producers and in order within one producer. Each producer terminates the
//! stream individually and a consumer sees it end once every producer has.
//!
//! Each (producer, consumer) link has a bounded window of unacknowledged
//! elements. A producer that exhausts its window blocks in
//! [`Stream::isend`] until the consumer returns credit, so a consumer never
//! buffers more than `window × element_bytes` per link.

mod envelope;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

pub use envelope::{Envelope, EnvelopeKind, HEADER_BYTES};

use crate::error::{Error, Result};
use crate::runtime::{ChannelId, Rank, StreamKey, Tag};
use envelope::{decode_parts, encode_parts};

/// Size and schema of the elements carried by a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamElementType {
    layout: String,
    element_bytes: usize,
}

impl StreamElementType {
    pub fn new(layout: impl Into<String>, element_bytes: usize) -> Result<Self> {
        let layout = layout.into();
        if element_bytes == 0 {
            return Err(Error::invalid(format!("element type `{layout}` must have a positive size")));
        }
        if layout.is_empty() {
            return Err(Error::invalid("element layout tag must not be empty"));
        }
        Ok(StreamElementType { layout, element_bytes })
    }

    pub fn layout(&self) -> &str {
        &self.layout
    }

    pub fn element_bytes(&self) -> usize {
        self.element_bytes
    }

    /// Makes the type known to the run. Must happen before a stream of this
    /// type is attached.
    pub fn register(&self, rank: &Rank<'_>) -> Result<()> {
        rank.register_element_type(&self.layout, self.element_bytes)
    }
}

/// Consumer-side callback applied to every element.
///
/// The operator owns whatever state the consumer accumulates. It receives
/// the rank so it can account for its own work.
pub trait Operator {
    fn apply(&mut self, rank: &mut Rank<'_>, producer: usize, element: &[u8]) -> Result<()>;
}

impl<F> Operator for F
where
    F: FnMut(&mut Rank<'_>, usize, &[u8]) -> Result<()>,
{
    fn apply(&mut self, rank: &mut Rank<'_>, producer: usize, element: &[u8]) -> Result<()> {
        self(rank, producer, element)
    }
}

/// Pins a closure to the [`Operator`] signature so its argument types are
/// inferred.
pub fn operator<F>(f: F) -> F
where
    F: FnMut(&mut Rank<'_>, usize, &[u8]) -> Result<()>,
{
    f
}

/// Operator for producer ranks, which never apply one.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoOperator;

impl Operator for NoOperator {
    fn apply(&mut self, _: &mut Rank<'_>, _: usize, _: &[u8]) -> Result<()> {
        Err(Error::usage("stream attached without an operator received an element"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamState {
    Open,
    /// Producer side: this rank has sent its terminate marker.
    TerminatedLocally,
    /// Consumer side: markers from every producer have arrived.
    FullyTerminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OperateSummary {
    pub elements_processed: u64,
    pub terminated: bool,
}

/// Returned by [`Stream::isend`]; identifies the envelope that was posted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendTicket {
    pub consumer: usize,
    pub seq_no: u64,
}

#[derive(Debug)]
struct ChannelShared {
    freed: bool,
    next_index: u32,
    streams: Vec<Rc<Cell<StreamState>>>,
}

/// A directed link from a producer group to a consumer group.
pub struct StreamChannel {
    id: ChannelId,
    producers: Vec<usize>,
    consumers: Vec<usize>,
    producer_group: String,
    consumer_group: String,
    shared: Rc<RefCell<ChannelShared>>,
}

impl fmt::Debug for StreamChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StreamChannel")
            .field("id", &self.id)
            .field("producer_group", &self.producer_group)
            .field("consumer_group", &self.consumer_group)
            .finish_non_exhaustive()
    }
}

impl StreamChannel {
    /// Creates a channel from `producer_group` to `consumer_group`.
    ///
    /// Every rank of both groups must create the same channels in the same
    /// order; channel identity is derived from that order.
    pub fn create(rank: &mut Rank<'_>, producer_group: &str, consumer_group: &str) -> Result<Self> {
        if producer_group == consumer_group {
            return Err(Error::usage(format!(
                "channel needs two distinct groups, got `{producer_group}` twice"
            )));
        }
        let layout = rank.layout();
        let pg = layout.group_index(producer_group)?;
        let cg = layout.group_index(consumer_group)?;
        let producers = layout.members(producer_group)?.to_vec();
        let consumers = layout.members(consumer_group)?.to_vec();
        if !producers.contains(&rank.id()) && !consumers.contains(&rank.id()) {
            return Err(Error::usage(format!(
                "rank {} is in neither `{producer_group}` nor `{consumer_group}`",
                rank.id()
            )));
        }
        let instance = rank.next_channel_instance(pg, cg);
        Ok(StreamChannel {
            id: ChannelId {
                producer: pg as u32,
                consumer: cg as u32,
                instance,
            },
            producers,
            consumers,
            producer_group: producer_group.to_string(),
            consumer_group: consumer_group.to_string(),
            shared: Rc::new(RefCell::new(ChannelShared {
                freed: false,
                next_index: 0,
                streams: Vec::new(),
            })),
        })
    }

    pub fn id(&self) -> ChannelId {
        self.id
    }

    pub fn producers(&self) -> &[usize] {
        &self.producers
    }

    pub fn consumers(&self) -> &[usize] {
        &self.consumers
    }

    pub fn producer_group(&self) -> &str {
        &self.producer_group
    }

    pub fn consumer_group(&self) -> &str {
        &self.consumer_group
    }

    pub fn is_freed(&self) -> bool {
        self.shared.borrow().freed
    }

    /// Attaches a new stream. The operator is used on consumer ranks and
    /// ignored on producers.
    pub fn attach<O: Operator>(&self, rank: &mut Rank<'_>, element_type: &StreamElementType, operator: O) -> Result<Stream<O>> {
        let mut shared = self.shared.borrow_mut();
        if shared.freed {
            return Err(Error::usage(format!("attach on freed channel {:?}", self.id)));
        }
        match rank.engine().element_type_bytes(element_type.layout()) {
            Some(b) if b == element_type.element_bytes() => {}
            Some(b) => {
                return Err(Error::usage(format!(
                    "element layout `{}` is registered with {b} bytes, not {}",
                    element_type.layout(),
                    element_type.element_bytes()
                )))
            }
            None => {
                return Err(Error::usage(format!(
                    "element layout `{}` must be registered before attach",
                    element_type.layout()
                )))
            }
        }
        let key = StreamKey {
            channel: self.id,
            index: shared.next_index,
        };
        shared.next_index += 1;
        rank.engine()
            .agree_stream_type(key, element_type.layout(), element_type.element_bytes())?;

        let state = Rc::new(Cell::new(StreamState::Open));
        shared.streams.push(state.clone());
        let window = rank.config().inflight_window;
        let role = if let Some(idx) = self.producers.iter().position(|&r| r == rank.id()) {
            Role::Producer(ProducerSide {
                index: idx,
                links: vec![Link::default(); self.consumers.len()],
            })
        } else {
            Role::Consumer(ConsumerSide {
                from: vec![Incoming::default(); self.producers.len()],
                terminated: 0,
                credit_batch: window.div_ceil(2).max(1),
            })
        };
        Ok(Stream {
            key,
            element_type: element_type.clone(),
            producers: self.producers.clone(),
            consumers: self.consumers.clone(),
            window,
            state,
            role,
            operator,
        })
    }

    /// Releases the channel. Collective over both groups; every stream on it
    /// must be closed on this rank.
    pub fn free(&mut self, rank: &mut Rank<'_>) -> Result<()> {
        {
            let mut shared = self.shared.borrow_mut();
            if shared.freed {
                return Err(Error::usage(format!("channel {:?} freed twice", self.id)));
            }
            if let Some(i) = shared.streams.iter().position(|s| s.get() == StreamState::Open) {
                return Err(Error::usage(format!(
                    "free of channel {:?} with stream {i} still open on rank {}",
                    self.id,
                    rank.id()
                )));
            }
            shared.freed = true;
        }
        let mut members: Vec<usize> = self.producers.iter().chain(&self.consumers).copied().collect();
        members.sort_unstable();
        rank.barrier(&members)
    }
}

#[derive(Debug, Clone, Default)]
struct Link {
    next_seq: u64,
    outstanding: usize,
}

#[derive(Debug)]
struct ProducerSide {
    index: usize,
    links: Vec<Link>,
}

#[derive(Debug, Clone, Default)]
struct Incoming {
    expected_seq: u64,
    terminated: bool,
    uncredited: usize,
}

#[derive(Debug)]
struct ConsumerSide {
    from: Vec<Incoming>,
    terminated: usize,
    credit_batch: usize,
}

#[derive(Debug)]
enum Role {
    Producer(ProducerSide),
    Consumer(ConsumerSide),
}

/// One stream on a channel, as seen by one rank.
pub struct Stream<O> {
    key: StreamKey,
    element_type: StreamElementType,
    producers: Vec<usize>,
    consumers: Vec<usize>,
    window: usize,
    state: Rc<Cell<StreamState>>,
    role: Role,
    operator: O,
}

impl<O> fmt::Debug for Stream<O> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stream")
            .field("key", &self.key)
            .field("element_type", &self.element_type)
            .field("state", &self.state.get())
            .finish_non_exhaustive()
    }
}

impl<O: Operator> Stream<O> {
    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// Identifier of this stream within its channel.
    pub fn stream_id(&self) -> u32 {
        self.key.index
    }

    pub fn element_type(&self) -> &StreamElementType {
        &self.element_type
    }

    pub fn state(&self) -> StreamState {
        self.state.get()
    }

    pub fn is_producer(&self) -> bool {
        matches!(self.role, Role::Producer(_))
    }

    pub fn producers(&self) -> &[usize] {
        &self.producers
    }

    pub fn consumers(&self) -> &[usize] {
        &self.consumers
    }

    pub fn operator(&self) -> &O {
        &self.operator
    }

    pub fn operator_mut(&mut self) -> &mut O {
        &mut self.operator
    }

    pub fn into_operator(self) -> O {
        self.operator
    }

    fn producer_side(&mut self, what: &str) -> Result<&mut ProducerSide> {
        let state = self.state.get();
        match &mut self.role {
            Role::Producer(p) => match state {
                StreamState::Open => Ok(p),
                _ => Err(Error::usage(format!("{what} on stream {:?} after terminate", self.key))),
            },
            Role::Consumer(_) => Err(Error::usage(format!("{what} called on a consumer rank"))),
        }
    }

    /// Consumer index this producer sends to by default: producers are dealt
    /// round-robin over the consumer group.
    pub fn default_consumer(&self) -> Option<usize> {
        match &self.role {
            Role::Producer(p) => Some(p.index % self.consumers.len()),
            Role::Consumer(_) => None,
        }
    }

    /// Sends one element to this producer's default consumer.
    pub fn isend(&mut self, rank: &mut Rank<'_>, payload: &[u8]) -> Result<SendTicket> {
        let ci = self
            .default_consumer()
            .ok_or_else(|| Error::usage("isend called on a consumer rank"))?;
        self.isend_to(rank, ci, payload)
    }

    /// Sends one element to the consumer at index `consumer` of the consumer
    /// group. Blocks only while the link's window is exhausted.
    pub fn isend_to(&mut self, rank: &mut Rank<'_>, consumer: usize, payload: &[u8]) -> Result<SendTicket> {
        let key = self.key;
        let bytes = self.element_type.element_bytes();
        let window = self.window;
        let n_consumers = self.consumers.len();
        let dest = *self
            .consumers
            .get(consumer)
            .ok_or_else(|| Error::usage(format!("consumer index {consumer} outside 0..{n_consumers}")))?;
        let consumers = self.consumers.clone();
        let side = self.producer_side("isend")?;
        if payload.len() != bytes {
            return Err(Error::usage(format!(
                "element of {} bytes on a stream of {bytes}-byte elements",
                payload.len()
            )));
        }
        while side.links[consumer].outstanding >= window {
            let credit = rank
                .recv_silent(Tag::Credit(key), true)?
                .expect("blocking receive returns a message");
            apply_credit(side, &consumers, credit.src, &credit.body)?;
        }
        let link = &mut side.links[consumer];
        let seq_no = link.next_seq;
        link.next_seq += 1;
        link.outstanding += 1;
        let body = encode_parts(key.index, rank.id() as u32, seq_no, EnvelopeKind::Data, payload);
        rank.send(dest, Tag::Stream(key), body)?;
        Ok(SendTicket { consumer, seq_no })
    }

    /// Ends this producer's part of the stream on every consumer.
    pub fn terminate(&mut self, rank: &mut Rank<'_>) -> Result<()> {
        let key = self.key;
        let consumers = self.consumers.clone();
        let side = self.producer_side("terminate")?;
        for (ci, &dest) in consumers.iter().enumerate() {
            let body = encode_parts(key.index, rank.id() as u32, side.links[ci].next_seq, EnvelopeKind::Terminate, &[]);
            rank.send(dest, Tag::Stream(key), body)?;
        }
        self.state.set(StreamState::TerminatedLocally);
        Ok(())
    }

    fn consumer_check(&self, what: &str) -> Result<()> {
        match self.role {
            Role::Consumer(_) => Ok(()),
            Role::Producer(_) => Err(Error::usage(format!("{what} called on a producer rank"))),
        }
    }

    /// Processes elements until every producer has terminated.
    pub fn operate(&mut self, rank: &mut Rank<'_>) -> Result<OperateSummary> {
        self.consumer_check("operate")?;
        let mut n = 0;
        while self.state.get() == StreamState::Open {
            let msg = rank.recv(Tag::Stream(self.key), None)?;
            n += self.deliver(rank, msg.src, &msg.body)?;
        }
        Ok(OperateSummary {
            elements_processed: n,
            terminated: true,
        })
    }

    /// Processes every element that is already available and returns.
    pub fn operate_poll(&mut self, rank: &mut Rank<'_>) -> Result<OperateSummary> {
        self.consumer_check("operate_poll")?;
        let mut n = 0;
        while self.state.get() == StreamState::Open {
            match rank.try_recv(Tag::Stream(self.key), None)? {
                Some(msg) => n += self.deliver(rank, msg.src, &msg.body)?,
                None => break,
            }
        }
        Ok(OperateSummary {
            elements_processed: n,
            terminated: self.state.get() == StreamState::FullyTerminated,
        })
    }

    /// Waits for at least one envelope, then drains whatever else is
    /// available. Returns with zero elements only at termination.
    pub fn operate_some(&mut self, rank: &mut Rank<'_>) -> Result<OperateSummary> {
        self.consumer_check("operate_some")?;
        let mut n = 0;
        while n == 0 && self.state.get() == StreamState::Open {
            let msg = rank.recv(Tag::Stream(self.key), None)?;
            n += self.deliver(rank, msg.src, &msg.body)?;
            n += self.operate_poll(rank)?.elements_processed;
        }
        Ok(OperateSummary {
            elements_processed: n,
            terminated: self.state.get() == StreamState::FullyTerminated,
        })
    }

    fn deliver(&mut self, rank: &mut Rank<'_>, src: usize, body: &[u8]) -> Result<u64> {
        let (stream_id, producer, seq_no, kind, payload) = decode_parts(body)?;
        if stream_id != self.key.index || producer as usize != src {
            return Err(Error::protocol(format!(
                "envelope for stream {stream_id} from rank {producer} arrived on stream {} from rank {src}",
                self.key.index
            )));
        }
        let pi = self
            .producers
            .iter()
            .position(|&r| r == src)
            .ok_or_else(|| Error::protocol(format!("rank {src} is not a producer on stream {:?}", self.key)))?;
        let Role::Consumer(side) = &mut self.role else {
            unreachable!("checked by caller")
        };
        let inc = &mut side.from[pi];
        if inc.terminated {
            return Err(Error::protocol(format!(
                "envelope from rank {src} after its terminate on stream {:?}",
                self.key
            )));
        }
        if seq_no != inc.expected_seq {
            return Err(Error::protocol(format!(
                "rank {src} {kind:?} envelope has seq {seq_no}, expected {}",
                inc.expected_seq
            )));
        }
        match kind {
            EnvelopeKind::Terminate => {
                inc.terminated = true;
                side.terminated += 1;
                if side.terminated == self.producers.len() {
                    self.state.set(StreamState::FullyTerminated);
                }
                Ok(0)
            }
            EnvelopeKind::Data => {
                if payload.len() != self.element_type.element_bytes() {
                    return Err(Error::protocol(format!(
                        "element of {} bytes on a stream of {}-byte elements",
                        payload.len(),
                        self.element_type.element_bytes()
                    )));
                }
                inc.expected_seq += 1;
                inc.uncredited += 1;
                let credit = (inc.uncredited >= side.credit_batch).then(|| std::mem::take(&mut inc.uncredited));
                self.operator.apply(rank, src, payload)?;
                if let Some(n) = credit {
                    rank.send_silent(src, Tag::Credit(self.key), (n as u64).to_le_bytes().to_vec())?;
                }
                Ok(1)
            }
        }
    }
}

fn apply_credit(side: &mut ProducerSide, consumers: &[usize], src: usize, body: &[u8]) -> Result<()> {
    let ci = consumers
        .iter()
        .position(|&r| r == src)
        .ok_or_else(|| Error::protocol(format!("credit from non-consumer rank {src}")))?;
    let n = u64::from_le_bytes(
        body.try_into()
            .map_err(|_| Error::protocol("credit message must carry 8 bytes"))?,
    ) as usize;
    let link = &mut side.links[ci];
    link.outstanding = link
        .outstanding
        .checked_sub(n)
        .ok_or_else(|| Error::protocol(format!("rank {src} returned more credit than was used")))?;
    Ok(())
}

#[cfg(test)]
mod tests;
