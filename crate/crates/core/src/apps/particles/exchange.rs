use std::collections::BTreeMap;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::runtime::{Rank, Tag};
use crate::stream::{operator, NoOperator, Operator, Stream, StreamChannel, StreamElementType};

use super::{advance, owner, ExchangeVariant, Particle, ParticlesConfig, RECORD_BYTES};
use crate::apps::grid::{Face, GridTopology};

const FORWARD_TAG: u64 = 0xa000;
/// Particle record plus destination rank and hop count.
const SLOT_BYTES: usize = RECORD_BYTES + 8;
const HEADER_BYTES: usize = 16;
/// Particles moved between two cost charges.
const MOVE_CHUNK: usize = 1024;

fn element_bytes(batch: usize) -> usize {
    HEADER_BYTES + batch * SLOT_BYTES
}

fn push_slot(buf: &mut Vec<u8>, p: &Particle, dest: usize, hops: u32) {
    buf.extend_from_slice(&p.to_bytes());
    buf.extend_from_slice(&(dest as u32).to_le_bytes());
    buf.extend_from_slice(&hops.to_le_bytes());
}

fn read_slot(slot: &[u8]) -> Result<(Particle, usize, u32)> {
    let p = Particle::from_bytes(&slot[..RECORD_BYTES])?;
    let mut r = Reader::new(&slot[RECORD_BYTES..]);
    Ok((p, r.u32()? as usize, r.u32()?))
}

/// One stream element: `step, count, end` header and `count` slots.
fn encode_element(step: u64, slots: &[u8], end: bool, batch: usize) -> Vec<u8> {
    let mut w = Writer::with_capacity(element_bytes(batch));
    w.u64(step).u32((slots.len() / SLOT_BYTES) as u32).u8(end as u8);
    w.pad_to(HEADER_BYTES).raw(slots).pad_to(element_bytes(batch));
    w.finish()
}

fn decode_element(e: &[u8]) -> Result<(u64, bool, impl Iterator<Item = &[u8]>)> {
    let mut r = Reader::new(e);
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let end = r.u8()? != 0;
    let body = &e[HEADER_BYTES..];
    if count * SLOT_BYTES > body.len() {
        return Err(Error::protocol(format!("element claims {count} particles")));
    }
    Ok((step, end, body[..count * SLOT_BYTES].chunks_exact(SLOT_BYTES)))
}

/// Sends `slots` in full elements, the last one flagged `end`.
fn send_bins<O: Operator>(
    rank: &mut Rank<'_>,
    stream: &mut Stream<O>,
    consumer: usize,
    step: u64,
    slots: &[u8],
    batch: usize,
) -> Result<()> {
    let chunk = batch * SLOT_BYTES;
    let mut parts = slots.chunks(chunk).peekable();
    if parts.peek().is_none() {
        stream.isend_to(rank, consumer, &encode_element(step, &[], true, batch))?;
    }
    while let Some(part) = parts.next() {
        let end = parts.peek().is_none();
        stream.isend_to(rank, consumer, &encode_element(step, part, end, batch))?;
    }
    Ok(())
}

pub(super) struct Inbox {
    me: usize,
    step: u64,
    ended: bool,
    arrived: Vec<(Particle, u32)>,
}

impl Operator for Inbox {
    fn apply(&mut self, _rank: &mut Rank<'_>, producer: usize, element: &[u8]) -> Result<()> {
        let (step, end, slots) = decode_element(element)?;
        if step != self.step || self.ended {
            return Err(Error::protocol(format!(
                "rank {} got particles for step {step} from rank {producer} during step {}",
                self.me, self.step
            )));
        }
        for s in slots {
            let (p, dest, hops) = read_slot(s)?;
            if dest != self.me {
                return Err(Error::protocol(format!("particle {} for rank {dest} delivered to rank {}", p.id, self.me)));
            }
            self.arrived.push((p, hops + 1));
        }
        self.ended |= end;
        Ok(())
    }
}

#[allow(clippy::large_enum_variant)]
pub(super) enum Exchanger<'c> {
    Neighbor {
        config: &'c ParticlesConfig,
        topo: &'c GridTopology,
        members: Vec<usize>,
    },
    Decoupled {
        config: &'c ParticlesConfig,
        topo: &'c GridTopology,
        channels: (StreamChannel, StreamChannel),
        out: Stream<NoOperator>,
        inbox: Stream<Inbox>,
        exchange_ranks: usize,
    },
}

impl<'c> Exchanger<'c> {
    pub(super) fn new(rank: &mut Rank<'_>, config: &'c ParticlesConfig, topo: &'c GridTopology) -> Result<Self> {
        match config.exchange {
            ExchangeVariant::Neighbor => Ok(Exchanger::Neighbor {
                config,
                topo,
                members: rank.layout().members("compute")?.to_vec(),
            }),
            ExchangeVariant::Decoupled => {
                let ty = StreamElementType::new("particle-slots", element_bytes(config.batch_particles))?;
                ty.register(rank)?;
                let up = StreamChannel::create(rank, "compute", "exchange")?;
                let down = StreamChannel::create(rank, "exchange", "compute")?;
                let out = up.attach(rank, &ty, NoOperator)?;
                let inbox = down.attach(
                    rank,
                    &ty,
                    Inbox {
                        me: rank.id(),
                        step: 0,
                        ended: false,
                        arrived: Vec::new(),
                    },
                )?;
                Ok(Exchanger::Decoupled {
                    config,
                    topo,
                    channels: (up, down),
                    out,
                    inbox,
                    exchange_ranks: rank.layout().members("exchange")?.len(),
                })
            }
        }
    }

    /// Moves `particles` one step and exchanges those that left. Returns the
    /// particles now owned, the most hops any of them made and the number
    /// of forwarding rounds.
    pub(super) fn step(&mut self, rank: &mut Rank<'_>, step: u64, particles: Vec<Particle>) -> Result<(Vec<Particle>, u32, usize)> {
        let me = rank.id();
        match self {
            Exchanger::Neighbor { config, topo, members } => {
                let (config, topo) = (*config, *topo);
                let mut held = Vec::with_capacity(particles.len());
                let mut transit = Vec::new();
                for chunk in particles.chunks(MOVE_CHUNK) {
                    rank.compute("move", chunk.len() as f64 * config.costs.move_per_particle)?;
                    for p in chunk {
                        let mut p = *p;
                        advance(&mut p, config.dt).map_err(|e| at_step(e, step))?;
                        let dest = owner(topo, p.pos);
                        if dest == me {
                            held.push(p);
                        } else {
                            transit.push((p, dest, 0u32));
                        }
                    }
                }
                let (arrived, rounds) = forward(rank, config, topo, members, transit)?;
                let hops = arrived.iter().map(|a| a.1).max().unwrap_or(0);
                held.extend(arrived.into_iter().map(|a| a.0));
                Ok((held, hops, rounds))
            }
            Exchanger::Decoupled {
                config,
                topo,
                out,
                inbox,
                exchange_ranks,
                ..
            } => {
                let (config, topo, n_exch) = (*config, *topo, *exchange_ranks);
                let batch = config.batch_particles;
                let full = batch * SLOT_BYTES;
                let mut bins = vec![Vec::with_capacity(full); n_exch];
                let mut held = Vec::with_capacity(particles.len());
                inbox.operator_mut().step = step;
                for chunk in particles.chunks(MOVE_CHUNK) {
                    rank.compute("move", chunk.len() as f64 * config.costs.move_per_particle)?;
                    let mut routed = 0;
                    for p in chunk {
                        let mut p = *p;
                        advance(&mut p, config.dt).map_err(|e| at_step(e, step))?;
                        let dest = owner(topo, p.pos);
                        if dest == me {
                            held.push(p);
                            continue;
                        }
                        routed += 1;
                        let e = dest % n_exch;
                        push_slot(&mut bins[e], &p, dest, 1);
                        if bins[e].len() == full {
                            out.isend_to(rank, e, &encode_element(step, &bins[e], false, batch))?;
                            bins[e].clear();
                        }
                    }
                    rank.compute("route", routed as f64 * config.costs.route_per_particle)?;
                }
                for (e, bin) in bins.iter().enumerate() {
                    out.isend_to(rank, e, &encode_element(step, bin, true, batch))?;
                }
                while !inbox.operator().ended {
                    if inbox.operate_some(rank)?.terminated {
                        return Err(Error::protocol(format!("rank {me}: particle stream ended during step {step}")));
                    }
                }
                let ib = inbox.operator_mut();
                ib.ended = false;
                let arrived = std::mem::take(&mut ib.arrived);
                let hops = arrived.iter().map(|a| a.1).max().unwrap_or(0);
                held.extend(arrived.into_iter().map(|a| a.0));
                Ok((held, hops, 0))
            }
        }
    }

    pub(super) fn finish(self, rank: &mut Rank<'_>) -> Result<()> {
        if let Exchanger::Decoupled {
            channels: (mut up, mut down),
            mut out,
            mut inbox,
            ..
        } = self
        {
            out.terminate(rank)?;
            inbox.operate(rank)?;
            if !inbox.operator().arrived.is_empty() {
                return Err(Error::protocol(format!("rank {} got particles after its last step", rank.id())));
            }
            drop((out, inbox));
            up.free(rank)?;
            down.free(rank)?;
        }
        Ok(())
    }
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Numerical { detail, .. } => Error::Numerical {
            iteration: step as usize,
            detail,
        },
        other => other,
    }
}

/// Face through which a particle at `me` leaves toward `dest`: the first
/// axis where the coordinates differ, in the shorter periodic direction.
fn next_face(topo: &GridTopology, me: usize, dest: usize) -> Face {
    let (a, b) = (topo.coords(me), topo.coords(dest));
    let d = topo.dims();
    let axis = (0..3).find(|&i| a[i] != b[i]).expect("particle is not at its destination");
    let ahead = (b[axis] + d[axis] - a[axis]) % d[axis];
    Face::ALL[2 * axis + usize::from(ahead <= d[axis] / 2)]
}

/// Hop-by-hop forwarding through the six grid neighbours until every
/// particle has reached its owner.
fn forward(
    rank: &mut Rank<'_>,
    config: &ParticlesConfig,
    topo: &GridTopology,
    members: &[usize],
    mut transit: Vec<(Particle, usize, u32)>,
) -> Result<(Vec<(Particle, u32)>, usize)> {
    let me = rank.id();
    let d = topo.dims();
    let bound: usize = d.iter().sum();
    let faces: Vec<Face> = Face::ALL.into_iter().filter(|f| d[f.axis()] > 1).collect();
    let mut arrived = Vec::new();
    let mut rounds = 0;
    loop {
        let pending = rank.allreduce_sum_u64(members, transit.len() as u64)?;
        if pending == 0 {
            return Ok((arrived, rounds));
        }
        rounds += 1;
        if rounds > bound {
            return Err(Error::protocol(format!(
                "{pending} particles still in transit after {bound} forwarding rounds"
            )));
        }
        let mut bins: [Vec<u8>; 6] = Default::default();
        rank.compute("route", transit.len() as f64 * config.costs.route_per_particle)?;
        for (p, dest, hops) in transit.drain(..) {
            push_slot(&mut bins[next_face(topo, me, dest).index()], &p, dest, hops + 1);
        }
        for &f in &faces {
            let body = std::mem::take(&mut bins[f.index()]);
            rank.send(topo.periodic_neighbor(me, f), Tag::User(FORWARD_TAG + f.index() as u64), body)?;
        }
        for &f in &faces {
            let from = topo.periodic_neighbor(me, f.opposite());
            let msg = rank.recv(Tag::User(FORWARD_TAG + f.index() as u64), Some(from))?;
            for s in msg.body.chunks_exact(SLOT_BYTES) {
                let (p, dest, hops) = read_slot(s)?;
                if dest == me {
                    arrived.push((p, hops));
                } else {
                    transit.push((p, dest, hops));
                }
            }
        }
    }
}

/// Exchange-group side: bins arriving particles by destination and, once
/// every compute rank has finished a step, streams each bin to its owner.
pub(super) fn exchange_rank(rank: &mut Rank<'_>, config: &ParticlesConfig, topo: &GridTopology) -> Result<()> {
    let batch = config.batch_particles;
    let ty = StreamElementType::new("particle-slots", element_bytes(batch))?;
    ty.register(rank)?;
    let mut up = StreamChannel::create(rank, "compute", "exchange")?;
    let mut down = StreamChannel::create(rank, "exchange", "compute")?;
    let mut back = down.attach(rank, &ty, NoOperator)?;
    let n_exch = rank.layout().members("exchange")?.len();
    let me = rank.layout().index_in_group(rank.id()).expect("member");
    let n_compute = topo.ranks();
    let owned: Vec<usize> = (me..n_compute).step_by(n_exch).collect();
    let cost = config.costs.route_per_particle;
    // step -> (bins per owned compute rank, end markers seen)
    let mut steps: BTreeMap<u64, (Vec<Vec<u8>>, usize)> = BTreeMap::new();
    {
        let back = &mut back;
        let steps = &mut steps;
        let owned = &owned;
        let mut input = up.attach(
            rank,
            &ty,
            operator(move |rank, src, element| {
                let (step, end, slots) = decode_element(element)?;
                let entry = steps.entry(step).or_insert_with(|| (vec![Vec::new(); owned.len()], 0));
                let mut n = 0;
                for s in slots {
                    let dest = u32::from_le_bytes(s[RECORD_BYTES..RECORD_BYTES + 4].try_into().expect("4 bytes")) as usize;
                    if dest >= n_compute || dest % n_exch != me {
                        return Err(Error::protocol(format!(
                            "particle from rank {src} for rank {dest} cannot be routed by exchange rank {me}"
                        )));
                    }
                    entry.0[dest / n_exch].extend_from_slice(s);
                    n += 1;
                }
                rank.compute("route", n as f64 * cost)?;
                if end {
                    entry.1 += 1;
                    if entry.1 == n_compute {
                        let (bins, _) = steps.remove(&step).expect("present");
                        for (i, bin) in bins.iter().enumerate() {
                            send_bins(rank, back, owned[i], step, bin, batch)?;
                        }
                    }
                }
                Ok(())
            }),
        )?;
        input.operate(rank)?;
    }
    if let Some((step, (_, ends))) = steps.iter().next() {
        return Err(Error::protocol(format!(
            "exchange rank {me}: step {step} ended by {ends} of {n_compute} compute ranks"
        )));
    }
    back.terminate(rank)?;
    drop(back);
    up.free(rank)?;
    down.free(rank)?;
    Ok(())
}
