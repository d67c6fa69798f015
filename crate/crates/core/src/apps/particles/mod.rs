//! Ballistic particle mover on a periodic unit box split over a Cartesian
//! grid of ranks.
//!
//! Particles that leave their rank's box are either forwarded hop by hop
//! through the six grid neighbours, or streamed to an exchange group that
//! bins them by destination and streams each bin straight to its owner.
//! The final particle state can be written as 56-byte records with a
//! shared file pointer, with precomputed per-rank offsets, or through a
//! group of buffering writer ranks.

mod exchange;
mod io;

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use io::{read_records, read_sidecar, write_sidecar, IoReport, Sidecar, SCHEMA_VERSION};

use crate::error::{Error, Result};
use crate::layout::GroupLayout;
use crate::runtime::{run, EventTrace, Rank, SimConfig, SimTime, TransportStats};

use super::grid::GridTopology;

/// Size of one serialized particle.
pub const RECORD_BYTES: usize = 56;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub id: u64,
    pub pos: [f64; 3],
    pub vel: [f64; 3],
}

impl Particle {
    /// Little-endian `id, x, y, z, vx, vy, vz`.
    pub fn to_bytes(&self) -> [u8; RECORD_BYTES] {
        let mut out = [0u8; RECORD_BYTES];
        out[..8].copy_from_slice(&self.id.to_le_bytes());
        for (i, v) in self.pos.iter().chain(&self.vel).enumerate() {
            out[8 + 8 * i..16 + 8 * i].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != RECORD_BYTES {
            return Err(Error::protocol(format!("particle record of {} bytes", b.len())));
        }
        let f = |i: usize| f64::from_le_bytes(b[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"));
        Ok(Particle {
            id: u64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
            pos: [f(0), f(1), f(2)],
            vel: [f(3), f(4), f(5)],
        })
    }

    /// Exact comparison key, usable for sorting multisets.
    pub fn bits(&self) -> (u64, [u64; 6]) {
        let mut v = [0; 6];
        for (o, x) in v.iter_mut().zip(self.pos.iter().chain(&self.vel)) {
            *o = x.to_bits();
        }
        (self.id, v)
    }
}

/// Maps `x` into `[0, 1)`.
pub fn wrap(x: f64) -> f64 {
    let y = x - x.floor();
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Rank whose box contains `pos`.
pub fn owner(topo: &GridTopology, pos: [f64; 3]) -> usize {
    let d = topo.dims();
    let c = [0, 1, 2].map(|a| ((pos[a] * d[a] as f64) as usize).min(d[a] - 1));
    topo.rank_at(c)
}

/// Advances every particle by `vel * dt` with periodic wrap and splits them
/// into those still owned by `rank` and those that left.
pub fn move_particles(
    topo: &GridTopology,
    rank: usize,
    particles: Vec<Particle>,
    dt: f64,
) -> Result<(Vec<Particle>, Vec<Particle>)> {
    let mut stayed = Vec::with_capacity(particles.len());
    let mut exiting = Vec::new();
    for mut p in particles {
        advance(&mut p, dt)?;
        if owner(topo, p.pos) == rank {
            stayed.push(p);
        } else {
            exiting.push(p);
        }
    }
    Ok((stayed, exiting))
}

fn advance(p: &mut Particle, dt: f64) -> Result<()> {
    for a in 0..3 {
        p.pos[a] = wrap(p.pos[a] + p.vel[a] * dt);
    }
    if p.pos.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical {
            iteration: 0,
            detail: format!("particle {} has position {:?}", p.id, p.pos),
        });
    }
    Ok(())
}

/// Initial particle population.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleGen {
    pub count: u64,
    /// Fraction of ranks that hold particles initially; 1 spreads them
    /// over the whole box.
    pub hot_fraction: f64,
    /// Velocity components are uniform in `[-max_speed, max_speed]`.
    pub max_speed: f64,
    pub seed: u64,
}

impl Default for ParticleGen {
    fn default() -> Self {
        ParticleGen {
            count: 100_000,
            hot_fraction: 1.0,
            max_speed: 0.25,
            seed: 0,
        }
    }
}

impl ParticleGen {
    /// Particles per rank, with ids `0..count`.
    pub fn generate(&self, topo: &GridTopology) -> Result<Vec<Vec<Particle>>> {
        if !(self.hot_fraction > 0.0 && self.hot_fraction <= 1.0) {
            return Err(Error::invalid(format!("hot fraction must be in (0, 1], got {}", self.hot_fraction)));
        }
        if !(self.max_speed.is_finite() && self.max_speed >= 0.0) {
            return Err(Error::invalid(format!("max speed must be >= 0, got {}", self.max_speed)));
        }
        let ranks = topo.ranks();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut hot: Vec<usize> = (0..ranks).collect();
        hot.shuffle(&mut rng);
        hot.truncate(((self.hot_fraction * ranks as f64).round() as usize).max(1));
        hot.sort_unstable();
        let d = topo.dims();
        let mut out = vec![Vec::new(); ranks];
        for id in 0..self.count {
            let home = if hot.len() == ranks { None } else { Some(hot[rng.random_range(0..hot.len())]) };
            let pos = match home {
                None => [0; 3].map(|_| rng.random_range(0.0..1.0)),
                Some(r) => {
                    let c = topo.coords(r);
                    [0, 1, 2].map(|a| (c[a] as f64 + rng.random_range(0.0..1.0)) / d[a] as f64)
                }
            };
            let pos = pos.map(wrap);
            let s = self.max_speed;
            let vel = [0; 3].map(|_| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 });
            out[owner(topo, pos)].push(Particle { id, pos, vel });
        }
        Ok(out)
    }
}

/// Moves every particle `steps` times on one thread and bins it by owner.
pub fn reference_state(topo: &GridTopology, initial: &[Vec<Particle>], steps: usize, dt: f64) -> Result<Vec<Vec<Particle>>> {
    let mut out = vec![Vec::new(); topo.ranks()];
    for p in initial.iter().flatten() {
        let mut p = *p;
        for _ in 0..steps {
            advance(&mut p, dt)?;
        }
        out[owner(topo, p.pos)].push(p);
    }
    for v in &mut out {
        v.sort_by_key(|p| p.id);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeVariant {
    Neighbor,
    Decoupled,
}

impl fmt::Display for ExchangeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExchangeVariant::Neighbor => "neighbor",
            ExchangeVariant::Decoupled => "decoupled",
        })
    }
}

impl std::str::FromStr for ExchangeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neighbor" => Ok(ExchangeVariant::Neighbor),
            "decoupled" => Ok(ExchangeVariant::Decoupled),
            _ => Err(Error::usage(format!("unknown exchange variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoVariant {
    None,
    Shared,
    Collective,
    Decoupled,
}

impl fmt::Display for IoVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IoVariant::None => "none",
            IoVariant::Shared => "shared",
            IoVariant::Collective => "collective",
            IoVariant::Decoupled => "decoupled",
        })
    }
}

impl std::str::FromStr for IoVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(IoVariant::None),
            "shared" => Ok(IoVariant::Shared),
            "collective" => Ok(IoVariant::Collective),
            "decoupled" => Ok(IoVariant::Decoupled),
            _ => Err(Error::usage(format!("unknown io variant `{s}`"))),
        }
    }
}

/// Virtual-time costs in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleCosts {
    pub move_per_particle: f64,
    /// Sorting one particle into an outgoing bin.
    pub route_per_particle: f64,
    /// File system time per byte; the file system serves one writer at a
    /// time.
    pub io_per_byte: f64,
    /// Fixed cost of one write call.
    pub io_call: f64,
}

impl Default for ParticleCosts {
    fn default() -> Self {
        ParticleCosts {
            move_per_particle: 0.02,
            route_per_particle: 0.005,
            io_per_byte: 0.0005,
            io_call: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticlesConfig {
    pub dims: [usize; 3],
    pub generator: ParticleGen,
    pub steps: usize,
    pub dt: f64,
    pub exchange: ExchangeVariant,
    pub io: IoVariant,
    /// Exchange group size for the decoupled exchange.
    pub exchange_ranks: usize,
    /// Writer group size for the decoupled I/O.
    pub io_ranks: usize,
    /// Particles per stream element.
    pub batch_particles: usize,
    /// Bytes a writer buffers before flushing.
    pub writer_buffer_bytes: usize,
    /// Output file; required unless `io` is `None`.
    pub output: Option<PathBuf>,
    pub costs: ParticleCosts,
}

impl Default for ParticlesConfig {
    fn default() -> Self {
        ParticlesConfig {
            dims: [4, 4, 4],
            generator: ParticleGen::default(),
            steps: 1,
            dt: 1.0,
            exchange: ExchangeVariant::Neighbor,
            io: IoVariant::None,
            exchange_ranks: 1,
            io_ranks: 1,
            batch_particles: 64,
            writer_buffer_bytes: 16 << 20,
            output: None,
            costs: ParticleCosts::default(),
        }
    }
}

impl ParticlesConfig {
    pub fn topology(&self) -> Result<GridTopology> {
        GridTopology::new(self.dims)
    }

    pub fn compute_ranks(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn total_ranks(&self) -> usize {
        let mut n = self.compute_ranks();
        if self.exchange == ExchangeVariant::Decoupled {
            n += self.exchange_ranks;
        }
        if self.io == IoVariant::Decoupled {
            n += self.io_ranks;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        self.topology()?;
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.batch_particles == 0 {
            return Err(Error::invalid("batch_particles must be positive"));
        }
        if self.exchange == ExchangeVariant::Decoupled && self.exchange_ranks == 0 {
            return Err(Error::invalid("decoupled exchange needs at least one exchange rank"));
        }
        if self.io == IoVariant::Decoupled && self.io_ranks == 0 {
            return Err(Error::invalid("decoupled io needs at least one writer rank"));
        }
        if self.io != IoVariant::None && self.output.is_none() {
            return Err(Error::usage("particle output needs a path"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<GroupLayout> {
        let mut groups = vec![("compute", self.compute_ranks())];
        if self.exchange == ExchangeVariant::Decoupled {
            groups.push(("exchange", self.exchange_ranks));
        }
        if self.io == IoVariant::Decoupled {
            groups.push(("io", self.io_ranks));
        }
        let mut layout = GroupLayout::contiguous(&groups)?.with_op("move", "compute")?;
        if self.exchange == ExchangeVariant::Decoupled {
            layout.map_op("route", "exchange")?;
        }
        if self.io == IoVariant::Decoupled {
            layout.map_op("write", "io")?;
        }
        Ok(layout)
    }
}

#[derive(Debug)]
pub struct ParticlesRun {
    /// Final particles of every compute rank, sorted by id.
    pub per_rank: Vec<Vec<Particle>>,
    /// Largest number of transfers any particle made in one step.
    pub max_hops: u32,
    /// Largest number of forwarding rounds in one step.
    pub max_rounds: usize,
    pub io: Option<IoReport>,
    pub layout: GroupLayout,
    pub makespan: SimTime,
    pub trace: EventTrace,
    pub stats: TransportStats,
}

#[derive(Default)]
struct ComputeOutcome {
    particles: Vec<Particle>,
    max_hops: u32,
    max_rounds: usize,
    io: Option<IoReport>,
}

/// Runs `steps` move-and-exchange steps from `initial` and writes the final
/// state if an I/O variant is selected.
pub fn run_particles(config: &ParticlesConfig, initial: &[Vec<Particle>], sim: &SimConfig) -> Result<ParticlesRun> {
    config.validate()?;
    let topo = config.topology()?;
    if initial.len() != topo.ranks() {
        return Err(Error::invalid(format!(
            "initial state has {} ranks, grid has {}",
            initial.len(),
            topo.ranks()
        )));
    }
    if sim.total_ranks != config.total_ranks() {
        return Err(Error::invalid(format!(
            "particle run needs {} ranks, got {}",
            config.total_ranks(),
            sim.total_ranks
        )));
    }
    let layout = config.layout()?;
    let shared = io::prepare(config)?;
    let out = run(&layout, sim, |rank| match rank.group().name.as_str() {
        "compute" => compute_rank(rank, config, &topo, &initial[rank.id()], shared.as_ref()),
        "exchange" => exchange::exchange_rank(rank, config, &topo).map(|()| ComputeOutcome::default()),
        "io" => io::writer_rank(rank, config).map(|io| ComputeOutcome { io, ..ComputeOutcome::default() }),
        other => Err(Error::usage(format!("unexpected group `{other}`"))),
    })?;
    let makespan = out.makespan();
    let mut per_rank = Vec::with_capacity(topo.ranks());
    let (mut max_hops, mut max_rounds) = (0, 0);
    let mut report = None;
    for (r, o) in out.results.into_iter().enumerate() {
        if r < topo.ranks() {
            per_rank.push(o.particles);
        }
        max_hops = max_hops.max(o.max_hops);
        max_rounds = max_rounds.max(o.max_rounds);
        if o.io.is_some() {
            report = o.io;
        }
    }
    Ok(ParticlesRun {
        per_rank,
        max_hops,
        max_rounds,
        io: report,
        layout,
        makespan,
        trace: out.trace,
        stats: out.stats,
    })
}

fn compute_rank(
    rank: &mut Rank<'_>,
    config: &ParticlesConfig,
    topo: &GridTopology,
    initial: &[Particle],
    shared: Option<&io::SharedFile>,
) -> Result<ComputeOutcome> {
    let mut out = ComputeOutcome {
        particles: initial.to_vec(),
        ..ComputeOutcome::default()
    };
    let mut ex = exchange::Exchanger::new(rank, config, topo)?;
    for step in 1..=config.steps {
        let (held, hops, rounds) = ex.step(rank, step as u64, std::mem::take(&mut out.particles))?;
        out.particles = held;
        out.max_hops = out.max_hops.max(hops);
        out.max_rounds = out.max_rounds.max(rounds);
    }
    ex.finish(rank)?;
    out.particles.sort_by_key(|p| p.id);
    out.io = io::write_compute_side(rank, config, shared, &out.particles)?;
    Ok(out)
}

#[cfg(test)]
mod tests;
