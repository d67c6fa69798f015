//! Conjugate gradient for the 3-D Poisson problem `-Δu = f` on the unit
//! cube with homogeneous Dirichlet boundaries, discretized with the
//! 7-point stencil.
//!
//! The ranks of a [`GridTopology`] each own a box of `local` points. Every
//! iteration does one halo exchange, one stencil application and two
//! global dot products. The halo exchange comes in three flavours:
//! blocking, non-blocking (interior stencil overlaps the exchange) and
//! decoupled, where faces are streamed to a separate exchange group that
//! assembles all six ghost faces of a rank and streams them back as one
//! element.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::layout::GroupLayout;
use crate::runtime::{run, EventTrace, Rank, SimConfig, SimTime, Tag, TransportStats};
use crate::stream::{operator, NoOperator, Operator, Stream, StreamChannel, StreamElementType};

use super::grid::{Face, GridTopology};

const HALO_TAG: u64 = 0xc600;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgVariant {
    Blocking,
    Nonblocking,
    Decoupled,
}

impl CgVariant {
    pub const ALL: [CgVariant; 3] = [CgVariant::Blocking, CgVariant::Nonblocking, CgVariant::Decoupled];
}

impl fmt::Display for CgVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CgVariant::Blocking => "blocking",
            CgVariant::Nonblocking => "nonblocking",
            CgVariant::Decoupled => "decoupled",
        })
    }
}

impl std::str::FromStr for CgVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blocking" => Ok(CgVariant::Blocking),
            "nonblocking" => Ok(CgVariant::Nonblocking),
            "decoupled" => Ok(CgVariant::Decoupled),
            _ => Err(Error::usage(format!("unknown cg variant `{s}`"))),
        }
    }
}

/// Right-hand side of the linear system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rhs {
    Zero,
    /// `3π² sin(πx) sin(πy) sin(πz)`, whose continuous solution is
    /// `sin(πx) sin(πy) sin(πz)`.
    Manufactured,
    /// Uniform values in `[-1, 1)` derived from the global point index.
    Random { seed: u64 },
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn coordinate(global: [usize; 3], g: [usize; 3], axis: usize) -> f64 {
    (g[axis] + 1) as f64 / (global[axis] + 1) as f64
}

/// `sin(πx) sin(πy) sin(πz)` at global point `g`.
pub fn manufactured_solution(global: [usize; 3], g: [usize; 3]) -> f64 {
    (0..3).map(|a| (PI * coordinate(global, g, a)).sin()).product()
}

impl Rhs {
    /// Value at global point `g` of a `global`-sized grid.
    pub fn value(&self, global: [usize; 3], g: [usize; 3]) -> f64 {
        match *self {
            Rhs::Zero => 0.0,
            Rhs::Manufactured => 3.0 * PI * PI * manufactured_solution(global, g),
            Rhs::Random { seed } => {
                let linear = ((g[0] * global[1] + g[1]) * global[2] + g[2]) as u64;
                let bits = splitmix64(seed ^ splitmix64(linear));
                (bits >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            }
        }
    }
}

/// Max-norm distance between the exact discrete solution of the
/// manufactured problem and the continuous one.
///
/// The manufactured field is an eigenvector of the discrete operator, so
/// the discrete solution is the field scaled by `3π² / λ`.
pub fn discretization_error(global: [usize; 3]) -> f64 {
    let lambda: f64 = (0..3)
        .map(|a| {
            let h = 1.0 / (global[a] + 1) as f64;
            4.0 / (h * h) * (PI * h / 2.0).sin().powi(2)
        })
        .sum();
    let peak: f64 = (0..3)
        .map(|a| {
            (0..global[a])
                .map(|i| (PI * (i + 1) as f64 / (global[a] + 1) as f64).sin())
                .fold(0.0, f64::max)
        })
        .product();
    (3.0 * PI * PI / lambda - 1.0).abs() * peak
}

/// Virtual-time costs in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgCosts {
    pub stencil_per_point: f64,
    pub vector_per_point: f64,
    pub pack_per_value: f64,
    pub aggregate_per_value: f64,
}

impl Default for CgCosts {
    fn default() -> Self {
        CgCosts {
            stencil_per_point: 0.01,
            vector_per_point: 0.002,
            pack_per_value: 0.001,
            aggregate_per_value: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgConfig {
    pub variant: CgVariant,
    pub dims: [usize; 3],
    /// Points per rank along each axis.
    pub local: [usize; 3],
    pub iterations: usize,
    pub rhs: Rhs,
    /// Size of the exchange group in the decoupled variant.
    pub exchange_ranks: usize,
    pub costs: CgCosts,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            variant: CgVariant::Blocking,
            dims: [2, 2, 2],
            local: [24, 24, 24],
            iterations: 100,
            rhs: Rhs::Manufactured,
            exchange_ranks: 1,
            costs: CgCosts::default(),
        }
    }
}

impl CgConfig {
    pub fn topology(&self) -> Result<GridTopology> {
        GridTopology::new(self.dims)
    }

    pub fn global(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.dims[a] * self.local[a])
    }

    pub fn total_ranks(&self) -> usize {
        let compute: usize = self.dims.iter().product();
        match self.variant {
            CgVariant::Decoupled => compute + self.exchange_ranks,
            _ => compute,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.topology()?;
        if self.local.iter().any(|&n| n < 2) {
            return Err(Error::invalid(format!("local extent must be >= 2 per axis, got {:?}", self.local)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("cg needs at least one iteration"));
        }
        if self.variant == CgVariant::Decoupled && self.exchange_ranks == 0 {
            return Err(Error::invalid("decoupled cg needs at least one exchange rank"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<GroupLayout> {
        let compute: usize = self.dims.iter().product();
        match self.variant {
            CgVariant::Decoupled => GroupLayout::contiguous(&[("compute", compute), ("exchange", self.exchange_ranks)])?
                .with_op("stencil", "compute")?
                .with_op("exchange", "exchange"),
            _ => GroupLayout::single(compute, "compute")?.with_op("stencil", "compute"),
        }
    }
}

#[derive(Debug)]
pub struct CgRun {
    /// Global `r·r` after every iteration.
    pub history: Vec<f64>,
    /// Solution over the global grid, x slowest.
    pub solution: Vec<f64>,
    pub global: [usize; 3],
    pub layout: GroupLayout,
    pub makespan: SimTime,
    pub trace: EventTrace,
    pub stats: TransportStats,
}

impl CgRun {
    /// Max-norm distance of the solution from `sin(πx) sin(πy) sin(πz)`.
    pub fn max_error(&self) -> f64 {
        max_error(self.global, &self.solution)
    }
}

/// Max-norm distance of a global field from the manufactured solution.
pub fn max_error(global: [usize; 3], solution: &[f64]) -> f64 {
    let mut err: f64 = 0.0;
    for x in 0..global[0] {
        for y in 0..global[1] {
            for z in 0..global[2] {
                let v = solution[(x * global[1] + y) * global[2] + z];
                err = err.max((v - manufactured_solution(global, [x, y, z])).abs());
            }
        }
    }
    err
}

/// Writes the residual history as `iter,rho` with 1-based iterations.
pub fn write_history<W: Write>(history: &[f64], mut out: W) -> io::Result<()> {
    writeln!(out, "iter,rho")?;
    for (i, rho) in history.iter().enumerate() {
        writeln!(out, "{},{rho:e}", i + 1)?;
    }
    Ok(())
}

/// Single-threaded CG over the whole grid.
pub fn serial_cg(global: [usize; 3], iterations: usize, rhs: Rhs) -> Result<(Vec<f64>, Vec<f64>)> {
    let [nx, ny, nz] = global;
    let n = nx * ny * nz;
    let inv_h2 = [0, 1, 2].map(|a| ((global[a] + 1) * (global[a] + 1)) as f64);
    let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
    let apply = |p: &[f64], q: &mut [f64]| {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let c = p[idx(x, y, z)];
                    let at = |ok: bool, x: usize, y: usize, z: usize| if ok { p[idx(x, y, z)] } else { 0.0 };
                    let lx = 2.0 * c - at(x > 0, x.wrapping_sub(1), y, z) - at(x + 1 < nx, x + 1, y, z);
                    let ly = 2.0 * c - at(y > 0, x, y.wrapping_sub(1), z) - at(y + 1 < ny, x, y + 1, z);
                    let lz = 2.0 * c - at(z > 0, x, y, z.wrapping_sub(1)) - at(z + 1 < nz, x, y, z + 1);
                    q[idx(x, y, z)] = lx * inv_h2[0] + ly * inv_h2[1] + lz * inv_h2[2];
                }
            }
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut r = vec![0.0; n];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                r[idx(x, y, z)] = rhs.value(global, [x, y, z]);
            }
        }
    }
    let mut x = vec![0.0; n];
    let mut p = r.clone();
    let mut q = vec![0.0; n];
    let mut rho = dot(&r, &r);
    let mut history = Vec::with_capacity(iterations);
    for it in 1..=iterations {
        apply(&p, &mut q);
        let pq = dot(&p, &q);
        let alpha = if pq == 0.0 { 0.0 } else { rho / pq };
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let rho_new = dot(&r, &r);
        if !rho_new.is_finite() || !alpha.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                detail: format!("rho = {rho_new}, alpha = {alpha}"),
            });
        }
        let beta = if rho == 0.0 { 0.0 } else { rho_new / rho };
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rho = rho_new;
        history.push(rho);
    }
    Ok((history, x))
}

/// Local box with one ghost layer.
struct Block {
    n: [usize; 3],
    stride: [usize; 3],
    inv_h2: [f64; 3],
    /// Linear indices of all owned points, in storage order.
    owned: Vec<usize>,
    /// Owned points not touching any face.
    inner: Vec<usize>,
    /// Owned points touching at least one face.
    shell: Vec<usize>,
    /// Per face: owned plane next to the face, and the ghost plane beyond.
    planes: [(Vec<usize>, Vec<usize>); 6],
}

impl Block {
    fn new(n: [usize; 3], global: [usize; 3]) -> Self {
        let stride = [(n[1] + 2) * (n[2] + 2), n[2] + 2, 1];
        let at = |c: [usize; 3]| c[0] * stride[0] + c[1] * stride[1] + c[2];
        let mut owned = Vec::new();
        let mut inner = Vec::new();
        let mut shell = Vec::new();
        for i in 1..=n[0] {
            for j in 1..=n[1] {
                for k in 1..=n[2] {
                    let c = [i, j, k];
                    let l = at(c);
                    owned.push(l);
                    if (0..3).all(|a| c[a] > 1 && c[a] < n[a]) {
                        inner.push(l);
                    } else {
                        shell.push(l);
                    }
                }
            }
        }
        let planes = Face::ALL.map(|f| {
            let a = f.axis();
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            let (b, c) = (b.min(c), b.max(c));
            let (own, ghost) = if f.is_positive() { (n[a], n[a] + 1) } else { (1, 0) };
            let mut o = Vec::with_capacity(n[b] * n[c]);
            let mut g = Vec::with_capacity(n[b] * n[c]);
            for u in 1..=n[b] {
                for v in 1..=n[c] {
                    let mut p = [0; 3];
                    p[b] = u;
                    p[c] = v;
                    p[a] = own;
                    o.push(at(p));
                    p[a] = ghost;
                    g.push(at(p));
                }
            }
            (o, g)
        });
        Block {
            n,
            stride,
            inv_h2: [0, 1, 2].map(|a| ((global[a] + 1) * (global[a] + 1)) as f64),
            owned,
            inner,
            shell,
            planes,
        }
    }

    fn len(&self) -> usize {
        (self.n[0] + 2) * (self.n[1] + 2) * (self.n[2] + 2)
    }

    fn face_len(&self, f: Face) -> usize {
        self.planes[f.index()].0.len()
    }

    fn stencil(&self, p: &[f64], q: &mut [f64], points: &[usize]) {
        let [sx, sy, sz] = self.stride;
        let [hx, hy, hz] = self.inv_h2;
        for &l in points {
            let c = 2.0 * p[l];
            q[l] = (c - p[l - sx] - p[l + sx]) * hx + (c - p[l - sy] - p[l + sy]) * hy + (c - p[l - sz] - p[l + sz]) * hz;
        }
    }

    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.owned.iter().map(|&l| a[l] * b[l]).sum()
    }

    fn pack<'a>(&'a self, p: &'a [f64], f: Face) -> impl Iterator<Item = f64> + 'a {
        self.planes[f.index()].0.iter().map(move |&l| p[l])
    }

    fn unpack(&self, p: &mut [f64], f: Face, values: impl Iterator<Item = f64>) {
        for (&l, v) in self.planes[f.index()].1.iter().zip(values) {
            p[l] = v;
        }
    }
}

#[allow(clippy::large_enum_variant)]
enum Halo {
    Direct { nonblocking: bool },
    Streamed {
        channels: (StreamChannel, StreamChannel),
        out: Stream<NoOperator>,
        inbox: Stream<Inbox>,
        exch: usize,
        max_face: usize,
    },
}

/// Collects assembled ghost elements by iteration.
struct Inbox {
    ready: BTreeMap<u64, Vec<u8>>,
}

impl Operator for Inbox {
    fn apply(&mut self, _rank: &mut Rank<'_>, producer: usize, element: &[u8]) -> Result<()> {
        let iter = Reader::new(element).u64()?;
        if self.ready.insert(iter, element.to_vec()).is_some() {
            return Err(Error::protocol(format!("second ghost element for iteration {iter} from rank {producer}")));
        }
        Ok(())
    }
}

fn face_element_bytes(max_face: usize) -> usize {
    8 + 4 + 1 + 8 * max_face
}

fn ghost_element_bytes(block_faces: usize) -> usize {
    8 + 8 * block_faces
}

enum RankResult {
    Compute { values: Vec<f64>, history: Vec<f64> },
    Exchange,
}

pub fn cg_solve(config: &CgConfig, sim: &SimConfig) -> Result<CgRun> {
    config.validate()?;
    if sim.total_ranks != config.total_ranks() {
        return Err(Error::invalid(format!(
            "{} cg on {:?} needs {} ranks, got {}",
            config.variant,
            config.dims,
            config.total_ranks(),
            sim.total_ranks
        )));
    }
    let layout = config.layout()?;
    let topo = config.topology()?;
    let out = run(&layout, sim, |rank| {
        if rank.group().name == "exchange" {
            exchange_rank(rank, config, &topo).map(|()| RankResult::Exchange)
        } else {
            compute_rank(rank, config, &topo)
        }
    })?;
    let makespan = out.makespan();
    let global = config.global();
    let mut solution = vec![0.0; global.iter().product()];
    let mut history = Vec::new();
    for (r, res) in out.results.into_iter().enumerate() {
        let RankResult::Compute { values, history: h } = res else { continue };
        if r == 0 {
            history = h;
        }
        let c = topo.coords(r);
        let n = config.local;
        let mut it = values.into_iter();
        for i in 0..n[0] {
            for j in 0..n[1] {
                for k in 0..n[2] {
                    let g = [c[0] * n[0] + i, c[1] * n[1] + j, c[2] * n[2] + k];
                    solution[(g[0] * global[1] + g[1]) * global[2] + g[2]] = it.next().expect("block size");
                }
            }
        }
    }
    Ok(CgRun {
        history,
        solution,
        global,
        layout,
        makespan,
        trace: out.trace,
        stats: out.stats,
    })
}

fn compute_rank(rank: &mut Rank<'_>, config: &CgConfig, topo: &GridTopology) -> Result<RankResult> {
    let me = rank.id();
    let global = config.global();
    let block = Block::new(config.local, global);
    let costs = config.costs;
    let members = rank.layout().members("compute")?.to_vec();
    let npts = block.owned.len() as f64;
    let origin = {
        let c = topo.coords(me);
        [0, 1, 2].map(|a| c[a] * config.local[a])
    };

    let mut halo = match config.variant {
        CgVariant::Blocking => Halo::Direct { nonblocking: false },
        CgVariant::Nonblocking => Halo::Direct { nonblocking: true },
        CgVariant::Decoupled => {
            let max_face = Face::ALL.iter().map(|&f| block.face_len(f)).max().expect("six faces");
            let all_faces: usize = Face::ALL.iter().map(|&f| block.face_len(f)).sum();
            let up_ty = StreamElementType::new("cg-face", face_element_bytes(max_face))?;
            let down_ty = StreamElementType::new("cg-ghosts", ghost_element_bytes(all_faces))?;
            up_ty.register(rank)?;
            down_ty.register(rank)?;
            let up = StreamChannel::create(rank, "compute", "exchange")?;
            let down = StreamChannel::create(rank, "exchange", "compute")?;
            let out = up.attach(rank, &up_ty, NoOperator)?;
            let inbox = down.attach(rank, &down_ty, Inbox { ready: BTreeMap::new() })?;
            let exch = rank.layout().members("exchange")?.len();
            Halo::Streamed {
                channels: (up, down),
                out,
                inbox,
                exch,
                max_face,
            }
        }
    };

    let len = block.len();
    let mut x = vec![0.0; len];
    let mut r = vec![0.0; len];
    let mut q = vec![0.0; len];
    for (n, &l) in block.owned.iter().enumerate() {
        let [i, j, k] = [n / (config.local[1] * config.local[2]), (n / config.local[2]) % config.local[1], n % config.local[2]];
        r[l] = config.rhs.value(global, [origin[0] + i, origin[1] + j, origin[2] + k]);
    }
    let mut p = r.clone();
    rank.compute("vector", npts * costs.vector_per_point)?;
    let mut rho = rank.allreduce_sum_f64(&members, block.dot(&r, &r))?;
    let mut history = Vec::with_capacity(config.iterations);

    for it in 1..=config.iterations {
        apply_with_halo(rank, &mut halo, &block, topo, costs, it as u64, &mut p, &mut q)?;
        rank.compute("vector", npts * costs.vector_per_point)?;
        let pq = rank.allreduce_sum_f64(&members, block.dot(&p, &q))?;
        let alpha = if pq == 0.0 { 0.0 } else { rho / pq };
        if !alpha.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                detail: format!("p·Ap = {pq}, rho = {rho}"),
            });
        }
        for &l in &block.owned {
            x[l] += alpha * p[l];
            r[l] -= alpha * q[l];
        }
        rank.compute("vector", 2.0 * npts * costs.vector_per_point)?;
        let rho_new = rank.allreduce_sum_f64(&members, block.dot(&r, &r))?;
        if !rho_new.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                detail: format!("rho = {rho_new}"),
            });
        }
        let beta = if rho == 0.0 { 0.0 } else { rho_new / rho };
        for &l in &block.owned {
            p[l] = r[l] + beta * p[l];
        }
        rank.compute("vector", npts * costs.vector_per_point)?;
        rho = rho_new;
        history.push(rho);
    }

    if let Halo::Streamed {
        channels: (mut up, mut down),
        mut out,
        mut inbox,
        ..
    } = halo
    {
        out.terminate(rank)?;
        inbox.operate(rank)?;
        if let Some((&iter, _)) = inbox.operator().ready.iter().next() {
            return Err(Error::protocol(format!("rank {me} got an unused ghost element for iteration {iter}")));
        }
        drop((out, inbox));
        up.free(rank)?;
        down.free(rank)?;
    }

    Ok(RankResult::Compute {
        values: block.owned.iter().map(|&l| x[l]).collect(),
        history,
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_with_halo(
    rank: &mut Rank<'_>,
    halo: &mut Halo,
    block: &Block,
    topo: &GridTopology,
    costs: CgCosts,
    iter: u64,
    p: &mut [f64],
    q: &mut [f64],
) -> Result<()> {
    let me = rank.id();
    let neighbors: Vec<(Face, usize)> = Face::ALL
        .iter()
        .filter_map(|&f| topo.neighbor(me, f).map(|n| (f, n)))
        .collect();
    let halo_values: usize = neighbors.iter().map(|&(f, _)| block.face_len(f)).sum();
    rank.compute("pack", halo_values as f64 * costs.pack_per_value)?;
    let inner_cost = block.inner.len() as f64 * costs.stencil_per_point;
    let shell_cost = block.shell.len() as f64 * costs.stencil_per_point;

    match halo {
        Halo::Direct { nonblocking } => {
            for &(f, n) in &neighbors {
                let mut w = Writer::with_capacity(8 + 8 * block.face_len(f));
                w.u64(iter);
                for v in block.pack(p, f) {
                    w.f64(v);
                }
                rank.send(n, Tag::User(HALO_TAG + f.index() as u64), w.finish())?;
            }
            if *nonblocking {
                block.stencil(p, q, &block.inner);
                rank.compute("stencil", inner_cost)?;
            }
            for &(f, n) in &neighbors {
                let msg = rank.recv(Tag::User(HALO_TAG + f.opposite().index() as u64), Some(n))?;
                let mut rd = Reader::new(&msg.body);
                let got = rd.u64()?;
                if got != iter {
                    return Err(Error::protocol(format!(
                        "rank {me} face {f}: halo for iteration {got} during iteration {iter}"
                    )));
                }
                let values: Vec<f64> = (0..block.face_len(f)).map(|_| rd.f64()).collect::<Result<_>>()?;
                block.unpack(p, f, values.into_iter());
            }
            if *nonblocking {
                block.stencil(p, q, &block.shell);
                rank.compute("stencil", shell_cost)?;
            } else {
                block.stencil(p, q, &block.owned);
                rank.compute("stencil", inner_cost + shell_cost)?;
            }
        }
        Halo::Streamed {
            out,
            inbox,
            exch,
            max_face,
            ..
        } => {
            for &(f, n) in &neighbors {
                let mut w = Writer::with_capacity(face_element_bytes(*max_face));
                w.u64(iter);
                w.u32(n as u32);
                w.u8(f.opposite().index() as u8);
                for v in block.pack(p, f) {
                    w.f64(v);
                }
                w.pad_to(face_element_bytes(*max_face));
                out.isend_to(rank, n % *exch, &w.finish())?;
            }
            block.stencil(p, q, &block.inner);
            rank.compute("stencil", inner_cost)?;
            if !neighbors.is_empty() {
                while !inbox.operator().ready.contains_key(&iter) {
                    if inbox.operate_some(rank)?.terminated {
                        return Err(Error::protocol(format!("rank {me}: ghost stream ended before iteration {iter}")));
                    }
                }
                if let Some((&stale, _)) = inbox.operator().ready.iter().next().filter(|(&k, _)| k < iter) {
                    return Err(Error::protocol(format!("rank {me}: ghost element for iteration {stale} left over at {iter}")));
                }
                let element = inbox.operator_mut().ready.remove(&iter).expect("checked");
                let mut rd = Reader::new(&element);
                rd.u64()?;
                for f in Face::ALL {
                    let values: Vec<f64> = (0..block.face_len(f)).map(|_| rd.f64()).collect::<Result<_>>()?;
                    if topo.neighbor(me, f).is_some() {
                        block.unpack(p, f, values.into_iter());
                    }
                }
            }
            block.stencil(p, q, &block.shell);
            rank.compute("stencil", shell_cost)?;
        }
    }
    Ok(())
}

struct Pending {
    filled: [bool; 6],
    element: Vec<u8>,
}

fn exchange_rank(rank: &mut Rank<'_>, config: &CgConfig, topo: &GridTopology) -> Result<()> {
    let block = Block::new(config.local, config.global());
    let face_len = Face::ALL.map(|f| block.face_len(f));
    let max_face = *face_len.iter().max().expect("six faces");
    let all_faces: usize = face_len.iter().sum();
    let mut offsets = [0usize; 6];
    for f in 1..6 {
        offsets[f] = offsets[f - 1] + face_len[f - 1];
    }
    let up_ty = StreamElementType::new("cg-face", face_element_bytes(max_face))?;
    let down_ty = StreamElementType::new("cg-ghosts", ghost_element_bytes(all_faces))?;
    up_ty.register(rank)?;
    down_ty.register(rank)?;
    let mut up = StreamChannel::create(rank, "compute", "exchange")?;
    let mut down = StreamChannel::create(rank, "exchange", "compute")?;
    let mut back = down.attach(rank, &down_ty, NoOperator)?;
    let exch = rank.layout().members("exchange")?.len();
    let me = rank.layout().index_in_group(rank.id()).expect("member");
    let cost = config.costs.aggregate_per_value;
    let mut pending: HashMap<(usize, u64), Pending> = HashMap::new();
    {
        let back = &mut back;
        let pending = &mut pending;
        let mut faces = up.attach(
            rank,
            &up_ty,
            operator(move |rank, src, element| {
                let mut rd = Reader::new(element);
                let iter = rd.u64()?;
                let dest = rd.u32()? as usize;
                let slot = rd.u8()? as usize;
                let face = Face::from_index(slot)
                    .ok_or_else(|| Error::protocol(format!("face slot {slot} from rank {src}")))?;
                if dest >= topo.ranks() || dest % exch != me {
                    return Err(Error::protocol(format!("face for rank {dest} routed to exchange rank {me}")));
                }
                if topo.neighbor(dest, face) != Some(src) {
                    return Err(Error::protocol(format!(
                        "rank {src} is not the {face} neighbor of rank {dest}"
                    )));
                }
                let entry = pending.entry((dest, iter)).or_insert_with(|| {
                    let mut element = vec![0u8; ghost_element_bytes(all_faces)];
                    element[..8].copy_from_slice(&iter.to_le_bytes());
                    Pending { filled: [false; 6], element }
                });
                if entry.filled[slot] {
                    return Err(Error::protocol(format!("rank {dest} face {face} iteration {iter} sent twice")));
                }
                entry.filled[slot] = true;
                let n = face_len[slot];
                let start = 8 + 8 * offsets[slot];
                entry.element[start..start + 8 * n].copy_from_slice(rd.raw(8 * n)?);
                rank.compute("exchange", n as f64 * cost)?;
                let complete = Face::ALL
                    .iter()
                    .all(|&f| entry.filled[f.index()] || topo.neighbor(dest, f).is_none());
                if complete {
                    let done = pending.remove(&(dest, iter)).expect("present");
                    back.isend_to(rank, dest, &done.element)?;
                }
                Ok(())
            }),
        )?;
        faces.operate(rank)?;
    }
    if let Some((&(dest, iter), p)) = pending.iter().min_by_key(|(k, _)| **k) {
        let missing = Face::ALL
            .iter()
            .find(|&&f| !p.filled[f.index()] && topo.neighbor(dest, f).is_some())
            .expect("incomplete entry");
        return Err(Error::protocol(format!(
            "rank {dest} face {missing} iteration {iter} never arrived"
        )));
    }
    back.terminate(rank)?;
    drop(back);
    up.free(rank)?;
    down.free(rank)?;
    Ok(())
}

#[cfg(test)]
mod tests;
