use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::runtime::Rank;
use crate::stream::{operator, NoOperator, StreamChannel, StreamElementType};

use super::{IoVariant, Particle, ParticlesConfig, RECORD_BYTES};

pub const SCHEMA_VERSION: u32 = 1;
/// Serial resource standing for the file system.
const FILE_SYSTEM: u64 = 0xf5;
const HEADER_BYTES: usize = 8;

/// Result of writing the particle file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoReport {
    pub path: PathBuf,
    pub records: u64,
    /// Byte offset of every compute rank's block; collective variant only.
    pub offsets: Vec<u64>,
}

/// Contents of the `.meta` file next to a particle file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sidecar {
    pub schema_version: u32,
    pub record_bytes: usize,
    pub records: u64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn part_path(path: &Path, writer: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".part{writer}"));
    PathBuf::from(s)
}

pub fn write_sidecar(path: &Path, records: u64) -> Result<()> {
    let text = format!("schema_version={SCHEMA_VERSION}\nrecord_bytes={RECORD_BYTES}\nrecords={records}\n");
    fs::write(sidecar_path(path), text).map_err(|e| Error::io(0, e))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(sidecar_path(path)).map_err(|e| Error::io(0, e))?;
    let mut fields = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::protocol(format!("bad sidecar line `{line}`")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |k: &str| -> Result<u64> {
        fields
            .get(k)
            .ok_or_else(|| Error::protocol(format!("sidecar lacks `{k}`")))?
            .parse()
            .map_err(|e| Error::protocol(format!("sidecar `{k}`: {e}")))
    };
    Ok(Sidecar {
        schema_version: get("schema_version")? as u32,
        record_bytes: get("record_bytes")? as usize,
        records: get("records")?,
    })
}

/// Parses a particle file.
pub fn read_records(path: &Path) -> Result<Vec<Particle>> {
    let bytes = fs::read(path).map_err(|e| Error::io(0, e))?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::protocol(format!(
            "{} is {} bytes, not a multiple of {RECORD_BYTES}",
            path.display(),
            bytes.len()
        )));
    }
    bytes.chunks_exact(RECORD_BYTES).map(Particle::from_bytes).collect()
}

fn encode_records(particles: &[Particle]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(particles.len() * RECORD_BYTES);
    for p in particles {
        buf.extend_from_slice(&p.to_bytes());
    }
    buf
}

/// File handle with one cursor shared by all writers.
pub(super) struct SharedFile {
    file: Mutex<File>,
    written: AtomicU64,
}

/// Creates or truncates the output file before the ranks start.
pub(super) fn prepare(config: &ParticlesConfig) -> Result<Option<SharedFile>> {
    let Some(path) = config.output.as_deref() else { return Ok(None) };
    if config.io == IoVariant::None {
        return Ok(None);
    }
    let file = File::create(path).map_err(|e| Error::io(0, e))?;
    Ok((config.io == IoVariant::Shared).then(|| SharedFile {
        file: Mutex::new(file),
        written: AtomicU64::new(0),
    }))
}

fn write_cost(config: &ParticlesConfig, bytes: usize) -> f64 {
    config.costs.io_call + bytes as f64 * config.costs.io_per_byte
}

/// Compute-rank part of writing the final state.
pub(super) fn write_compute_side(
    rank: &mut Rank<'_>,
    config: &ParticlesConfig,
    shared: Option<&SharedFile>,
    particles: &[Particle],
) -> Result<Option<IoReport>> {
    let path = match config.output.as_deref() {
        Some(p) if config.io != IoVariant::None => p,
        _ => return Ok(None),
    };
    let members = rank.layout().members("compute")?.to_vec();
    match config.io {
        IoVariant::None => Ok(None),
        IoVariant::Shared => {
            let shared = shared.expect("prepared for the shared variant");
            let buf = encode_records(particles);
            rank.serial_io(FILE_SYSTEM, write_cost(config, buf.len()), || {
                let mut f = shared.file.lock().unwrap_or_else(|e| e.into_inner());
                f.write_all(&buf)
                    .map_err(|e| Error::io(shared.written.load(Ordering::SeqCst), e))?;
                shared.written.fetch_add(buf.len() as u64, Ordering::SeqCst);
                Ok(())
            })?;
            let total = rank.allreduce_sum_u64(&members, particles.len() as u64)?;
            if rank.id() != members[0] {
                return Ok(None);
            }
            write_sidecar(path, total)?;
            Ok(Some(IoReport {
                path: path.to_path_buf(),
                records: total,
                offsets: Vec::new(),
            }))
        }
        IoVariant::Collective => {
            let counts = rank.allgatherv(&members, (particles.len() as u64).to_le_bytes().to_vec())?;
            let counts: Vec<u64> = counts
                .iter()
                .map(|c| c.as_slice().try_into().map(u64::from_le_bytes))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::protocol("malformed particle count"))?;
            let mut offsets = Vec::with_capacity(counts.len());
            let mut acc = 0;
            for c in &counts {
                offsets.push(acc);
                acc += c * RECORD_BYTES as u64;
            }
            let me = rank.layout().index_in_group(rank.id()).expect("member");
            let buf = encode_records(particles);
            rank.serial_io(FILE_SYSTEM, write_cost(config, buf.len()), || {
                let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(0, e))?;
                f.write_all_at(&buf, offsets[me]).map_err(|e| Error::io(0, e))
            })?;
            rank.barrier(&members)?;
            if me != 0 {
                return Ok(None);
            }
            let total = counts.iter().sum();
            write_sidecar(path, total)?;
            Ok(Some(IoReport {
                path: path.to_path_buf(),
                records: total,
                offsets,
            }))
        }
        IoVariant::Decoupled => {
            let ty = StreamElementType::new("particle-records", element_bytes(config.batch_particles))?;
            ty.register(rank)?;
            let mut ch = StreamChannel::create(rank, "compute", "io")?;
            let mut s = ch.attach(rank, &ty, NoOperator)?;
            for chunk in particles.chunks(config.batch_particles) {
                rank.compute("pack", chunk.len() as f64 * config.costs.route_per_particle)?;
                let mut e = Vec::with_capacity(element_bytes(config.batch_particles));
                e.extend_from_slice(&(chunk.len() as u32).to_le_bytes());
                e.resize(HEADER_BYTES, 0);
                e.extend_from_slice(&encode_records(chunk));
                e.resize(element_bytes(config.batch_particles), 0);
                s.isend(rank, &e)?;
            }
            s.terminate(rank)?;
            drop(s);
            ch.free(rank)?;
            Ok(None)
        }
    }
}

fn element_bytes(batch: usize) -> usize {
    HEADER_BYTES + batch * RECORD_BYTES
}

/// Writer-group rank: buffers arriving records, flushes them to its own part
/// file, and the first writer concatenates the parts at the end.
pub(super) fn writer_rank(rank: &mut Rank<'_>, config: &ParticlesConfig) -> Result<Option<IoReport>> {
    let path = config.output.as_deref().expect("validated");
    let members = rank.layout().members("io")?.to_vec();
    let me = rank.layout().index_in_group(rank.id()).expect("member");
    let part = part_path(path, me);
    let file = File::create(&part).map_err(|e| Error::io(0, e))?;
    let budget = config.writer_buffer_bytes.max(RECORD_BYTES);
    let ty = StreamElementType::new("particle-records", element_bytes(config.batch_particles))?;
    ty.register(rank)?;
    let mut ch = StreamChannel::create(rank, "compute", "io")?;
    let mut buf: Vec<u8> = Vec::with_capacity(budget.min(64 << 20));
    let mut written = 0u64;
    let mut flush = |rank: &mut Rank<'_>, buf: &mut Vec<u8>| -> Result<()> {
        if buf.is_empty() {
            return Ok(());
        }
        rank.serial_io(FILE_SYSTEM, write_cost(config, buf.len()), || {
            (&file).write_all(buf).map_err(|e| Error::io(written, e))
        })?;
        written += buf.len() as u64;
        buf.clear();
        Ok(())
    };
    {
        let buf = &mut buf;
        let flush = &mut flush;
        let mut s = ch.attach(
            rank,
            &ty,
            operator(move |rank, src, e| {
                let n = u32::from_le_bytes(e[..4].try_into().expect("4 bytes")) as usize;
                if n > config.batch_particles {
                    return Err(Error::protocol(format!("rank {src} sent {n} records in one element")));
                }
                buf.extend_from_slice(&e[HEADER_BYTES..HEADER_BYTES + n * RECORD_BYTES]);
                if buf.len() >= budget {
                    flush(rank, buf)?;
                }
                Ok(())
            }),
        )?;
        s.operate(rank)?;
    }
    flush(rank, &mut buf)?;
    ch.free(rank)?;
    rank.barrier(&members)?;
    if me != 0 {
        return Ok(None);
    }
    let mut out = OpenOptions::new().write(true).truncate(true).open(path).map_err(|e| Error::io(0, e))?;
    let mut total = 0u64;
    for w in 0..members.len() {
        let p = part_path(path, w);
        let bytes = fs::read(&p).map_err(|e| Error::io(total, e))?;
        rank.serial_io(FILE_SYSTEM, write_cost(config, bytes.len()), || {
            out.write_all(&bytes).map_err(|e| Error::io(total, e))
        })?;
        total += bytes.len() as u64;
        fs::remove_file(&p).map_err(|e| Error::io(total, e))?;
    }
    let records = total / RECORD_BYTES as u64;
    write_sidecar(path, records)?;
    Ok(Some(IoReport {
        path: path.to_path_buf(),
        records,
        offsets: Vec::new(),
    }))
}
