//! Per-rank event records, summaries and CSV export.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use super::config::SimTime;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TraceTag {
    Compute(Arc<str>),
    Send,
    Recv,
    Idle,
    Io,
}

impl TraceTag {
    pub fn compute(op: &str) -> Self {
        TraceTag::Compute(Arc::from(op))
    }

    pub fn is_compute(&self) -> bool {
        matches!(self, TraceTag::Compute(_))
    }

    pub fn compute_op(&self) -> Option<&str> {
        match self {
            TraceTag::Compute(op) => Some(op),
            _ => None,
        }
    }
}

impl fmt::Display for TraceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceTag::Compute(op) => write!(f, "compute:{op}"),
            TraceTag::Send => f.write_str("send"),
            TraceTag::Recv => f.write_str("recv"),
            TraceTag::Idle => f.write_str("idle"),
            TraceTag::Io => f.write_str("io"),
        }
    }
}

impl FromStr for TraceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "send" => TraceTag::Send,
            "recv" => TraceTag::Recv,
            "idle" => TraceTag::Idle,
            "io" => TraceTag::Io,
            _ => match s.strip_prefix("compute:") {
                Some(op) => TraceTag::compute(op),
                None => return Err(Error::MalformedTrace(format!("unknown tag `{s}`"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub rank: usize,
    pub start: SimTime,
    pub end: SimTime,
    pub tag: TraceTag,
}

impl TraceRecord {
    pub fn new(rank: usize, start: SimTime, end: SimTime, tag: TraceTag) -> Self {
        TraceRecord { rank, start, end, tag }
    }

    pub fn duration(&self) -> SimTime {
        self.end - self.start
    }
}

/// Timestamped records from every rank of one run, grouped by rank and
/// time-ordered within each rank.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTrace {
    pub records: Vec<TraceRecord>,
}

/// Time a rank spent in each kind of activity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RankTotals {
    pub compute: SimTime,
    pub idle: SimTime,
    pub send: SimTime,
    pub recv: SimTime,
    pub io: SimTime,
    /// End of the rank's last record.
    pub end: SimTime,
}

impl RankTotals {
    pub fn busy(&self) -> SimTime {
        self.compute + self.idle + self.send + self.recv + self.io
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceSummary {
    pub per_rank: Vec<RankTotals>,
    pub makespan: SimTime,
}

impl TraceSummary {
    /// Sum of every rank's totals.
    pub fn total(&self) -> RankTotals {
        self.per_rank.iter().fold(RankTotals::default(), |mut acc, t| {
            acc.compute += t.compute;
            acc.idle += t.idle;
            acc.send += t.send;
            acc.recv += t.recv;
            acc.io += t.io;
            acc.end = acc.end.max(t.end);
            acc
        })
    }
}

impl EventTrace {
    pub fn new(records: Vec<TraceRecord>) -> Self {
        EventTrace { records }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn ranks(&self) -> usize {
        self.records.iter().map(|r| r.rank + 1).max().unwrap_or(0)
    }

    pub fn for_rank(&self, rank: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.rank == rank)
    }

    /// Checks that `t_end >= t_start` and that each rank's records are
    /// time-ordered and do not overlap.
    pub fn validate(&self) -> Result<()> {
        let mut last_end: Vec<Option<SimTime>> = Vec::new();
        for (i, rec) in self.records.iter().enumerate() {
            if rec.end < rec.start {
                return Err(Error::MalformedTrace(format!("record {i} ends before it starts")));
            }
            if last_end.len() <= rec.rank {
                last_end.resize(rec.rank + 1, None);
            }
            if let Some(prev) = last_end[rec.rank] {
                if rec.start < prev {
                    return Err(Error::MalformedTrace(format!(
                        "record {i} on rank {} starts at {} before the previous record ends at {}",
                        rec.rank, rec.start, prev
                    )));
                }
            }
            last_end[rec.rank] = Some(rec.end);
        }
        Ok(())
    }

    /// Per-rank activity totals and the makespan (latest record end).
    pub fn summary(&self) -> Result<TraceSummary> {
        self.validate()?;
        let mut per_rank = vec![RankTotals::default(); self.ranks()];
        for rec in &self.records {
            let t = &mut per_rank[rec.rank];
            let d = rec.duration();
            match rec.tag {
                TraceTag::Compute(_) => t.compute += d,
                TraceTag::Idle => t.idle += d,
                TraceTag::Send => t.send += d,
                TraceTag::Recv => t.recv += d,
                TraceTag::Io => t.io += d,
            }
            t.end = t.end.max(rec.end);
        }
        let makespan = per_rank.iter().map(|t| t.end).max().unwrap_or(SimTime::ZERO);
        Ok(TraceSummary { per_rank, makespan })
    }

    /// Total time covered by compute records with the given op name.
    pub fn compute_time(&self, op: &str) -> SimTime {
        self.records
            .iter()
            .filter(|r| r.tag.compute_op() == Some(op))
            .fold(SimTime::ZERO, |acc, r| acc + r.duration())
    }

    /// Writes `rank,t_start,t_end,tag` rows in integer microseconds, sorted
    /// lexicographically by (rank, t_start, t_end, tag).
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut rows: Vec<(usize, u64, u64, String)> = self
            .records
            .iter()
            .map(|r| (r.rank, r.start.as_nanos() / 1000, r.end.as_nanos() / 1000, r.tag.to_string()))
            .collect();
        rows.sort();
        writeln!(out, "rank,t_start,t_end,tag")?;
        for (rank, s, e, tag) in rows {
            writeln!(out, "{rank},{s},{e},{tag}")?;
        }
        Ok(())
    }

    /// Writes the Gantt-style CSV to `path`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Parses the CSV produced by [`EventTrace::write_csv`].
    pub fn read_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("rank,t_start,t_end,tag") => {}
            other => return Err(Error::MalformedTrace(format!("bad header {other:?}"))),
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let mut f = line.splitn(4, ',');
            let mut next = || f.next().ok_or_else(|| Error::MalformedTrace(format!("short row {}", i + 2)));
            let parse = |s: &str| {
                s.parse::<u64>()
                    .map_err(|e| Error::MalformedTrace(format!("row {}: {e}", i + 2)))
            };
            let rank = parse(next()?)? as usize;
            let start = SimTime::from_nanos(parse(next()?)? * 1000);
            let end = SimTime::from_nanos(parse(next()?)? * 1000);
            let tag = next()?.parse()?;
            records.push(TraceRecord { rank, start, end, tag });
        }
        Ok(EventTrace { records })
    }
}

/// Length of the intersection of two sets of intervals.
pub fn overlap(a: &[(SimTime, SimTime)], b: &[(SimTime, SimTime)]) -> SimTime {
    let merge = |xs: &[(SimTime, SimTime)]| {
        let mut v: Vec<_> = xs.iter().copied().filter(|(s, e)| e > s).collect();
        v.sort();
        let mut out: Vec<(SimTime, SimTime)> = Vec::new();
        for (s, e) in v {
            match out.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => out.push((s, e)),
            }
        }
        out
    };
    let (a, b) = (merge(a), merge(b));
    let (mut i, mut j, mut total) = (0, 0, 0u64);
    while i < a.len() && j < b.len() {
        let s = a[i].0.max(b[j].0);
        let e = a[i].1.min(b[j].1);
        if e > s {
            total += (e - s).as_nanos();
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    SimTime::from_nanos(total)
}
