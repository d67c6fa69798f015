//! Workload monitoring example: compute ranks stream one record per step
//! with their workload, and a single analysis rank keeps
//! the min, max and median of every step.

use std::collections::BTreeMap;
use std::io::{self, Write};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::layout::GroupLayout;
use crate::runtime::{run, EventTrace, SimConfig, SimTime};
use crate::stream::{operator, NoOperator, StreamChannel, StreamElementType};

const RECORD_BYTES: usize = 20;

/// Where per-rank workloads come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WorkloadSource {
    Constant(f64),
    /// Uniform in `[lo, hi)`, fixed by `(seed, rank, step)`.
    Uniform { seed: u64, lo: f64, hi: f64 },
}

impl WorkloadSource {
    pub fn value(&self, rank: usize, step: usize) -> f64 {
        match *self {
            WorkloadSource::Constant(v) => v,
            WorkloadSource::Uniform { seed, lo, hi } => {
                let mut z = seed ^ ((rank as u64) << 32) ^ step as u64;
                z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
                z ^= z >> 31;
                lo + (hi - lo) * (z >> 11) as f64 / (1u64 << 53) as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

/// Statistics of one batch; the median of an even count averages the two
/// middle values. `None` for an empty batch.
pub fn min_max_median(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    Some((v[0], v[n - 1], median))
}

pub fn write_stats(stats: &[StepStats], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "step,min,max,median")?;
    for s in stats {
        writeln!(out, "{},{},{},{}", s.step, s.min, s.max, s.median)?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct WorkloadRun {
    pub stats: Vec<StepStats>,
    pub makespan: SimTime,
    pub trace: EventTrace,
}

/// Runs `steps` steps on `P - 1` compute ranks plus one analysis rank.
pub fn example_workload_analysis(steps: usize, source: WorkloadSource, sim: &SimConfig) -> Result<WorkloadRun> {
    let p = sim.total_ranks;
    let n_compute = p.checked_sub(1).filter(|&n| n > 0).ok_or_else(|| Error::invalid("need at least two ranks"))?;
    let layout = GroupLayout::contiguous(&[("calc", n_compute), ("analysis", 1)])?
        .with_op("calculation", "calc")?
        .with_op("min_max_median", "analysis")?;
    let out = run(&layout, sim, |rank| {
        let ty = StreamElementType::new("workload-record", RECORD_BYTES)?;
        ty.register(rank)?;
        let mut ch = StreamChannel::create(rank, "calc", "analysis")?;
        let mut stats = Vec::new();
        if rank.is_member("calc") {
            let me = rank.layout().index_in_group(rank.id()).expect("member");
            let mut s = ch.attach(rank, &ty, NoOperator)?;
            for step in 0..steps {
                let w = source.value(me, step);
                rank.compute("calculation", w)?;
                let mut wr = Writer::new();
                wr.u64(step as u64).u32(me as u32).f64(w);
                s.isend(rank, &wr.finish())?;
            }
            s.terminate(rank)?;
        } else {
            let mut pending: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let stats_ref = &mut stats;
            let mut s = ch.attach(
                rank,
                &ty,
                operator(|rank, src, e| {
                    let mut r = Reader::new(e);
                    let step = r.u64()? as usize;
                    let _who = r.u32()?;
                    let w = r.f64()?;
                    if step >= steps {
                        return Err(Error::protocol(format!("rank {src} reported step {step} of {steps}")));
                    }
                    let batch = pending.entry(step).or_default();
                    batch.push(w);
                    if batch.len() == n_compute {
                        let batch = pending.remove(&step).expect("present");
                        rank.compute("min_max_median", 0.01 * batch.len() as f64)?;
                        let (min, max, median) = min_max_median(&batch).expect("non-empty");
                        stats_ref.push(StepStats { step, min, max, median });
                    }
                    Ok(())
                }),
            )?;
            s.operate(rank)?;
            drop(s);
            if let Some((&step, b)) = pending.iter().next() {
                return Err(Error::protocol(format!("step {step} got {} of {n_compute} records", b.len())));
            }
            stats.sort_by_key(|s| s.step);
        }
        ch.free(rank)?;
        Ok(stats)
    })?;
    let makespan = out.makespan();
    let stats = out.results.into_iter().last().unwrap_or_default();
    Ok(WorkloadRun {
        stats,
        makespan,
        trace: out.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_workload() {
        let r = example_workload_analysis(3, WorkloadSource::Constant(5.0), &SimConfig::new(6)).unwrap();
        assert_eq!(r.stats.len(), 3);
        for (i, s) in r.stats.iter().enumerate() {
            assert_eq!((s.step, s.min, s.max, s.median), (i, 5.0, 5.0, 5.0));
        }
    }

    #[test]
    fn small_batches() {
        assert_eq!(min_max_median(&[3.0, 1.0, 2.0]), Some((1.0, 3.0, 2.0)));
        assert_eq!(min_max_median(&[4.0, 1.0, 2.0, 3.0]), Some((1.0, 4.0, 2.5)));
        assert_eq!(min_max_median(&[]), None);
    }

    #[test]
    fn random_workloads_match_offline_sort() {
        let src = WorkloadSource::Uniform { seed: 11, lo: 1.0, hi: 50.0 };
        let r = example_workload_analysis(7, src, &SimConfig::new(9)).unwrap();
        for s in &r.stats {
            // oracle: sort the planted values directly
            let mut v: Vec<f64> = (0..8).map(|k| src.value(k, s.step)).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(s.min, v[0]);
            assert_eq!(s.max, v[7]);
            assert!((s.median - (v[3] + v[4]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_output() {
        let mut out = Vec::new();
        write_stats(&[StepStats { step: 0, min: 1.0, max: 3.0, median: 2.0 }], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,min,max,median\n0,1,3,2\n");
    }
}
