use crate::error::{Error, Result};
use crate::runtime::EventTrace;

/// Measures `β` from a trace: the share of `op0` compute time spent before
/// the first compute record on any of `op1_ranks`.
///
/// Returns 1 when the consumer ranks never compute.
pub fn estimate_beta(trace: &EventTrace, op0: &str, op1_ranks: &[usize]) -> Result<f64> {
    let op0_records: Vec<_> = trace
        .records
        .iter()
        .filter(|r| r.tag.compute_op() == Some(op0))
        .collect();
    if op0_records.is_empty() {
        return Err(Error::invalid(format!("trace has no compute:{op0} records")));
    }
    let total: u64 = op0_records.iter().map(|r| r.duration().as_nanos()).sum();
    if total == 0 {
        return Err(Error::invalid(format!("compute:{op0} records have zero total duration")));
    }
    let first_consumer = trace
        .records
        .iter()
        .filter(|r| r.tag.is_compute() && op1_ranks.contains(&r.rank) && r.tag.compute_op() != Some(op0))
        .map(|r| r.start)
        .min();
    let Some(t1) = first_consumer else {
        return Ok(1.0);
    };
    let before: u64 = op0_records
        .iter()
        .map(|r| r.end.min(t1).saturating_sub(r.start).as_nanos())
        .sum();
    Ok((before as f64 / total as f64).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{SimTime, TraceRecord, TraceTag};

    fn rec(rank: usize, s: f64, e: f64, op: &str) -> TraceRecord {
        TraceRecord::new(rank, SimTime::from_micros(s), SimTime::from_micros(e), TraceTag::compute(op))
    }

    #[test]
    fn consumer_starting_at_thirty_percent() {
        // two producers each computing 0..100; consumer starts at 30
        let t = EventTrace::new(vec![rec(0, 0.0, 100.0, "op0"), rec(1, 0.0, 100.0, "op0"), rec(2, 30.0, 40.0, "op1")]);
        assert_eq!(estimate_beta(&t, "op0", &[2]).unwrap(), 0.3);
    }

    #[test]
    fn consumer_after_all_producers() {
        let t = EventTrace::new(vec![rec(0, 0.0, 50.0, "op0"), rec(1, 200.0, 250.0, "op1")]);
        assert_eq!(estimate_beta(&t, "op0", &[1]).unwrap(), 1.0);
        let t = EventTrace::new(vec![rec(0, 0.0, 50.0, "op0")]);
        assert_eq!(estimate_beta(&t, "op0", &[1]).unwrap(), 1.0);
    }

    #[test]
    fn missing_op0_is_an_error() {
        let t = EventTrace::new(vec![rec(1, 0.0, 5.0, "op1")]);
        assert!(estimate_beta(&t, "op0", &[1]).is_err());
    }

    #[test]
    fn planted_overlap_is_recovered() {
        // oracle: piecewise records with a known split point
        for planted in [0.0, 0.125, 0.5, 0.77, 1.0] {
            let total = 1000.0;
            let mut records = Vec::new();
            for step in 0..10 {
                let s = step as f64 * 100.0;
                records.push(rec(0, s, s + 100.0, "op0"));
            }
            records.push(rec(1, planted * total, planted * total + 1.0, "reduce"));
            let b = estimate_beta(&EventTrace::new(records), "op0", &[1]).unwrap();
            assert!((b - planted).abs() <= 1e-6, "{planted} vs {b}");
        }
    }
}
