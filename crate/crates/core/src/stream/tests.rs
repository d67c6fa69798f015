use super::*;
use crate::layout::GroupLayout;
use crate::runtime::{run, SimConfig, SimTime, TraceTag};

fn ab(producers: usize, consumers: usize) -> GroupLayout {
    GroupLayout::contiguous(&[("a", producers), ("b", consumers)]).unwrap()
}

fn cfg(p: usize) -> SimConfig {
    SimConfig::new(p).with_latency(1.0)
}

fn elem(bytes: usize) -> StreamElementType {
    StreamElementType::new("u64", bytes).unwrap()
}

type Log = Vec<(usize, u64)>;

fn logger() -> impl FnMut(&mut Rank<'_>, usize, &[u8]) -> Result<()> {
    operator(|_, _, _| Ok(()))
}

/// Producers send `counts[i]` elements holding their sequence numbers;
/// consumers return the (producer, value) log in processing order.
fn loopback(layout: &GroupLayout, config: &SimConfig, counts: &[u64]) -> Result<Vec<Log>> {
    let out = run(layout, config, |rank| {
        let ty = elem(8);
        ty.register(rank)?;
        let mut ch = StreamChannel::create(rank, "a", "b")?;
        let mut log = Vec::new();
        let mut s = ch.attach(
            rank,
            &ty,
            operator(|_, src, e| {
                log.push((src, u64::from_le_bytes(e.try_into().unwrap())));
                Ok(())
            }),
        )?;
        if s.is_producer() {
            let me = rank.id();
            for i in 0..counts[me] {
                rank.compute("produce", 1.0 + me as f64)?;
                s.isend(rank, &i.to_le_bytes())?;
            }
            s.terminate(rank)?;
        } else {
            let summary = s.operate(rank)?;
            assert!(summary.terminated);
        }
        drop(s);
        ch.free(rank)?;
        Ok(log)
    })?;
    Ok(out.results)
}

#[test]
fn thousand_elements_arrive_in_order() {
    let layout = ab(4, 1);
    let logs = loopback(&layout, &cfg(5), &[0, 0, 0, 1000]).unwrap();
    let seqs: Vec<u64> = logs[4].iter().map(|&(src, v)| {
        assert_eq!(src, 3);
        v
    }).collect();
    assert_eq!(seqs, (0..1000).collect::<Vec<_>>());
}

#[test]
fn two_producers_three_each() {
    let logs = loopback(&ab(2, 1), &cfg(3), &[3, 3]).unwrap();
    assert_eq!(logs[2].len(), 6);
    let logs = loopback(&ab(2, 1), &cfg(3), &[0, 0]).unwrap();
    assert!(logs[2].is_empty());
}

#[test]
fn default_mapping_spreads_producers_over_consumers() {
    let logs = loopback(&ab(4, 2), &cfg(6), &[5, 5, 5, 5]).unwrap();
    let from = |c: usize| {
        let mut s: Vec<usize> = logs[c].iter().map(|x| x.0).collect();
        s.dedup();
        s.sort();
        s.dedup();
        s
    };
    assert_eq!(from(4), vec![0, 2]);
    assert_eq!(from(5), vec![1, 3]);
}

#[test]
fn delayed_producer_is_processed_last() {
    let layout = ab(3, 1);
    let out = run(&layout, &cfg(4), |rank| {
        let ty = elem(8);
        ty.register(rank)?;
        let ch = StreamChannel::create(rank, "a", "b")?;
        let mut order = Vec::new();
        let mut s = ch.attach(rank, &ty, operator(|r, src, _| {
            r.compute("consume", 0.5)?;
            order.push(src);
            Ok(())
        }))?;
        if s.is_producer() {
            if rank.id() == 1 {
                rank.compute("delay", 1000.0)?;
            }
            for i in 0..10u64 {
                s.isend(rank, &i.to_le_bytes())?;
            }
            s.terminate(rank)?;
        } else {
            s.operate(rank)?;
        }
        drop(s);
        Ok(order)
    })
    .unwrap();
    let order = &out.results[3];
    assert_eq!(order.len(), 30);
    assert!(order[..20].iter().all(|&s| s != 1), "{order:?}");
    assert!(order[20..].iter().all(|&s| s == 1));
    // the trace agrees: consumer records for rank 1's data start after the delay
    let consume: Vec<SimTime> = out
        .trace
        .for_rank(3)
        .filter(|r| r.tag.compute_op() == Some("consume"))
        .map(|r| r.start)
        .collect();
    assert!(consume[19] < SimTime::from_micros(1000.0));
    assert!(consume[20] >= SimTime::from_micros(1000.0));
}

#[test]
fn quorum_and_local_termination() {
    let layout = ab(2, 1);
    let out = run(&layout, &cfg(3), |rank| {
        let ty = elem(8);
        ty.register(rank)?;
        let ch = StreamChannel::create(rank, "a", "b")?;
        let mut s = ch.attach(rank, &ty, logger())?;
        let mut observed = Vec::new();
        match rank.id() {
            0 => {
                s.isend(rank, &[0; 8])?;
                s.terminate(rank)?;
                assert!(matches!(s.isend(rank, &[0; 8]), Err(Error::Usage(_))));
                assert!(matches!(s.terminate(rank), Err(Error::Usage(_))));
                rank.send(2, Tag::User(0), vec![])?;
            }
            1 => {
                rank.recv(Tag::User(1), Some(2))?;
                s.terminate(rank)?;
            }
            _ => {
                rank.recv(Tag::User(0), Some(0))?;
                let first = s.operate_poll(rank)?;
                observed.push(first);
                assert_eq!(s.state(), StreamState::Open);
                rank.send(1, Tag::User(1), vec![])?;
                observed.push(s.operate(rank)?);
                assert_eq!(s.state(), StreamState::FullyTerminated);
                observed.push(s.operate_poll(rank)?);
            }
        }
        Ok(observed)
    })
    .unwrap();
    let o = &out.results[2];
    assert_eq!(o[0], OperateSummary { elements_processed: 1, terminated: false });
    assert_eq!(o[1], OperateSummary { elements_processed: 0, terminated: true });
    assert_eq!(o[2], OperateSummary { elements_processed: 0, terminated: true });
}

#[test]
fn operate_some_returns_batches() {
    let out = run(&ab(1, 1), &cfg(2), |rank| {
        let ty = elem(8);
        ty.register(rank)?;
        let ch = StreamChannel::create(rank, "a", "b")?;
        let mut s = ch.attach(rank, &ty, logger())?;
        let mut total = 0;
        if s.is_producer() {
            for _ in 0..5 {
                s.isend(rank, &[1; 8])?;
                rank.compute("gap", 10.0)?;
            }
            s.terminate(rank)?;
        } else {
            loop {
                let r = s.operate_some(rank)?;
                total += r.elements_processed;
                if r.terminated {
                    break;
                }
                assert!(r.elements_processed > 0);
            }
        }
        Ok(total)
    })
    .unwrap();
    assert_eq!(out.results[1], 5);
}

#[test]
fn usage_errors() {
    let layout = GroupLayout::contiguous(&[("a", 1), ("b", 1), ("c", 1)]).unwrap();
    run(&layout, &cfg(3), |rank| {
        assert!(matches!(StreamChannel::create(rank, "a", "a"), Err(Error::Usage(_))));
        assert!(StreamChannel::create(rank, "a", "nope").is_err());
        if rank.id() == 2 {
            assert!(matches!(StreamChannel::create(rank, "a", "b"), Err(Error::Usage(_))));
            return Ok(());
        }
        let ty = elem(8);
        assert!(matches!(StreamElementType::new("x", 0), Err(Error::InvalidParams(_))));
        let mut ch = StreamChannel::create(rank, "a", "b")?;
        let unregistered = StreamElementType::new(format!("unregistered-{}", rank.id()), 8)?;
        assert!(matches!(ch.attach(rank, &unregistered, NoOperator), Err(Error::Usage(_))));
        ty.register(rank)?;
        assert!(matches!(elem(16).register(rank), Err(Error::Usage(_))));
        let mut s1 = ch.attach(rank, &ty, logger())?;
        let mut s2 = ch.attach(rank, &ty, logger())?;
        assert_ne!(s1.stream_id(), s2.stream_id());
        if s1.is_producer() {
            assert!(matches!(s1.isend(rank, &[0; 4]), Err(Error::Usage(_))));
            assert!(matches!(s1.operate(rank), Err(Error::Usage(_))));
            s1.terminate(rank)?;
            assert!(matches!(ch.free(rank), Err(Error::Usage(_))));
            s2.terminate(rank)?;
        } else {
            assert!(matches!(s1.isend(rank, &[0; 8]), Err(Error::Usage(_))));
            assert!(matches!(s1.terminate(rank), Err(Error::Usage(_))));
            s1.operate(rank)?;
            assert!(matches!(ch.free(rank), Err(Error::Usage(_))));
            s2.operate(rank)?;
        }
        ch.free(rank)?;
        assert!(matches!(ch.free(rank), Err(Error::Usage(_))));
        assert!(matches!(ch.attach(rank, &ty, logger()), Err(Error::Usage(_))));
        Ok(())
    })
    .unwrap();
}

#[test]
fn mismatched_attach_is_a_protocol_error() {
    let err = run(&ab(1, 1), &cfg(2), |rank| {
        let ty = if rank.id() == 0 {
            StreamElementType::new("p", 8)?
        } else {
            StreamElementType::new("q", 16)?
        };
        ty.register(rank)?;
        let ch = StreamChannel::create(rank, "a", "b")?;
        ch.attach(rank, &ty, logger())?;
        Ok(())
    })
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("attached as"), "{msg}");
}

#[test]
fn unterminated_stream_deadlocks_consumer() {
    let err = run(&ab(1, 1), &cfg(2), |rank| {
        let ty = elem(8);
        ty.register(rank)?;
        let ch = StreamChannel::create(rank, "a", "b")?;
        let mut s = ch.attach(rank, &ty, logger())?;
        if !s.is_producer() {
            s.operate(rank)?;
        }
        Ok(())
    })
    .unwrap_err();
    match err {
        Error::Deadlock { blocked } => assert_eq!(blocked[0].rank, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn window_bounds_consumer_backlog() {
    for window in [1, 4, 16] {
        let config = cfg(3).with_window(window);
        let out = run(&ab(2, 1), &config, |rank| {
            let ty = elem(32);
            ty.register(rank)?;
            let ch = StreamChannel::create(rank, "a", "b")?;
            let mut s = ch.attach(rank, &ty, operator(|r, _, _| r.compute("slow", 50.0).map(|_| ())))?;
            if s.is_producer() {
                for _ in 0..200 {
                    s.isend(rank, &[7; 32])?;
                }
                s.terminate(rank)?;
            } else {
                s.operate(rank)?;
            }
            Ok(())
        })
        .unwrap();
        // at most `window` elements plus the payload-free terminate marker
        assert!(out.stats.max_stream_backlog <= window + 1, "{window}: {:?}", out.stats);
        assert!(out.stats.max_stream_backlog >= 1);
        // producers stall on credit and the stall is visible as idle time
        let s = out.trace.summary().unwrap();
        assert!(s.per_rank[0].idle > SimTime::ZERO);
    }
}

struct Sum(u64);

impl Operator for Sum {
    fn apply(&mut self, _: &mut Rank<'_>, _: usize, e: &[u8]) -> Result<()> {
        self.0 += u64::from_le_bytes(e.try_into().unwrap());
        Ok(())
    }
}

#[test]
fn consumer_operator_state_is_retrievable() {
    let out = run(&ab(3, 1), &cfg(4), |rank| {
        let ty = elem(8);
        ty.register(rank)?;
        let ch = StreamChannel::create(rank, "a", "b")?;
        let mut s = ch.attach(rank, &ty, Sum(0))?;
        if s.is_producer() {
            s.isend(rank, &(rank.id() as u64 + 1).to_le_bytes())?;
            s.terminate(rank)?;
        } else {
            assert_eq!(s.operate(rank)?.elements_processed, 3);
            assert_eq!(s.operator().0, 6);
        }
        Ok(s.into_operator().0)
    })
    .unwrap();
    assert_eq!(out.results, vec![0, 0, 0, 6]);
}

#[test]
fn stream_records_appear_in_trace() {
    let out = run(&ab(1, 1), &cfg(2), |rank| {
        let ty = elem(8);
        ty.register(rank)?;
        let ch = StreamChannel::create(rank, "a", "b")?;
        let mut s = ch.attach(rank, &ty, logger())?;
        if s.is_producer() {
            s.isend(rank, &[0; 8])?;
            s.terminate(rank)?;
        } else {
            s.operate(rank)?;
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(out.trace.for_rank(0).filter(|r| r.tag == TraceTag::Send).count(), 2);
    assert_eq!(out.trace.for_rank(1).filter(|r| r.tag == TraceTag::Recv).count(), 2);
}
