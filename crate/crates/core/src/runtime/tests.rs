use super::*;

fn layout(p: usize) -> GroupLayout {
    GroupLayout::single(p, "all").unwrap()
}

fn us(x: f64) -> SimTime {
    SimTime::from_micros(x)
}

#[test]
fn ping_pong_alternates_send_and_recv() {
    let cfg = SimConfig::new(2).with_latency(1.0).with_send_overhead(0.5);
    let out = run(&layout(2), &cfg, |rank| {
        let peer = 1 - rank.id();
        for i in 0..3u64 {
            if rank.id() == 0 {
                rank.send(peer, Tag::User(i), vec![i as u8])?;
                let m = rank.recv(Tag::User(i), Some(peer))?;
                assert_eq!(m.body, vec![i as u8 + 1]);
            } else {
                let m = rank.recv(Tag::User(i), Some(peer))?;
                rank.send(peer, Tag::User(i), vec![m.body[0] + 1])?;
            }
        }
        Ok(())
    })
    .unwrap();
    for r in 0..2 {
        let tags: Vec<String> = out
            .trace
            .for_rank(r)
            .filter(|t| matches!(t.tag, TraceTag::Send | TraceTag::Recv))
            .map(|t| t.tag.to_string())
            .collect();
        let expected: Vec<&str> = if r == 0 {
            ["send", "recv"].repeat(3)
        } else {
            ["recv", "send"].repeat(3)
        };
        assert_eq!(tags, expected);
    }
    // each round trip costs two overheads plus two latencies
    assert_eq!(out.makespan(), us(3.0 * 3.0));
    out.trace.validate().unwrap();
}

#[test]
fn blocked_receiver_reports_deadlock() {
    let cfg = SimConfig::new(2);
    let err = run(&layout(2), &cfg, |rank| {
        if rank.id() == 0 {
            rank.recv(Tag::User(9), None)?;
        }
        Ok(())
    })
    .unwrap_err();
    match err {
        Error::Deadlock { blocked } => {
            assert_eq!(blocked.len(), 1);
            assert_eq!(blocked[0].rank, 0);
        }
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn failing_rank_aborts_run() {
    let cfg = SimConfig::new(3);
    let err = run(&layout(3), &cfg, |rank| {
        if rank.id() == 2 {
            return Err(Error::usage("boom"));
        }
        rank.recv(Tag::User(0), None)?;
        Ok(())
    })
    .unwrap_err();
    assert!(matches!(err, Error::RankFailed { rank: 2, .. }), "{err:?}");

    let err = run(&layout(2), &cfg.clone().with_trace(false), |rank| {
        if rank.id() == 1 {
            panic!("rank one exploded");
        }
        Ok(())
    });
    // a 3-rank config against a 2-rank layout is rejected before running
    assert!(matches!(err, Err(Error::InvalidParams(_))));
    let err = run(&layout(2), &SimConfig::new(2), |rank| {
        if rank.id() == 1 {
            panic!("rank one exploded");
        }
        Ok(())
    })
    .unwrap_err();
    match err {
        Error::RankFailed { rank, message } => {
            assert_eq!(rank, 1);
            assert!(message.contains("exploded"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn undelivered_messages_are_reported() {
    let err = run(&layout(2), &SimConfig::new(2), |rank| {
        if rank.id() == 0 {
            rank.send(1, Tag::User(1), vec![1])?;
        }
        Ok(())
    })
    .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

fn noisy_program(rank: &mut Rank<'_>) -> Result<f64> {
    let members: Vec<usize> = (0..rank.size()).collect();
    let mut acc = 0.0;
    for i in 0..20 {
        acc += rank.compute("step", 10.0 + rank.id() as f64)?;
        let dest = (rank.id() + 1) % rank.size();
        let src = (rank.id() + rank.size() - 1) % rank.size();
        rank.send(dest, Tag::User(i), vec![0; 64])?;
        rank.recv(Tag::User(i), Some(src))?;
        acc = rank.allreduce_sum_f64(&members, acc)?;
    }
    Ok(acc)
}

#[test]
fn virtual_time_runs_are_bit_identical() {
    let cfg = SimConfig::new(5)
        .with_noise(NoiseSpec::Normal { mean: 0.3, cv: 0.5 })
        .with_seed(42)
        .with_latency(2.0)
        .with_byte_cost(0.01);
    let a = run(&layout(5), &cfg, noisy_program).unwrap();
    let b = run(&layout(5), &cfg, noisy_program).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.finish_times, b.finish_times);
    assert_eq!(
        a.results.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.results.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    let c = run(&layout(5), &cfg.clone().with_seed(43), noisy_program).unwrap();
    assert_ne!(a.finish_times, c.finish_times);
}

#[test]
fn noiseless_runs_ignore_seed() {
    let cfg = SimConfig::new(4).with_latency(1.0);
    let a = run(&layout(4), &cfg.clone().with_seed(1), noisy_program).unwrap();
    let b = run(&layout(4), &cfg.with_seed(999), noisy_program).unwrap();
    assert_eq!(a.trace, b.trace);
}

#[test]
fn simulate_work_identity_and_degenerate_noise() {
    let out = run(&layout(2), &SimConfig::new(2), |rank| rank.simulate_work(5.0)).unwrap();
    assert_eq!(out.results, vec![5.0, 5.0]);
    let cfg = SimConfig::new(2).with_noise(NoiseSpec::Uniform { lo: 0.0, hi: 0.0 });
    let out = run(&layout(2), &cfg, |rank| rank.simulate_work(7.0)).unwrap();
    assert_eq!(out.results, vec![7.0, 7.0]);
    let err = run(&layout(2), &SimConfig::new(2), |rank| rank.simulate_work(-1.0)).unwrap_err();
    assert!(matches!(err, Error::RankFailed { .. }));
}

#[test]
fn exponential_noise_mean_matches_distribution() {
    // oracle: the same distribution sampled directly; E[1 + Exp(mean 0.5)] = 1.5
    use rand::SeedableRng;
    let noise = NoiseSpec::Exponential { mean: 0.5 };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let direct: f64 = (0..10_000).map(|_| 1.0 + noise.sample(&mut rng)).sum::<f64>() / 1e4;
    assert!((1.45..=1.55).contains(&direct), "{direct}");

    let cfg = SimConfig::new(2).with_noise(noise).with_seed(11).with_trace(false);
    let out = run(&layout(2), &cfg, |rank| {
        let mut total = 0.0;
        for _ in 0..10_000 {
            total += rank.simulate_work(1.0)?;
        }
        Ok(total / 1e4)
    })
    .unwrap();
    for mean in out.results {
        assert!((1.45..=1.55).contains(&mean), "{mean}");
    }
}

#[test]
fn idle_time_is_recorded_for_blocking_receive() {
    let cfg = SimConfig::new(2);
    let out = run(&layout(2), &cfg, |rank| {
        if rank.id() == 1 {
            rank.compute("slow", 100.0)?;
            rank.send(0, Tag::User(0), vec![])?;
        } else {
            rank.recv(Tag::User(0), None)?;
        }
        Ok(())
    })
    .unwrap();
    let s = out.trace.summary().unwrap();
    assert_eq!(s.per_rank[0].idle, us(100.0));
    assert_eq!(s.per_rank[1].compute, us(100.0));
    // records tile each rank's span
    for t in &s.per_rank {
        assert_eq!(t.busy(), t.end);
    }
}

#[test]
fn collectives_are_deterministic_and_correct() {
    let p = 7;
    let cfg = SimConfig::new(p).with_latency(0.5);
    let out = run(&layout(p), &cfg, |rank| {
        let members: Vec<usize> = (0..rank.size()).collect();
        let s = rank.allreduce_sum_u64(&members, rank.id() as u64 + 1)?;
        let blocks = rank.allgatherv(&members, vec![rank.id() as u8; rank.id()])?;
        let odd: Vec<usize> = members.iter().copied().filter(|r| r % 2 == 1).collect();
        let odd_sum = if odd.contains(&rank.id()) {
            Some(rank.allreduce_sum_f64(&odd, 0.5)?)
        } else {
            None
        };
        rank.barrier(&members)?;
        Ok((s, blocks, odd_sum))
    })
    .unwrap();
    for (r, (s, blocks, odd)) in out.results.iter().enumerate() {
        assert_eq!(*s, 28);
        assert_eq!(blocks.len(), p);
        for (i, b) in blocks.iter().enumerate() {
            assert_eq!(b, &vec![i as u8; i]);
        }
        assert_eq!(odd.is_some(), r % 2 == 1);
        if let Some(v) = odd {
            assert_eq!(*v, 1.5);
        }
    }
}

#[test]
fn serial_resource_serializes_holders() {
    let cfg = SimConfig::new(3);
    let out = run(&layout(3), &cfg, |rank| {
        rank.serial_io(7, 10.0, || Ok(()))?;
        Ok(rank.now())
    })
    .unwrap();
    let mut ends = out.results.clone();
    ends.sort();
    assert_eq!(ends, vec![us(10.0), us(20.0), us(30.0)]);
    assert_eq!(out.trace.summary().unwrap().total().idle, us(30.0));
}

#[test]
fn deadline_stops_runaway_rank() {
    let cfg = SimConfig::new(2).with_deadline(50.0);
    let err = run(&layout(2), &cfg, |rank| -> Result<()> {
        loop {
            rank.compute("spin", 10.0)?;
        }
    })
    .unwrap_err();
    assert!(matches!(err, Error::DeadlineExceeded { .. }), "{err:?}");
}

#[test]
fn wall_clock_mode_completes_and_detects_deadlock() {
    let cfg = SimConfig::new(3).with_time_source(TimeSource::WallClock);
    let out = run(&layout(3), &cfg, |rank| {
        let members: Vec<usize> = (0..rank.size()).collect();
        rank.compute("w", 50.0)?;
        rank.allreduce_sum_u64(&members, 1)
    })
    .unwrap();
    assert_eq!(out.results, vec![3, 3, 3]);
    out.trace.validate().unwrap();

    let err = run(&layout(3), &cfg, |rank| {
        if rank.id() == 1 {
            rank.recv(Tag::User(5), None)?;
        }
        Ok(())
    })
    .unwrap_err();
    assert!(matches!(err, Error::Deadlock { .. }), "{err:?}");
}
