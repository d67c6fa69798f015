use super::*;

fn topo(d: [usize; 3]) -> GridTopology {
    GridTopology::new(d).unwrap()
}

fn sorted(v: &[Vec<Particle>]) -> Vec<Vec<(u64, [u64; 6])>> {
    v.iter()
        .map(|r| {
            let mut k: Vec<_> = r.iter().map(Particle::bits).collect();
            k.sort_unstable();
            k
        })
        .collect()
}

/// Owner by scanning every rank's box.
fn brute_owner(t: &GridTopology, pos: [f64; 3]) -> usize {
    let d = t.dims();
    (0..t.ranks())
        .find(|&r| {
            let c = t.coords(r);
            (0..3).all(|a| {
                let x = pos[a] * d[a] as f64;
                x >= c[a] as f64 && x < (c[a] + 1) as f64
            })
        })
        .unwrap()
}

#[test]
fn record_round_trip() {
    let p = Particle {
        id: u64::MAX - 3,
        pos: [0.0, 0.5, 0.999],
        vel: [-1e-300, f64::MAX, 3.5],
    };
    let b = p.to_bytes();
    assert_eq!(b.len(), 56);
    assert_eq!(&b[..8], &(u64::MAX - 3).to_le_bytes());
    assert_eq!(Particle::from_bytes(&b).unwrap(), p);
    assert!(Particle::from_bytes(&b[..55]).is_err());
}

#[test]
fn wrap_stays_in_unit_interval() {
    for x in [-1e-18, -0.25, 1.0, 2.75, 0.0, -3.0] {
        let y = wrap(x);
        assert!((0.0..1.0).contains(&y), "{x} -> {y}");
    }
}

#[test]
fn move_examples() {
    let t = topo([2, 1, 1]);
    let still = Particle { id: 0, pos: [0.2, 0.5, 0.5], vel: [0.0; 3] };
    let (s, e) = move_particles(&t, 0, vec![still], 1.0).unwrap();
    assert_eq!((s.len(), e.len()), (1, 0));
    let edge = Particle { id: 1, pos: [0.49, 0.5, 0.5], vel: [0.02, 0.0, 0.0] };
    let (_, e) = move_particles(&t, 0, vec![edge], 1.0).unwrap();
    assert_eq!(owner(&t, e[0].pos), 1);
    let bad = Particle { id: 2, pos: [0.1; 3], vel: [f64::NAN, 0.0, 0.0] };
    assert!(matches!(move_particles(&t, 0, vec![bad], 1.0), Err(Error::Numerical { .. })));
}

#[test]
fn move_partitions_and_owner_is_correct() {
    let t = topo([3, 2, 4]);
    let g = ParticleGen { count: 20_000, max_speed: 0.6, seed: 5, ..ParticleGen::default() };
    let init = g.generate(&t).unwrap();
    for (r, ps) in init.iter().enumerate() {
        for p in ps {
            assert_eq!(brute_owner(&t, p.pos), r);
        }
        let (s, e) = move_particles(&t, r, ps.clone(), 0.7).unwrap();
        assert_eq!(s.len() + e.len(), ps.len());
        assert!(s.iter().all(|p| brute_owner(&t, p.pos) == r));
        assert!(e.iter().all(|p| brute_owner(&t, p.pos) != r));
    }
}

#[test]
fn skewed_generator_uses_few_ranks() {
    let t = topo([4, 4, 2]);
    let g = ParticleGen { count: 5_000, hot_fraction: 0.1, ..ParticleGen::default() };
    let init = g.generate(&t).unwrap();
    assert_eq!(init.iter().filter(|v| !v.is_empty()).count(), 3);
    assert_eq!(init.iter().map(Vec::len).sum::<usize>(), 5_000);
}

#[test]
fn both_exchanges_match_reference() {
    for dims in [[2, 2, 2], [3, 1, 2], [4, 4, 1]] {
        let t = topo(dims);
        let g = ParticleGen { count: 3_000, max_speed: 0.9, seed: 2, ..ParticleGen::default() };
        let init = g.generate(&t).unwrap();
        let want = sorted(&reference_state(&t, &init, 3, 1.0).unwrap());
        for (exchange, exchange_ranks) in [(ExchangeVariant::Neighbor, 1), (ExchangeVariant::Decoupled, 1), (ExchangeVariant::Decoupled, 3)] {
            let c = ParticlesConfig { dims, steps: 3, exchange, exchange_ranks, batch_particles: 16, ..ParticlesConfig::default() };
            let r = run_particles(&c, &init, &SimConfig::new(c.total_ranks())).unwrap();
            assert_eq!(sorted(&r.per_rank), want, "{exchange} {dims:?}");
            match exchange {
                ExchangeVariant::Neighbor => {
                    assert!(r.max_rounds <= dims.iter().sum());
                    assert!(r.max_rounds >= 1);
                }
                ExchangeVariant::Decoupled => assert_eq!(r.max_hops, 2),
            }
        }
    }
}

#[test]
fn one_cell_move_takes_one_round() {
    let mut init = vec![Vec::new(); 4];
    init[0].push(Particle { id: 0, pos: [0.2, 0.5, 0.5], vel: [0.1, 0.0, 0.0] });
    let c = ParticlesConfig { dims: [4, 1, 1], ..ParticlesConfig::default() };
    let r = run_particles(&c, &init, &SimConfig::new(4)).unwrap();
    assert_eq!(r.max_rounds, 1);
    assert_eq!(r.max_hops, 1);
    assert_eq!(r.per_rank[1].len(), 1);
}

#[test]
fn nothing_moves_means_no_rounds() {
    let t = topo([2, 2, 1]);
    let init = ParticleGen { count: 100, max_speed: 0.0, ..ParticleGen::default() }.generate(&t).unwrap();
    for exchange in [ExchangeVariant::Neighbor, ExchangeVariant::Decoupled] {
        let c = ParticlesConfig { dims: [2, 2, 1], exchange, ..ParticlesConfig::default() };
        let r = run_particles(&c, &init, &SimConfig::new(c.total_ranks())).unwrap();
        assert_eq!((r.max_rounds, r.max_hops), (0, 0));
        assert_eq!(sorted(&r.per_rank), sorted(&init));
    }
}

#[test]
fn every_io_variant_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let t = topo([2, 2, 1]);
    let init = ParticleGen { count: 2_000, hot_fraction: 0.5, seed: 8, ..ParticleGen::default() }.generate(&t).unwrap();
    let mut want: Vec<_> = reference_state(&t, &init, 1, 1.0).unwrap().concat().iter().map(Particle::bits).collect();
    want.sort_unstable();
    for io in [IoVariant::Shared, IoVariant::Collective, IoVariant::Decoupled] {
        let path = dir.path().join(format!("{io}.bin"));
        let c = ParticlesConfig {
            dims: [2, 2, 1],
            io,
            io_ranks: 2,
            writer_buffer_bytes: 1000,
            output: Some(path.clone()),
            ..ParticlesConfig::default()
        };
        let r = run_particles(&c, &init, &SimConfig::new(c.total_ranks())).unwrap();
        let mut got: Vec<_> = read_records(&path).unwrap().iter().map(Particle::bits).collect();
        got.sort_unstable();
        assert_eq!(got, want, "{io}");
        let meta = read_sidecar(&path).unwrap();
        assert_eq!(meta, Sidecar { schema_version: 1, record_bytes: 56, records: 2_000 });
        let report = r.io.unwrap();
        assert_eq!(report.records, 2_000);
        if io == IoVariant::Collective {
            let mut acc = 0;
            for (rank, off) in report.offsets.iter().enumerate() {
                assert_eq!(*off, acc);
                acc += 56 * r.per_rank[rank].len() as u64;
            }
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count() % 2, 0, "no part files left behind");
    }
}

#[test]
fn zero_particles_give_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    for io in [IoVariant::Shared, IoVariant::Collective, IoVariant::Decoupled] {
        let path = dir.path().join(format!("{io}.bin"));
        let c = ParticlesConfig { dims: [2, 1, 1], io, output: Some(path.clone()), ..ParticlesConfig::default() };
        run_particles(&c, &[vec![], vec![]], &SimConfig::new(c.total_ranks())).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
        assert_eq!(read_sidecar(&path).unwrap().records, 0);
    }
}

#[test]
fn write_failure_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let c = ParticlesConfig {
        dims: [2, 1, 1],
        io: IoVariant::Collective,
        output: Some(dir.path().join("missing").join("out.bin")),
        ..ParticlesConfig::default()
    };
    assert!(matches!(run_particles(&c, &[vec![], vec![]], &SimConfig::new(2)), Err(Error::Io { .. })));
}

#[test]
fn skewed_start_favours_decoupled_exchange() {
    // 32 ranks either way: 4x4x2 forwarding, or 5x3x2 plus two exchange ranks
    let mut wins = 0;
    for seed in 0..10 {
        let makespan = |exchange, dims, exchange_ranks| {
            let generator = ParticleGen {
                count: 100_000,
                hot_fraction: 0.1,
                seed,
                ..ParticleGen::default()
            };
            let c = ParticlesConfig {
                dims,
                generator: generator.clone(),
                exchange,
                exchange_ranks,
                steps: 3,
                ..ParticlesConfig::default()
            };
            let initial = generator.generate(&c.topology().unwrap()).unwrap();
            let sim = SimConfig::new(c.total_ranks()).with_latency(5.0).with_trace(false);
            run_particles(&c, &initial, &sim).unwrap().makespan
        };
        let neighbor = makespan(ExchangeVariant::Neighbor, [4, 4, 2], 1);
        let decoupled = makespan(ExchangeVariant::Decoupled, [5, 3, 2], 2);
        wins += usize::from(decoupled <= neighbor);
    }
    assert!(wins >= 9, "{wins} of 10");
}
