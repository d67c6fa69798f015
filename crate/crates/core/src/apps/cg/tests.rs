use super::*;

fn cfg(variant: CgVariant, dims: [usize; 3], local: [usize; 3], iterations: usize, rhs: Rhs) -> CgConfig {
    CgConfig {
        variant,
        dims,
        local,
        iterations,
        rhs,
        ..CgConfig::default()
    }
}

fn solve(c: &CgConfig) -> CgRun {
    cg_solve(c, &SimConfig::new(c.total_ranks())).unwrap()
}

#[test]
fn zero_rhs_stays_zero() {
    for v in CgVariant::ALL {
        let r = solve(&cfg(v, [2, 1, 1], [3, 3, 3], 3, Rhs::Zero));
        assert_eq!(r.history, vec![0.0; 3]);
        assert!(r.solution.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn variants_agree_exactly() {
    for dims in [[2, 2, 1], [1, 1, 2], [3, 1, 2]] {
        let rhs = Rhs::Random { seed: 9 };
        let base = solve(&cfg(CgVariant::Blocking, dims, [4, 5, 3], 20, rhs));
        for v in [CgVariant::Nonblocking, CgVariant::Decoupled] {
            let r = solve(&cfg(v, dims, [4, 5, 3], 20, rhs));
            assert_eq!(r.history, base.history, "{v} {dims:?}");
            assert_eq!(r.solution, base.solution);
        }
    }
}

#[test]
fn single_block_with_exchange_rank() {
    let c = cfg(CgVariant::Decoupled, [1, 1, 1], [4, 3, 5], 12, Rhs::Random { seed: 2 });
    let r = solve(&c);
    let (h, _) = serial_cg(c.global(), 12, Rhs::Random { seed: 2 }).unwrap();
    for (a, b) in r.history.iter().zip(&h) {
        assert!((a - b).abs() <= 1e-8 * b.abs());
    }
}

#[test]
fn exchange_group_size_does_not_change_results() {
    let mut c = cfg(CgVariant::Decoupled, [2, 2, 1], [4, 4, 4], 10, Rhs::Random { seed: 1 });
    let one = solve(&c);
    c.exchange_ranks = 4;
    let four = solve(&c);
    assert_eq!(one.history, four.history);
}

#[test]
fn matches_serial_solver() {
    let c = cfg(CgVariant::Nonblocking, [2, 2, 2], [5, 4, 3], 25, Rhs::Random { seed: 4 });
    let r = solve(&c);
    let (h, x) = serial_cg(c.global(), 25, Rhs::Random { seed: 4 }).unwrap();
    for (a, b) in r.history.iter().zip(&h) {
        assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} vs {b}");
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in r.solution.iter().zip(&x) {
        assert!((a - b).abs() <= 1e-9 * scale);
    }
}

#[test]
fn manufactured_error_is_discretization_error() {
    let c = cfg(CgVariant::Blocking, [2, 1, 2], [8, 16, 8], 5, Rhs::Manufactured);
    let r = solve(&c);
    let expected = discretization_error(c.global());
    assert!((r.max_error() - expected).abs() <= 1e-6 * expected, "{} vs {expected}", r.max_error());
    assert!(r.history.last().unwrap() < &r.history[0]);
}

#[test]
fn exchange_rank_does_the_aggregation() {
    let c = cfg(CgVariant::Decoupled, [2, 2, 2], [8, 8, 8], 3, Rhs::Manufactured);
    let sim = SimConfig::new(c.total_ranks()).with_trace(true).with_latency(50.0);
    let r = cg_solve(&c, &sim).unwrap();
    assert!(r
        .trace
        .records
        .iter()
        .any(|t| t.tag.compute_op() == Some("exchange") && t.rank == 8));
}

#[test]
fn rank_count_and_extent_are_checked() {
    let c = cfg(CgVariant::Decoupled, [2, 1, 1], [4, 4, 4], 1, Rhs::Zero);
    assert!(cg_solve(&c, &SimConfig::new(2)).is_err());
    let c = cfg(CgVariant::Blocking, [1, 1, 1], [1, 4, 4], 1, Rhs::Zero);
    assert!(c.validate().is_err());
}

#[test]
fn history_csv() {
    let mut out = Vec::new();
    write_history(&[1.0, 0.5], &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "iter,rho\n1,1e0\n2,5e-1\n");
}
