use super::*;
use proptest::prelude::*;

fn base() -> PerfParams {
    PerfParams {
        t_w0: 10.0,
        t_w1: 5.0,
        t_w1_prime: 1.0,
        t_sigma: 2.0,
        alpha: 0.25,
        beta: 0.5,
        data_volume_d: 1e6,
        granularity_s: 1e3,
        overhead_o: 0.01,
        total_ranks: 32,
    }
}

/// Second, expanded evaluation of the decoupled time.
fn oracle_decoupled(p: &PerfParams, beta: f64) -> f64 {
    let per_elem = if p.data_volume_d == 0.0 { 0.0 } else { p.overhead_o * p.data_volume_d / p.granularity_s };
    beta * p.t_w0 / (1.0 - p.alpha) + beta * p.t_sigma + beta * per_elem + p.t_w1_prime / p.alpha
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[test]
fn conventional_examples() {
    let p = PerfParams { t_w0: 10.0, t_sigma: 2.0, t_w1: 5.0, ..PerfParams::default() };
    assert_eq!(predict_conventional(&p).unwrap(), 17.0);
    let p = PerfParams { t_sigma: 0.0, ..p };
    assert_eq!(predict_conventional(&p).unwrap(), 15.0);
}

#[test]
fn decoupled_max_examples() {
    let p = PerfParams { t_w0: 9.0, t_sigma: 1.0, t_w1_prime: 1.0, alpha: 0.5, ..PerfParams::default() };
    assert_eq!(predict_decoupled_max(&p).unwrap(), 19.0);
    let p = PerfParams { t_w1_prime: 0.0, alpha: 0.2, ..p };
    assert_eq!(predict_decoupled_max(&p).unwrap(), 9.0 / 0.8 + 1.0);
    for alpha in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(predict_decoupled_max(&PerfParams { alpha, ..p }).is_err());
    }
}

#[test]
fn decoupled_max_branches_meet_at_balance() {
    // solve t_w0/(1-a) + sigma = t1/a by bisection; both branches agree there
    let p = PerfParams { t_w0: 7.0, t_sigma: 3.0, t_w1_prime: 2.5, ..PerfParams::default() };
    let f = |a: f64| p.t_w0 / (1.0 - a) + p.t_sigma - p.t_w1_prime / a;
    let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = 0.5 * (lo + hi);
    let q = PerfParams { alpha: a, ..p };
    let t = predict_decoupled_max(&q).unwrap();
    assert!((q.producer_term() - q.consumer_term()).abs() < 1e-9);
    assert!((t - q.producer_term()).abs() < 1e-9 && (t - q.consumer_term()).abs() < 1e-9);
}

#[test]
fn beta_endpoints() {
    let p = base();
    let worst = predict_decoupled(&p, &BetaModel::Constant(1.0)).unwrap();
    let sum = (p.t_w0 / (1.0 - p.alpha) + p.t_sigma + p.data_volume_d / p.granularity_s * p.overhead_o) + p.t_w1_prime / p.alpha;
    assert_eq!(worst.t_decoupled, sum);
    let best = predict_decoupled(&p, &BetaModel::Constant(0.0)).unwrap();
    assert_eq!(best.t_decoupled, p.t_w1_prime / p.alpha);
    assert_eq!(best.speedup, best.t_conventional / best.t_decoupled);
}

#[test]
fn overhead_placement_variant() {
    let p = base();
    let b = BetaModel::Constant(0.5);
    let inside = predict_decoupled_with(&p, &b, OverheadPlacement::InsideBeta).unwrap();
    let outside = predict_decoupled_with(&p, &b, OverheadPlacement::OutsideBeta).unwrap();
    let o = p.overhead_term();
    assert!((outside.t_decoupled - inside.t_decoupled - 0.5 * o).abs() < 1e-12);
}

#[test]
fn validation_rejects_bad_params() {
    let bad = [
        PerfParams { granularity_s: 0.0, ..base() },
        PerfParams { granularity_s: 2e6, ..base() },
        PerfParams { t_w0: -1.0, ..base() },
        PerfParams { beta: 1.5, ..base() },
        PerfParams { total_ranks: 1, ..base() },
    ];
    for p in bad {
        assert!(matches!(predict_decoupled(&p, &BetaModel::Constant(0.5)), Err(Error::InvalidParams(_))), "{p:?}");
    }
    assert!(predict_decoupled(&base(), &BetaModel::Constant(-0.1)).is_err());
    assert!(predict_decoupled(&base(), &BetaModel::Affine { beta0: 0.1, k: -1.0 }).is_err());
}

#[test]
fn affine_beta_saturates_and_handles_zero_volume() {
    let m = BetaModel::Affine { beta0: 0.2, k: 4.0 };
    assert_eq!(m.eval(0.0, 100.0), 0.2);
    assert_eq!(m.eval(10.0, 100.0), 0.2 + 0.4);
    assert_eq!(m.eval(100.0, 100.0), 1.0);
    assert_eq!(m.eval(5.0, 0.0), 0.2);
}

#[test]
fn alpha_sweep() {
    let p = base();
    let b = BetaModel::Constant(0.3);
    let grid = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0];
    let sweep = sweep_alpha(&p, &b, &grid, None).unwrap();
    assert_eq!(sweep.table.len(), 3);
    let one = sweep_alpha(&p, &b, &[0.3], None).unwrap();
    assert_eq!(one.best.alpha, 0.3);
    assert!(matches!(sweep_alpha(&p, &b, &[], None), Err(Error::Usage(_))));
    assert!(sweep_alpha(&p, &b, &[0.0], None).is_err());

    // callback: T'_w1 shrinks with the group, as for a reduction tree
    let cb = |a: f64| 0.05 * (a * 32.0).log2().max(0.0);
    let s = sweep_alpha(&p, &b, &grid, Some(&cb)).unwrap();
    for row in &s.table {
        assert!((row.prediction.breakdown.consumer_term - cb(row.alpha) / row.alpha).abs() < 1e-12);
    }

    // fine grid containing the coarse grid never does worse
    let coarse: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
    let fine: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    let c = sweep_alpha(&p, &b, &coarse, None).unwrap();
    let f = sweep_alpha(&p, &b, &fine, None).unwrap();
    assert!(f.best.prediction.t_decoupled <= c.best.prediction.t_decoupled);
}

#[test]
fn alpha_ties_go_to_smaller_alpha() {
    let p = PerfParams { t_w1_prime: 0.0, t_w0: 0.0, ..base() };
    let s = sweep_alpha(&p, &BetaModel::Constant(0.0), &[0.5, 0.25, 0.125], None).unwrap();
    assert_eq!(s.best.alpha, 0.125);
}

#[test]
fn granularity_sweep_overhead_terms() {
    let p = base();
    let b = BetaModel::Constant(0.5);
    let grid = [1e2, 1e3, 1e4, 1e5, 1e6];
    let s = sweep_granularity(&p, &b, &grid).unwrap();
    for w in s.table.windows(2) {
        assert!(w[1].prediction.breakdown.overhead_term < w[0].prediction.breakdown.overhead_term);
    }
    let last = s.table.last().unwrap();
    assert_eq!(last.prediction.breakdown.overhead_term, p.overhead_o);
    assert!(sweep_granularity(&p, &b, &[]).is_err());
    assert!(sweep_granularity(&p, &b, &[2e6]).is_err());
}

#[test]
fn affine_beta_interior_minimum_matches_fine_scan() {
    let p = PerfParams { overhead_o: 0.05, ..base() };
    let b = BetaModel::Affine { beta0: 0.05, k: 20.0 };
    let step = 1000.0;
    let coarse: Vec<f64> = (1..=100).map(|i| i as f64 * step).collect();
    let fine: Vec<f64> = (1..=1000).map(|i| i as f64 * step / 10.0).collect();
    let c = sweep_granularity(&p, &b, &coarse).unwrap().best.granularity_s;
    // brute-force oracle over the fine grid
    let mut best = (f64::INFINITY, 0.0);
    for &s in &fine {
        let q = PerfParams { granularity_s: s, ..p };
        let t = oracle_decoupled(&q, b.eval(s, q.data_volume_d));
        if t < best.0 {
            best = (t, s);
        }
    }
    assert!(c > step && c < 100.0 * step, "minimum {c} is not interior");
    assert!((c - best.1).abs() <= step, "{c} vs {}", best.1);
}

fn params() -> impl Strategy<Value = PerfParams> {
    (
        (0.0..1e4f64, 0.0..1e4f64, 0.0..1e4f64, 0.0..1e3f64),
        (0.001..0.999f64, 0.0..=1.0f64),
        (1.0..1e9f64, 0.0..=1.0f64, 0.0..10.0f64),
        2usize..10_000,
    )
        .prop_map(|((t_w0, t_w1, t_w1_prime, t_sigma), (alpha, beta), (d, s_frac, o), p)| PerfParams {
            t_w0,
            t_w1,
            t_w1_prime,
            t_sigma,
            alpha,
            beta,
            data_volume_d: d,
            granularity_s: (d * s_frac).max(1.0).min(d),
            overhead_o: o,
            total_ranks: p,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn conventional_matches_oracle(p in params()) {
        let t = predict_conventional(&p).unwrap();
        prop_assert!(rel_close(t, p.t_w1 + p.t_sigma + p.t_w0, 1e-12));
    }

    #[test]
    fn decoupled_matches_oracle(p in params(), beta in 0.0..=1.0f64) {
        let got = predict_decoupled(&p, &BetaModel::Constant(beta)).unwrap();
        prop_assert!(rel_close(got.t_decoupled, oracle_decoupled(&p, beta), 1e-12));
        prop_assert!(got.breakdown.producer_term >= 0.0 && got.breakdown.overhead_term >= 0.0);
    }

    #[test]
    fn without_overhead_eq4_is_eq3(p in params()) {
        let q = PerfParams { overhead_o: 0.0, ..p };
        let d = predict_decoupled(&q, &BetaModel::Constant(q.beta)).unwrap().t_decoupled;
        prop_assert!(rel_close(d, predict_pipelined(&q).unwrap(), 1e-12));
    }

    #[test]
    fn no_pipeline_is_never_faster_than_full_overlap(p in params()) {
        let q = PerfParams { overhead_o: 0.0, beta: 1.0, ..p };
        prop_assert!(predict_pipelined(&q).unwrap() >= predict_decoupled_max(&q).unwrap());
    }

    #[test]
    fn monotone_in_inputs(p in params(), beta in 0.0..=1.0f64, bump in 0.0..100.0f64, which in 0usize..4) {
        let b = BetaModel::Constant(beta);
        let mut q = p;
        match which {
            0 => q.t_w0 += bump,
            1 => q.t_w1_prime += bump,
            2 => q.t_sigma += bump,
            _ => q.overhead_o += bump,
        }
        let before = predict_decoupled(&p, &b).unwrap().t_decoupled;
        let after = predict_decoupled(&q, &b).unwrap().t_decoupled;
        prop_assert!(after >= before);
    }
}
