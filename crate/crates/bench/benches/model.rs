use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use groupflow::apps::synthetic::TwoOpConfig;
use groupflow::model::predict_decoupled;

fn sweep(c: &mut Criterion) {
    let base = TwoOpConfig::default();
    let beta = base.beta_model().unwrap();
    let params = base.params();
    c.bench_function("predict_decoupled_sweep", |b| {
        b.iter(|| {
            let mut best = 0.0f64;
            for a in 1..=32 {
                for s in [64.0, 256.0, 1024.0, 4096.0, 16384.0] {
                    let mut p = params;
                    p.alpha = a as f64 / 64.0;
                    p.granularity_s = s;
                    best = best.max(predict_decoupled(&p, &beta).unwrap().speedup);
                }
            }
            black_box(best)
        })
    });
}

criterion_group!(benches, sweep);
criterion_main!(benches);
