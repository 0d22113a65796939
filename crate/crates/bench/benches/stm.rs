use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use geoint_core::genfun::{propagate_stm, StmMethod};
use geoint_core::systems::{make_earth_j2j3, EarthZonal};

fn earth_stm(c: &mut Criterion) {
    let earth = make_earth_j2j3();
    let z0 = EarthZonal::reference_initial_state();
    let mut group = c.benchmark_group("earth_stm_500");
    for method in [StmMethod::Midpoint, StmMethod::Rk4] {
        group.bench_function(method.to_string(), |b| b.iter(|| propagate_stm(&earth, black_box(&z0), method, 0.01, 500).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, earth_stm);
criterion_main!(benches);
