use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use geoint_core::optctrl::{shoot, Geometry, HeisenbergProblem, ShootingOptions};
use geoint_core::Vector;

fn heisenberg_shooting(c: &mut Criterion) {
    let x0 = Vector::zeros(3);
    let target = Vector::from_vec(vec![1.0, 0.0, 0.0]);
    let guess = Vector::from_vec(vec![-0.5, 0.1, 0.2]);
    let opts = ShootingOptions::default();
    let mut group = c.benchmark_group("heisenberg_shoot_n100");
    group.sample_size(10);
    for geometry in [Geometry::Stormer, Geometry::Midpoint] {
        group.bench_function(geometry.to_string(), |b| {
            b.iter(|| shoot(&HeisenbergProblem, geometry, &x0, black_box(&target), 1.0, 100, &guess, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, heisenberg_shooting);
criterion_main!(benches);
