use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use densemath::metrics::edit_distance;
use densemath::Tape;
use densemath_bench::random_tensor;
use std::hint::black_box;

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for &(cin, cout, k) in &[(16, 32, 3), (64, 16, 1), (1, 16, 7)] {
        let x = random_tensor(&[2, cin, 32, 64], 1);
        let w = random_tensor(&[cout, cin, k, k], 2);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{cin}x{cout}k{k}")), &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let wv = tape.constant(w.clone());
                let y = tape.conv2d(xv, wv, (1, 1), (k / 2, k / 2)).unwrap();
                let loss = tape.sum(y);
                black_box(tape.gradients(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn edit_distance_bench(c: &mut Criterion) {
    let a: Vec<u32> = (0..200).map(|i| (i * 7 % 13) as u32).collect();
    let b: Vec<u32> = (0..180).map(|i| (i * 5 % 11) as u32).collect();
    c.bench_function("edit_distance_200x180", |bench| {
        bench.iter(|| edit_distance(black_box(&a), black_box(&b)))
    });
}

criterion_group!(benches, conv2d, edit_distance_bench);
criterion_main!(benches);
