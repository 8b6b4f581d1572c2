use std::hint::black_box;

use catcnn::groundtruth::{render_density, render_mask};
use catcnn::{DotAnnotation, Graph, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (ci, co, side) in [(1, 8, 64), (32, 32, 32), (64, 64, 16)] {
        let x = ramp(&[ci, side, side]);
        let w = ramp(&[co, ci, 3, 3]);
        let b = Tensor::zeros(&[co]);
        group.bench_function(BenchmarkId::from_parameter(format!("{ci}x{side}x{side}->{co}")), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.constant(b.clone()));
                let y = g.conv2d(xv, wv, bv, 2).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
                black_box(g.grad(wv).map(|d| d[0]))
            })
        });
    }
    group.finish();
}

fn targets(c: &mut Criterion) {
    let points: Vec<(f64, f64)> = (0..200).map(|i| ((i * 13 % 256) as f64, (i * 29 % 256) as f64)).collect();
    let ann = DotAnnotation::new(points);
    c.bench_function("render_density_256x256_200pts", |b| {
        b.iter(|| black_box(render_density(&ann, 256, 256).unwrap().count()))
    });
    c.bench_function("render_mask_256x256_200pts", |b| {
        b.iter(|| black_box(render_mask(&ann, 256, 256).unwrap().foreground_fraction()))
    });
}

criterion_group!(benches, conv, targets);
criterion_main!(benches);
