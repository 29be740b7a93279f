use std::hint::black_box;

use cac_core::gradcheck::{run_suite, Tolerance};
use cac_core::par::{self, Execution};
use cac_core::phantom::{generate, random_spec, Phantom, PhantomRanges};
use cac_core::scoring::{score_pipeline, ScoringParams};
use cac_core::tensor::{ConvGeom, Graph, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn conv_step(exec: Execution, x: &Tensor, w: &Tensor) -> f64 {
    let mut g = Graph::new().with_execution(exec);
    let xv = g.leaf(x.clone());
    let wv = g.leaf(w.clone());
    let y = g.conv2d(xv, wv, None, ConvGeom::same_dilated(2)).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    g.value(s).item()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[1, 16, 64, 64], 1.0, &mut rng).with_requires_grad(true);
    let w = Tensor::randn(&[16, 16, 3, 3], 0.1, &mut rng).with_requires_grad(true);
    let mut group = c.benchmark_group("conv2d_forward_backward");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| conv_step(exec, black_box(&x), &w)));
    }
    group.finish();
}

fn bench_gradcheck(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradcheck_suite");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_suite(black_box(1), Tolerance::default(), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ranges = PhantomRanges::default();
    let cohort: Vec<Phantom> = (0..64).map(|_| generate(&random_spec(&ranges, &mut rng)).unwrap()).collect();
    let params = ScoringParams::default();
    let mut group = c.benchmark_group("cohort_scoring");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::map(exec, &cohort, |p| score_pipeline(&p.mask.to_probs(), &p.volume, &params).unwrap().total)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_gradcheck, bench_scoring);
criterion_main!(benches);
