//! Sequential vs data-parallel throughput of the heavy kernels.
//!
//! The `sequential` case pins a one-thread pool; `parallel` uses every core.
//! Build with `--no-default-features` to benchmark the rayon-free build.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cropmap::classifiers::{train_forest, ForestParams};
use cropmap::diagnostics::{empirical_semivariogram, Subsample};
use cropmap::features::{featurize, FeatureSpec};
use cropmap::par;
use cropmap::preprocess::{CompositeStack, WEEKS};
use cropmap::raster_io::{Band, GeoRef};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Option<usize>); 2] = [("sequential", Some(1)), ("parallel", None)];

fn stack(side: usize) -> CompositeStack {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = side * side;
    CompositeStack {
        georef: GeoRef::north_up(0.0, side as f64 * 10.0, 10.0, "EPSG:32643"),
        width: side,
        height: side,
        bands: Band::SPECTRAL.to_vec(),
        values: (0..n * 4 * WEEKS).map(|_| rng.random_range(100.0..4000.0)).collect(),
        validity: vec![true; n * WEEKS],
        removed: vec![false; n],
    }
}

fn bench_featurize(c: &mut Criterion) {
    let s = stack(48);
    let spec = FeatureSpec::full();
    let mut g = c.benchmark_group("featurize_48x48_full");
    for (name, threads) in MODES {
        g.bench_function(name, |b| par::with_threads(threads, || b.iter(|| featurize(black_box(&s), &spec).unwrap())));
    }
    g.finish();
}

fn bench_forest(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d) = (2000, 40);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let y: Vec<u8> = x.rows().into_iter().map(|r| (r[0] + r[1] * r[2] > 0.0) as u8).collect();
    let names: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    let params = ForestParams {
        n_estimators: 64,
        ..Default::default()
    };
    let mut g = c.benchmark_group("train_forest_2000x40_64_trees");
    g.sample_size(10);
    for (name, threads) in MODES {
        g.bench_function(name, |b| {
            par::with_threads(threads, || b.iter(|| train_forest(x.view(), &y, &params, 3, &names).unwrap()))
        });
    }
    g.finish();
}

fn bench_semivariogram(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = c.benchmark_group("semivariogram");
    for n in [1000usize, 4000] {
        let pts: Vec<(f64, f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..5000.0), rng.random_range(0.0..5000.0), rng.random_range(0.0..1.0)))
            .collect();
        for (name, threads) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &pts, |b, pts| {
                par::with_threads(threads, || {
                    b.iter(|| empirical_semivariogram(pts, 100.0, 3000.0, Subsample::Stride(1)).unwrap())
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, bench_featurize, bench_forest, bench_semivariogram);
criterion_main!(benches);
