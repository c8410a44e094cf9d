use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use ndarray::{Array2, Array3};
use picie_core::clustering::{fit, init_centroids, minibatch_update, KMeansConfig};
use picie_core::eval::{hungarian_match, ConfusionMatrix};
use picie_core::losses::{clust_loss_grid, ClusterWeights};
use picie_core::rng::{rng_from_seed, Rng};
use picie_core::transforms::{apply_geometric, apply_photometric, sample_record, FeatureWarp, GridKind};
use picie_core::{Centroids, Extractor, ExtractorConfig};
use rand::Rng as _;

fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f64..1.0));
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    m
}

fn kmeans(c: &mut Criterion) {
    let mut rng = rng_from_seed(1);
    let x = unit_rows(8192, 128, &mut rng);
    let cfg = KMeansConfig {
        init_batches: 8,
        batch_size: 256,
        ..KMeansConfig::new(27)
    };
    let mut g = c.benchmark_group("kmeans");
    g.sample_size(10);
    g.throughput(Throughput::Elements(x.nrows() as u64));
    g.bench_function("fit_8192x128_k27", |b| {
        b.iter(|| fit(black_box(x.view()), &cfg, 1, rng_from_seed(2)).unwrap())
    });
    let state = init_centroids(x.view(), &cfg, 1, rng_from_seed(3)).unwrap();
    let batch = x.slice(ndarray::s![..256, ..]);
    g.throughput(Throughput::Elements(256));
    g.bench_function("minibatch_update_256", |b| {
        b.iter_batched(|| state.clone(), |mut s| minibatch_update(&mut s, black_box(batch)).unwrap(), BatchSize::SmallInput)
    });
    g.finish();
}

fn hungarian(c: &mut Criterion) {
    let mut rng = rng_from_seed(4);
    let cm = ConfusionMatrix::from_counts(Array2::from_shape_fn((27, 27), |_| rng.random_range(0..100_000u64))).unwrap();
    c.bench_function("hungarian_27x27", |b| b.iter(|| hungarian_match(black_box(&cm))));
}

fn extractor(c: &mut Criterion) {
    let ex = Extractor::new(ExtractorConfig::default(), 5).unwrap();
    let mut rng = rng_from_seed(6);
    let img = Array3::from_shape_fn((3, 64, 64), |_| rng.random::<f64>());
    let mut g = c.benchmark_group("extractor");
    g.sample_size(20);
    g.bench_function("tiny_extract_64px", |b| b.iter(|| ex.extract(black_box(&img)).unwrap()));
    let z = ex.extract(&img).unwrap();
    let target = z.mapv(|v| v * 0.5);
    let pass = ex.forward(&img).unwrap();
    g.bench_function("tiny_backward_64px", |b| {
        b.iter(|| {
            let mut grad = vec![0.0; ex.params().len()];
            ex.backward(&pass, black_box(&target), &mut grad);
            grad
        })
    });
    g.finish();
}

fn losses(c: &mut Criterion) {
    let mut rng = rng_from_seed(7);
    let (d, side, k) = (128, 16, 27);
    let z = {
        let rows = unit_rows(side * side, d, &mut rng);
        rows.t().as_standard_layout().into_owned().into_shape_with_order((d, side, side)).unwrap()
    };
    let cents = Centroids::new(unit_rows(k, d, &mut rng), 1).unwrap();
    let labels = Array2::from_shape_fn((side, side), |_| rng.random_range(0..k as u32));
    let w = ClusterWeights::uniform(k);
    c.bench_function("clust_loss_grid_16x16_k27", |b| {
        b.iter(|| clust_loss_grid(black_box(&z), &labels, &cents, &w).unwrap())
    });
}

fn transforms(c: &mut Criterion) {
    let mut rng = rng_from_seed(8);
    let img = Array3::from_shape_fn((3, 64, 64), |_| rng.random::<f64>());
    let mut rec = sample_record(&mut rng, 64);
    rec.photo1.blur_active = true;
    rec.photo1.blur_sigma = 1.0;
    let feats = {
        let ex = Extractor::new(ExtractorConfig::default(), 9).unwrap();
        ex.extract(&img).unwrap()
    };
    let mut g = c.benchmark_group("transforms");
    g.bench_function("photometric_64px", |b| b.iter(|| apply_photometric(black_box(&img), &rec.photo1)));
    g.bench_function("geometric_image_64px", |b| {
        b.iter(|| apply_geometric(black_box(&img), &rec.geo, GridKind::Image).unwrap())
    });
    g.bench_function("feature_warp_16px", |b| b.iter(|| FeatureWarp::forward(black_box(&feats), &rec.geo, 4).unwrap()));
    g.finish();
}

criterion_group!(benches, kmeans, hungarian, extractor, losses, transforms);
criterion_main!(benches);
