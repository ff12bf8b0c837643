use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use kanet_core::bspline::{basis_matrix, SplineGrid};
use kanet_core::conv3d::{unfold3d, ConvGeometry, KanConv3d};
use kanet_core::kan_linear::{GridUpdateConfig, KanLinear};
use kanet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_basis(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs = Tensor::rand_uniform(&[4096], -1.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("basis_matrix_4096");
    for grid_size in [5usize, 10, 20] {
        let grid = SplineGrid::uniform(grid_size, 3, -1.0, 1.0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(grid_size), &grid, |b, g| {
            b.iter(|| basis_matrix(black_box(xs.data()), g))
        });
    }
    group.finish();
}

fn bench_unfold(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[4, 8, 9, 9, 16], &mut rng);
    let geom = ConvGeometry::simple(3, 1, 1);
    c.bench_function("unfold3d_4x8x9x9x16_k3", |b| {
        b.iter(|| unfold3d(black_box(&x), &geom).unwrap())
    });
}

fn bench_kan_linear(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layer = KanLinear::init(216, 16, 5, 3, 3, 0.1).unwrap();
    let x = Tensor::rand_uniform(&[256, 216], -0.9, 0.9, &mut rng);
    c.bench_function("kan_linear_forward_256x216", |b| {
        b.iter(|| layer.forward(black_box(&x)).unwrap())
    });
    let up = Tensor::randn(&[256, 16], &mut rng);
    c.bench_function("kan_linear_backward_256x216", |b| {
        b.iter(|| layer.backward(black_box(&x), black_box(&up)).unwrap())
    });
}

fn bench_kan_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = KanConv3d::init(8, 16, ConvGeometry::simple(3, 1, 1), 5, 3, 4, 0.1).unwrap();
    let x = Tensor::rand_uniform(&[2, 8, 7, 7, 8], -0.9, 0.9, &mut rng);
    c.bench_function("kan_conv3d_forward_2x8x7x7x8", |b| {
        b.iter(|| conv.forward(black_box(&x)).unwrap())
    });
}

fn bench_grid_update(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = KanLinear::init(32, 8, 5, 3, 5, 0.1).unwrap();
    let x = Tensor::rand_uniform(&[1024, 32], -2.0, 2.0, &mut rng);
    let cfg = GridUpdateConfig::default();
    c.bench_function("grid_update_1024x32", |b| {
        b.iter_batched(
            || layer.clone(),
            |mut l| l.update_grid(black_box(&x), &cfg).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group!(
    benches,
    bench_basis,
    bench_unfold,
    bench_kan_linear,
    bench_kan_conv,
    bench_grid_update
);
criterion_main!(benches);
