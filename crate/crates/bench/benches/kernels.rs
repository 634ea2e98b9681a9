use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use fcos::fusion::{average_linkage_cluster, prune_model_channels, FusionConfig};
use fcos::model::{build_model, ArchSpec};
use fcos::tensor::kernels::{conv1d_forward, ConvGeom};
use fcos_bench::{random_distances, signal_batch};

fn conv(c: &mut Criterion) {
    let g = ConvGeom {
        batch: 128,
        c_in: 32,
        c_out: 64,
        l_in: 32,
        kernel: 8,
        stride: 1,
        pad_left: 3,
        pad_right: 4,
    };
    let x = vec![0.5f32; g.batch * g.c_in * g.l_in];
    let w = vec![0.01f32; g.c_out * g.c_in * g.kernel];
    c.bench_function("conv1d_forward 128x32x32 -> 64", |b| {
        b.iter(|| conv1d_forward(black_box(&x), black_box(&w), None, &g))
    });
}

fn forward(c: &mut Criterion) {
    let model = build_model(&ArchSpec::plain(4, 0)).unwrap();
    let x = signal_batch(128, 128, 1);
    c.bench_function("plain-cnn1d forward batch 128", |b| {
        b.iter(|| model.forward(black_box(&x)).unwrap())
    });
}

fn linkage(c: &mut Criterion) {
    let mut group = c.benchmark_group("average_linkage");
    for m in [16usize, 64] {
        let d = random_distances(m, 64, 7);
        group.bench_with_input(BenchmarkId::from_parameter(m), &d, |b, d| {
            b.iter(|| average_linkage_cluster(black_box(d), m / 4).unwrap())
        });
    }
    group.finish();
}

fn prune(c: &mut Criterion) {
    let model = build_model(&ArchSpec::plain(4, 0)).unwrap();
    let cfg = FusionConfig {
        keep_ratio: 0.5,
        ..FusionConfig::default()
    };
    c.bench_function("prune plain-cnn1d keep 0.5", |b| {
        b.iter(|| prune_model_channels(black_box(&model), &cfg).unwrap())
    });
}

criterion_group!(benches, conv, forward, linkage, prune);
criterion_main!(benches);
