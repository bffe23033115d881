use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mfwb_bench::gap3;
use mfwb_core::baselines::mds_project;
use mfwb_core::density::{kde_density, KdeOptions};
use mfwb_core::fusion::euclidean_matrix;
use mfwb_core::mfm::train_mfm;
use mfwb_core::projectors::project;
use mfwb_core::quality::trustworthiness;
use mfwb_core::{build_merged_matrix, MfmConfig, NeighborhoodFilter, ProjectorKind};

fn merged_matrix(c: &mut Criterion) {
    let mut g = c.benchmark_group("merged_matrix");
    for per in [50, 100] {
        let ds = gap3(per);
        g.bench_with_input(BenchmarkId::from_parameter(ds.len()), &ds, |b, ds| {
            b.iter(|| build_merged_matrix(black_box(ds)).unwrap())
        });
    }
    g.finish();
}

fn mfm_epochs(c: &mut Criterion) {
    let ds = gap3(100);
    let cfg = MfmConfig {
        epochs: 10,
        ..MfmConfig::default()
    };
    c.bench_function("mfm_10_epochs_303", |b| b.iter(|| train_mfm(black_box(&ds), &cfg).unwrap()));
}

fn smacof(c: &mut Criterion) {
    let ds = gap3(50);
    let d = build_merged_matrix(&ds).unwrap().full();
    let mut g = c.benchmark_group("smacof");
    g.sample_size(10);
    g.bench_function("metric_153", |b| b.iter(|| mds_project(black_box(&d), 0).unwrap()));
    g.finish();
}

fn trust(c: &mut Criterion) {
    let ds = gap3(100);
    let layout = project(&ds, ProjectorKind::Pca, &MfmConfig::default(), 0).unwrap();
    let merged = build_merged_matrix(&ds).unwrap();
    let high = merged.full();
    let low = euclidean_matrix(&layout.coords_in(&merged.order).unwrap());
    c.bench_function("trustworthiness_303_k30", |b| {
        b.iter(|| trustworthiness(black_box(&high), black_box(&low), 30, NeighborhoodFilter::All).unwrap())
    });
}

fn kde(c: &mut Criterion) {
    let ds = gap3(100);
    let layout = project(&ds, ProjectorKind::Pca, &MfmConfig::default(), 0).unwrap();
    let opts = KdeOptions::default();
    c.bench_function("kde_303_grid128", |b| b.iter(|| kde_density(black_box(&layout.coords), None, &opts).unwrap()));
}

criterion_group!(benches, merged_matrix, mfm_epochs, smacof, trust, kde);
criterion_main!(benches);
