use criterion::{black_box, criterion_group, criterion_main, Criterion};
use fovsearch_core::config::ExperimentConfig;
use fovsearch_core::harness::{evaluation_plans, Condition, SearchModel, Setup, Task};
use fovsearch_core::search::{ResponseCache, StoppingRule};
use fovsearch_core::stimulus::generate_noise_volume;
use fovsearch_core::{FftGrid, NoiseSpec, SignalKind, VolumeGeometry};

fn small_setup() -> Setup {
    let mut cfg = ExperimentConfig::default();
    cfg.geometry.dims = [64, 64, 12];
    cfg.trials = 4;
    Setup::new(&cfg).expect("setup")
}

fn noise(c: &mut Criterion) {
    let mut g = c.benchmark_group("noise");
    for dims in [[256, 256, 1], [128, 128, 16], [256, 256, 32]] {
        let geom = VolumeGeometry::new(dims, 0.13 / 6.0).unwrap();
        let spec = NoiseSpec::default().with_seed(3);
        g.bench_function(format!("{}x{}x{}", dims[0], dims[1], dims[2]), |b| {
            b.iter(|| generate_noise_volume(black_box(&spec), &geom).unwrap())
        });
    }
    g.finish();
}

fn fft(c: &mut Criterion) {
    let grid = FftGrid::new([128, 128, 16]);
    let data: Vec<f64> = (0..grid.len()).map(|i| (i % 97) as f64).collect();
    c.bench_function("fft/forward_real 128x128x16", |b| b.iter(|| grid.forward_real(black_box(&data))));
}

fn scanning(c: &mut Criterion) {
    let setup = small_setup();
    let model = SearchModel::new(&setup, Condition::new(SignalKind::Microcalcification, Task::Search, true), 0.45).unwrap();
    let plan = evaluation_plans(&setup, SignalKind::Microcalcification).unwrap()[0];
    let slices = model.stimulus(&setup, &plan);
    c.bench_function("scan/band response 64x64x12", |b| {
        b.iter(|| {
            let mut cache = ResponseCache::new(&model.scanner, &slices);
            black_box(cache.response(3, 6).len())
        })
    });
}

fn fsm_trial(c: &mut Criterion) {
    let setup = small_setup();
    let mut model = SearchModel::new(&setup, Condition::new(SignalKind::Microcalcification, Task::Search, true), 0.45).unwrap();
    model.rule = StoppingRule::coverage_only(0.25);
    let plan = evaluation_plans(&setup, SignalKind::Microcalcification).unwrap()[0];
    let (rule, policy) = (model.rule.clone(), model.policy);
    c.bench_function("fsm/trial 64x64x12", |b| {
        b.iter(|| model.run_trial(&setup, black_box(&plan), &rule, &policy).unwrap().fixations.len())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = noise, fft, scanning, fsm_trial
}
criterion_main!(benches);
