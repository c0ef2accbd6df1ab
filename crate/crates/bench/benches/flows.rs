use criterion::{black_box, criterion_group, criterion_main, Criterion};
use geoflow_core::flows::evaluate_kind;
use geoflow_core::integrator::integrate;
use geoflow_core::linalg::{penrose_inverse, svd, DEFAULT_RANK_TOL};
use geoflow_core::network::jacobian;
use geoflow_core::{
    generate_dataset, Activation, DataLaw, FlowKind, IntegratorConfig, NetworkSpec, StopRule,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(
    widths: &[usize],
    n: usize,
) -> (NetworkSpec, geoflow_core::TrainingSet, geoflow_core::Vector) {
    let spec = NetworkSpec::new(widths.to_vec(), Activation::Tanh).unwrap();
    let q = *widths.last().unwrap();
    let data = generate_dataset(widths[0], q, n, DataLaw::Gaussian, 1).unwrap();
    let z = spec.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    (spec, data, z)
}

fn kernels(c: &mut Criterion) {
    let (spec, data, z) = setup(&[2, 8, 8, 2], 4);
    c.bench_function("jacobian 2-8-8-2 N=4", |b| {
        b.iter(|| jacobian(black_box(&spec), black_box(&z), &data).unwrap())
    });
    let d = jacobian(&spec, &z, &data).unwrap();
    c.bench_function("svd 8x114", |b| b.iter(|| svd(black_box(&d)).unwrap()));
    c.bench_function("penrose 8x114", |b| {
        b.iter(|| penrose_inverse(black_box(&d), DEFAULT_RANK_TOL).unwrap())
    });
    for kind in [FlowKind::Standard, FlowKind::OverparamModified] {
        c.bench_function(&format!("field {kind}"), |b| {
            b.iter(|| evaluate_kind(kind, &spec, &data, black_box(&z), DEFAULT_RANK_TOL).unwrap())
        });
    }
}

fn integration(c: &mut Criterion) {
    let (spec, data, z) = setup(&[2, 8, 8, 2], 4);
    let mut group = c.benchmark_group("integrate");
    group.sample_size(20);
    let cfg = IntegratorConfig::for_sample_count(data.len());
    let stop = StopRule::TimeLimit(data.len() as f64);
    group.bench_function("overparam rk4 to s=N", |b| {
        b.iter(|| {
            integrate(
                FlowKind::OverparamModified,
                &spec,
                &data,
                black_box(&z),
                &cfg,
                &stop,
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, kernels, integration);
criterion_main!(benches);
