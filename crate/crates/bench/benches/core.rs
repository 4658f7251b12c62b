use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mechbench_bench::Fixture;
use mechbench_core::datasets::{generate, preset, Scale};
use mechbench_core::diff_engine::{input_gradient, input_hessian_block, mlp_forward, Activation, MlpParams, MlpSpec};
use mechbench_core::integrators::{leapfrog_integrate, rk45_integrate, IntegratorConfig};
use mechbench_core::systems::{HamiltonianField, SystemKind, SystemSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mlp(c: &mut Criterion) {
    let spec = MlpSpec::with_depth(4, 256, 4, Activation::Softplus).unwrap();
    let params = MlpParams::init(spec, &mut ChaCha8Rng::seed_from_u64(0));
    let x = [0.3, -0.2, 0.5, 0.1];
    let mut g = c.benchmark_group("mlp 4x256");
    g.bench_function("forward", |b| b.iter(|| mlp_forward(&params, black_box(&x)).unwrap()));
    g.bench_function("input gradient", |b| b.iter(|| input_gradient(&params, black_box(&x)).unwrap()));
    g.bench_function("velocity hessian", |b| {
        b.iter(|| input_hessian_block(&params, black_box(&x), &[2, 3], &[2, 3]).unwrap())
    });
    g.finish();
}

fn loss_gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss and gradient, one minibatch");
    g.sample_size(20);
    for name in ["mass-spring/hnn", "double-pendulum/lnn", "three-body/srnn"] {
        let f = Fixture::new(name);
        let (lg, x, y) = f.batch();
        g.bench_function(name, |b| b.iter(|| lg.value_and_gradient(&f.model, black_box(&x), black_box(&y)).unwrap()));
    }
    g.finish();
}

fn integrators(c: &mut Criterion) {
    let sys = SystemSpec::default_for(SystemKind::DoublePendulum);
    let field = HamiltonianField::new(&sys, 2).unwrap();
    let times: Vec<f64> = (0..=300).map(|i| i as f64 * 0.1).collect();
    let cfg = IntegratorConfig::rk45(1e-10, 1e-12);
    let mut g = c.benchmark_group("integrators");
    g.bench_function("rk45 double pendulum 30s", |b| {
        b.iter(|| rk45_integrate(|_t, y| field.eval(y), black_box(&[1.2, -0.7, 0.3, 0.4]), &times, &cfg).unwrap())
    });
    g.bench_function("leapfrog pendulum 1e4 steps", |b| {
        b.iter(|| leapfrog_integrate(|q| Ok(vec![9.8 * q[0].sin()]), |p| Ok(p.to_vec()), black_box(&[1.0, 0.0]), 0.0, 0.01, 10_000).unwrap())
    });
    g.finish();
}

fn datasets(c: &mut Criterion) {
    let cfg = preset("mass-spring/hnn", Scale::Paper).unwrap();
    let mut g = c.benchmark_group("datasets");
    g.sample_size(10);
    g.bench_function("generate mass-spring/hnn", |b| b.iter(|| generate(black_box(&cfg)).unwrap()));
    g.finish();
}

criterion_group!(benches, mlp, loss_gradients, integrators, datasets);
criterion_main!(benches);
