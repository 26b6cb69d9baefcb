use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dab_tps::converter::{max_power_capability, solve_d0_for_power, solve_steady_state};
use dab_tps::fis::evaluate_fis;
use dab_tps::ModulationTriple;
use dab_tps_bench::{fis, model, params};

fn solver(c: &mut Criterion) {
    let p = params();
    let m = ModulationTriple::new(0.2, 0.8, 0.6).unwrap();
    c.bench_function("steady_state", |b| b.iter(|| solve_steady_state(&p, black_box(190.0), &m)));
    c.bench_function("solve_d0_for_power", |b| {
        b.iter(|| solve_d0_for_power(&p, black_box(190.0), black_box(600.0), 0.8, 0.6))
    });
}

fn capability(c: &mut Criterion) {
    let p = params();
    c.bench_function("max_power_capability", |b| {
        b.iter(|| max_power_capability(&p, black_box(190.0), black_box(0.8), black_box(0.6)))
    });
}

fn surrogate(c: &mut Criterion) {
    let m = model();
    c.bench_function("nn_forward", |b| b.iter(|| m.forward(black_box(&[600.0, 190.0, 0.8, 0.6]))));
}

fn fuzzy(c: &mut Criterion) {
    let f = fis();
    c.bench_function("fis_evaluate", |b| b.iter(|| evaluate_fis(&f, black_box(600.0), black_box(190.0))));
}

criterion_group!(benches, solver, capability, surrogate, fuzzy);
criterion_main!(benches);
