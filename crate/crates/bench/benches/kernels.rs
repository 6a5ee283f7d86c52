//! Criterion benchmarks of the hot kernels: spectral round trips, the
//! primitive right-hand side, one RK4 step, and the equilibrium solve.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use emx_core::dynamics::{make_initial_data, rhs_primitive, step, PerturbationSpec, Scheme};
use emx_core::equilibrium::{solve_equilibrium, DopingProfile};
use emx_core::grid::{Grid, ScalarField};

fn fixture(dims: usize, n: usize) -> (emx_core::equilibrium::Equilibrium, emx_core::dynamics::PlasmaState) {
    let grid = Grid::new(dims, n).unwrap();
    let doping = DopingProfile::cosine(&grid, 0.5, 0.2).unwrap();
    let eq = solve_equilibrium(&doping, 1.0, [0.0; 3], 1e-10).unwrap();
    let spec = PerturbationSpec {
        amplitude: 1e-3,
        kmax: 3,
        modes: None,
    };
    let state = make_initial_data(&eq, &spec, 1, 0.55).unwrap();
    (eq, state)
}

fn bench_fft_roundtrip(c: &mut Criterion) {
    let mut group = c.benchmark_group("fft_roundtrip");
    for (dims, n) in [(1usize, 256usize), (2, 64), (3, 16)] {
        let grid = Grid::new(dims, n).unwrap();
        let f = ScalarField::from_fn(&grid, |x| {
            (2.0 * std::f64::consts::PI * (x[0] + 0.5 * x[1] + 0.25 * x[2])).cos()
        });
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("d{dims}_n{n}")),
            &f,
            |b, f| {
                b.iter(|| {
                    let hat = f.grid().forward(f);
                    std::hint::black_box(f.grid().inverse(&hat))
                })
            },
        );
    }
    group.finish();
}

fn bench_rhs_primitive(c: &mut Criterion) {
    let mut group = c.benchmark_group("rhs_primitive");
    for (dims, n) in [(1usize, 64usize), (2, 32), (3, 16)] {
        let (_, state) = fixture(dims, n);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("d{dims}_n{n}")),
            &state,
            |b, s| b.iter(|| std::hint::black_box(rhs_primitive(s, true).unwrap())),
        );
    }
    group.finish();
}

fn bench_rk4_step(c: &mut Criterion) {
    let (_, state) = fixture(1, 64);
    c.bench_function("rk4_step_d1_n64", |b| {
        b.iter(|| std::hint::black_box(step(&state, 1e-3, Scheme::Rk4, true).unwrap()))
    });
}

fn bench_equilibrium_solve(c: &mut Criterion) {
    let grid = Grid::new(1, 64).unwrap();
    let doping = DopingProfile::cosine(&grid, 0.5, 0.2).unwrap();
    c.bench_function("equilibrium_solve_d1_n64", |b| {
        b.iter(|| std::hint::black_box(solve_equilibrium(&doping, 1.0, [0.0; 3], 1e-10).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_fft_roundtrip,
    bench_rhs_primitive,
    bench_rk4_step,
    bench_equilibrium_solve
);
criterion_main!(benches);
