use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use srelasso::dgp::{gen_dependent, gen_iid};
use srelasso::lasso::solve_lasso;
use srelasso::lrv::newey_west_lvar;
use srelasso::penalty::{bootstrap_max_stats, run_pilot};
use srelasso::{BlockScheme, DepScenario, HacOptions, IidScenario, LassoProblem, SolverOptions, TuningConfig};

fn lasso(c: &mut Criterion) {
    let (data, _) = gen_iid(&IidScenario::new(1, 200, 100), 1).unwrap();
    let loadings = vec![1.0; 200];
    let options = SolverOptions::default();
    c.bench_function("lasso n=100 K=200", |b| {
        b.iter(|| {
            let problem = LassoProblem::new(0, data.design(0), data.response(0), 60.0, &loadings);
            black_box(solve_lasso(&problem, &options).unwrap())
        })
    });
}

fn newey_west(c: &mut Criterion) {
    let series: Vec<f64> = (0..20_000).map(|t| ((t as f64) * 0.37).sin() + ((t * t) as f64 * 1e-3).cos()).collect();
    let opts = HacOptions::automatic(series.len());
    c.bench_function("newey-west n=20000", |b| b.iter(|| black_box(newey_west_lvar(&series, &opts).unwrap())));
}

fn bootstrap(c: &mut Criterion) {
    let (data, _) = gen_dependent(&DepScenario::new(50, 50, 100, 0.1), 2).unwrap();
    let tuning = TuningConfig {
        block_size: 8,
        ..TuningConfig::default()
    };
    let pilot = run_pilot(&data, &tuning).unwrap();
    let residuals: Vec<Vec<f64>> = pilot.pilots.iter().map(|f| f.residuals.clone()).collect();
    let scheme = BlockScheme::new(8, data.n()).unwrap();
    let mut group = c.benchmark_group("bootstrap");
    group.sample_size(10);
    group.bench_function("max stats J=K=50 n=100 B=1000", |b| {
        b.iter(|| black_box(bootstrap_max_stats(&data, &residuals, &pilot.loadings, &scheme, 1000, 3).unwrap()))
    });
    group.finish();
}

fn dgp(c: &mut Criterion) {
    c.bench_function("gen_iid J=K=50 n=100", |b| b.iter(|| black_box(gen_iid(&IidScenario::new(50, 50, 100), 4).unwrap())));
    c.bench_function("gen_dependent J=K=50 n=100", |b| {
        b.iter(|| black_box(gen_dependent(&DepScenario::new(50, 50, 100, 0.1), 5).unwrap()))
    });
}

criterion_group!(benches, lasso, newey_west, bootstrap, dgp);
criterion_main!(benches);
