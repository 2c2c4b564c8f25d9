use criterion::{criterion_group, criterion_main, Criterion};
use lgdfm::link::PairLink;
use lgdfm::model::MarginalGroup;
use lgdfm::smc::{mvn_rectangle_prob, run_sisr, SisrOptions};
use lgdfm::{fit, Family, FitOptions, Marginal};
use lgdfm_bench::{fixture, true_model};
use nalgebra::{DMatrix, DVector};
use std::hint::black_box;

fn links(c: &mut Criterion) {
    let a = Marginal::Poisson { lambda: 1.0 }
        .hermite_coefficients(100)
        .unwrap();
    let b = Marginal::NegBinomial { size: 3, p: 0.4 }
        .hermite_coefficients(100)
        .unwrap();
    c.bench_function("hermite coefficients poisson(10)", |bch| {
        bch.iter(|| {
            black_box(Marginal::Poisson { lambda: 10.0 })
                .hermite_coefficients(100)
                .unwrap()
        })
    });
    c.bench_function("pair link + inverse, M=200", |bch| {
        bch.iter(|| PairLink::build(black_box(&a), black_box(&b), 200).unwrap())
    });
}

fn estimation(c: &mut Criterion) {
    let (_, _, x) = fixture(15, 2, 200, MarginalGroup::Poisson);
    let fams = vec![Family::Poisson; 15];
    c.bench_function("fit d=15 r=2 T=200", |bch| {
        bch.iter(|| fit(black_box(&x), &fams, 2, 1, &FitOptions::default()).unwrap())
    });
}

fn particles(c: &mut Criterion) {
    let d = 15;
    let cov = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.3 });
    let lo = DVector::from_element(d, -0.5);
    let hi = DVector::from_element(d, 1.0);
    let mean = DVector::zeros(d);
    c.bench_function("rectangle probability d=15, 2^13 points", |bch| {
        bch.iter(|| mvn_rectangle_prob(&mean, &cov, &lo, &hi, 1 << 13, 7).unwrap())
    });

    let (model, x) = true_model(6, 2, MarginalGroup::NegBinomial);
    let window = x.rows(190, 10).into_owned();
    let opts = SisrOptions {
        particles: 200,
        ..Default::default()
    };
    let mut group = c.benchmark_group("sisr");
    group.sample_size(10);
    group.bench_function("d=6 N=200 window=10", |bch| {
        bch.iter(|| run_sisr(&window, &model, &opts, 3).unwrap())
    });
    group.finish();
}

criterion_group!(benches, links, estimation, particles);
criterion_main!(benches);
