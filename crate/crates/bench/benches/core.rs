use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ptr_bench::{paired, queries, rng, sentence};
use ptr_core::consistency::ngram_sim;
use ptr_core::corpus::dedupe;
use ptr_core::ptrloss::{grad_check, ToyInstance};
use ptr_core::stats::{wilcoxon_with_method, Method};
use ptr_core::{Alternative, BetaSchedule, LossConfig};

fn bench_ngram(c: &mut Criterion) {
    let mut r = rng(1);
    let a = sentence(&mut r, 200);
    let b = sentence(&mut r, 200);
    c.bench_function("ngram_sim/200w", |bch| bch.iter(|| ngram_sim(black_box(&a), black_box(&b), 2)));
}

fn bench_dedupe(c: &mut Criterion) {
    let mut g = c.benchmark_group("dedupe");
    for n in [100usize, 1000] {
        let qs = queries(2, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &qs, |bch, qs| {
            bch.iter(|| dedupe(qs.clone(), 0.9).expect("valid threshold"))
        });
    }
    g.finish();
}

fn bench_wilcoxon(c: &mut Criterion) {
    let mut g = c.benchmark_group("wilcoxon");
    for n in [12usize, 25] {
        let pairs = paired(3, n);
        g.bench_with_input(BenchmarkId::new("exact", n), &pairs, |bch, p| {
            bch.iter(|| wilcoxon_with_method(p, Alternative::Greater, Method::Exact).expect("exact"))
        });
    }
    let big = paired(4, 5000);
    g.bench_function("normal/5000", |bch| {
        bch.iter(|| wilcoxon_with_method(&big, Alternative::Greater, Method::NormalApprox).expect("normal"))
    });
    g.finish();
}

fn bench_grad_check(c: &mut Criterion) {
    let mut r = rng(5);
    let inst = ToyInstance::random(&mut r, 3, 6);
    let cfg = LossConfig::new([0.8, 0.1, 0.1], BetaSchedule::Linear).expect("valid lambdas");
    c.bench_function("grad_check/3steps", |bch| bch.iter(|| grad_check(black_box(&inst), &cfg, 1e-6).expect("grad")));
}

criterion_group!(benches, bench_ngram, bench_dedupe, bench_wilcoxon, bench_grad_check);
criterion_main!(benches);
