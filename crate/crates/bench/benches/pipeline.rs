use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use searchforge_bench as gen;
use searchforge_core::curation::{curate, CurationConfig, F1Oracle};
use searchforge_core::eval::f1;
use searchforge_core::export::{rl_reward, RewardConfig};
use searchforge_core::gateways::extract_text;
use searchforge_core::orchestrator::ProtocolTokens;
use searchforge_core::sampler::sample_diverse;

fn sampler(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample_diverse");
    for n in [1_000usize, 10_000, 50_000] {
        let data = gen::corpus(n, 12, n / 4, 1);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &data, |b, data| {
            b.iter(|| sample_diverse(black_box(data), n / 10).unwrap())
        });
    }
    group.finish();
}

fn answer_f1(c: &mut Criterion) {
    let pairs = gen::answer_pairs(1_000, 2);
    c.bench_function("f1/1000_pairs", |b| {
        b.iter(|| pairs.iter().map(|(p, g)| f1(black_box(p), black_box(g))).sum::<f64>())
    });
}

fn html(c: &mut Criterion) {
    let mut group = c.benchmark_group("extract_text");
    for paragraphs in [10usize, 200] {
        let page = gen::html_page(paragraphs, 3);
        group.throughput(Throughput::Bytes(page.len() as u64));
        group.bench_with_input(BenchmarkId::from_parameter(paragraphs), &page, |b, page| {
            b.iter(|| extract_text(black_box(page), 8_000))
        });
    }
    group.finish();
}

fn reward(c: &mut Criterion) {
    let tokens = ProtocolTokens::default();
    let cfg = RewardConfig::default();
    let t = gen::trajectory(8, 300, 4);
    c.bench_function("rl_reward/8_searches", |b| b.iter(|| rl_reward(black_box(&t), &tokens, &cfg)));
}

fn curation(c: &mut Criterion) {
    let tokens = ProtocolTokens::default();
    let cfg = CurationConfig::default();
    let candidates: Vec<_> = (0..10)
        .map(|i| {
            let mut t = gen::trajectory(i % 4, 80, i as u64);
            t.candidate_index = i;
            t.id = format!("bench#{i}");
            t
        })
        .collect();
    c.bench_function("curate/10_candidates", |b| {
        b.iter(|| curate(black_box(&candidates), &tokens, &cfg, &F1Oracle { threshold: 0.7 }))
    });
}

criterion_group!(benches, sampler, answer_f1, html, reward, curation);
criterion_main!(benches);
