use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use promptmatch_core::environment::state_representation;
use promptmatch_core::{EmbeddingSet, EmbeddingVector, EpisodeState, MatchingNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingSet {
    let vectors = (0..n)
        .map(|_| EmbeddingVector::normalized((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    EmbeddingSet::new(vectors).unwrap()
}

// (d, hidden, out, pool size): desk and published sizes
const SHAPES: [(usize, usize, usize, usize); 2] = [(32, 64, 32, 40), (384, 1024, 512, 100)];

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for (d, hidden, out, n) in SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MatchingNet::init(0, d, hidden, out).unwrap();
        let set = random_set(&mut rng, n, d);
        let g = EmbeddingVector::normalized((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let l = state_representation(&EpisodeState::initial(1), &g, &set).unwrap();
        let cache = net.key_cache(&set).unwrap();
        group.bench_with_input(BenchmarkId::new("cached", d), &d, |b, _| {
            b.iter(|| net.forward_with(black_box(&cache), black_box(&l), &[]).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("key_cache", d), &d, |b, _| {
            b.iter(|| net.key_cache(black_box(&set)).unwrap())
        });
    }
    group.finish();
}

fn gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("grad_log_prob");
    group.sample_size(20);
    for (d, hidden, out, n) in SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = MatchingNet::init(0, d, hidden, out).unwrap();
        let set = random_set(&mut rng, n, d);
        let g = EmbeddingVector::normalized((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let l = state_representation(&EpisodeState::initial(1), &g, &set).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| net.grad_log_prob(black_box(&set), black_box(&l), &[], 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, gradient);
criterion_main!(benches);
