//! Hot kernels under the active execution mode.
//!
//! Benchmark ids carry the mode, so running once with default features and
//! once with `--no-default-features` leaves both sets side by side in
//! `target/criterion`:
//!
//! ```text
//! cargo bench -p blockshare --bench kernels
//! cargo bench -p blockshare --bench kernels --no-default-features
//! ```

use std::hint::black_box;

use blockshare::inference::perplexity;
use blockshare::linalg::svd;
use blockshare::par::is_parallel;
use blockshare::selection::{select_bases_in, DistanceMetricKind};
use blockshare::training::{loss_and_grads, synth_corpus};
use blockshare::{Matrix, Model, ModelConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mode() -> &'static str {
    if is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn toy() -> Model {
    Model::init_random(ModelConfig::toy(), 1).unwrap()
}

fn linalg(c: &mut Criterion) {
    let mut g = c.benchmark_group("linalg");
    for n in [16, 64] {
        let w = random(n, n, n as u64);
        g.bench_with_input(BenchmarkId::new(format!("svd/{}", mode()), n), &w, |b, w| b.iter(|| svd(black_box(w)).unwrap()));
    }
    let (a, w) = (random(256, 64, 2), random(64, 256, 3));
    g.bench_function(format!("matmul_256x64x256/{}", mode()), |b| b.iter(|| black_box(&a).matmul(black_box(&w)).unwrap()));
    g.finish();
}

fn model(c: &mut Criterion) {
    let m = toy();
    let corpus = synth_corpus(3, 20_000, 256);
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    for batch in [4, 16] {
        let seqs: Vec<&[u32]> = corpus.tokens.chunks(64).take(batch).collect();
        g.bench_with_input(BenchmarkId::new(format!("loss_and_grads/{}", mode()), batch), &seqs, |b, s| {
            b.iter(|| loss_and_grads(black_box(&m), s).unwrap())
        });
    }
    g.bench_function(format!("perplexity_4k/{}", mode()), |b| {
        b.iter(|| perplexity(black_box(&m), &corpus.tokens[..4096], 64).unwrap())
    });
    g.bench_function(format!("select_bases/{}", mode()), |b| {
        b.iter(|| select_bases_in(black_box(&m), &[3, 5], 8, DistanceMetricKind::Proposed).unwrap())
    });
    g.finish();
}

criterion_group!(benches, linalg, model);
criterion_main!(benches);
