//! Batch gradient computation with the rayon pool against a single worker.
//!
//! With the default `parallel` feature both variants run through rayon; the
//! second is pinned to one thread. Building with `--no-default-features`
//! measures the plain sequential fallback under both names.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use speechcont::model::{Model, ModelConfig};
use speechcont::pipeline::{batch_gradients, ObjectiveMode};
use speechcont::selfcheck::toy_example;

fn bench_batch(c: &mut Criterion) {
    let (vocab, mels) = (12, 32);
    let mut cfg = ModelConfig::tiny(vocab, mels);
    cfg.decoder.lm_dim = 32;
    cfg.decoder.attn_heads = 4;
    cfg.decoder.hidden_dim = 64;
    let model: Model<f32> = Model::new(cfg).expect("valid config");
    let batch: Vec<_> = (0..8).map(|s| toy_example(s, mels, vocab)).collect();
    let run = || batch_gradients(&model, black_box(&batch), ObjectiveMode::Full, 0.1, 3, None).expect("finite loss");

    let mut group = c.benchmark_group("batch_gradients_8");
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().build().expect("thread pool");
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool");
        group.bench_function(format!("parallel_{}_threads", pool.current_num_threads()), |b| {
            b.iter(|| pool.install(run))
        });
        group.bench_function("sequential", |b| b.iter(|| single.install(run)));
    }
    #[cfg(not(feature = "parallel"))]
    {
        group.bench_function("sequential", |b| b.iter(run));
    }
    group.finish();
}

criterion_group!(benches, bench_batch);
criterion_main!(benches);
