//! Parallel vs sequential throughput for the data-parallel inner loops:
//! per-sample gradient computation within a batch, and per-sample decoding.
//!
//! `map_ordered` fans out over rayon when the `parallel` feature is on (the
//! default) and merges results in input order; `map_ordered_seq` is the
//! sequential reference. Both produce identical results, so this suite is
//! purely about speed.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use qfe_core::answer::TaskMode;
use qfe_core::config::Config;
use qfe_core::data::PreparedSample;
use qfe_core::model::Model;
use qfe_core::par::{map_ordered, map_ordered_seq};
use qfe_core::synth::{generate_synthetic, SyntheticSpec};
use qfe_core::train::{build_vocabs, prepare_all};

struct Fixture {
    model: Model,
    batch: Vec<PreparedSample>,
}

fn fixture() -> Fixture {
    let spec = SyntheticSpec {
        seed: 5,
        num_samples: 16,
        mode: TaskMode::Rc,
        ..SyntheticSpec::default()
    };
    let samples = generate_synthetic(&spec).unwrap();
    let (vocab, chars) = build_vocabs(&samples, None);
    let cfg = Config { d_c: 32, word_dim: 24, char_channels: 8, seed: 5, ..Config::desk() };
    let model = Model::new(&cfg, vocab.len(), chars.len()).unwrap();
    let batch = prepare_all(&samples, &vocab, &chars, cfg.truncation_limit).unwrap();
    Fixture { model, batch }
}

fn bench_batch_gradients(c: &mut Criterion) {
    let f = fixture();
    let mut group = c.benchmark_group("batch_gradients_16");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || (),
            |_| map_ordered(&f.batch, |_, s| f.model.sample_grads(s, None).unwrap().total),
            BatchSize::PerIteration,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || (),
            |_| map_ordered_seq(&f.batch, |_, s| f.model.sample_grads(s, None).unwrap().total),
            BatchSize::PerIteration,
        )
    });
    group.finish();
}

fn bench_batch_decode(c: &mut Criterion) {
    let f = fixture();
    let mut group = c.benchmark_group("batch_decode_16");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || (),
            |_| map_ordered(&f.batch, |_, s| f.model.predict(s).unwrap().evidence.len()),
            BatchSize::PerIteration,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || (),
            |_| map_ordered_seq(&f.batch, |_, s| f.model.predict(s).unwrap().evidence.len()),
            BatchSize::PerIteration,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_batch_decode);
criterion_main!(benches);
