//! Feature extraction throughput: STFT and the mel filterbank.

use captioner_bench::{bench_frontend_config, test_clip};
use captioner_core::frontend;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn mel_pipeline(c: &mut Criterion) {
    let cfg = bench_frontend_config();
    let clip = test_clip(5.0);
    c.bench_function("stft_mag_5s", |b| {
        b.iter(|| frontend::stft_mag::<f32>(black_box(&clip), &cfg).unwrap())
    });
    let spec = frontend::stft_mag::<f32>(&clip, &cfg).unwrap();
    c.bench_function("log_mel_5s", |b| {
        b.iter(|| frontend::log_mel(black_box(&spec), &cfg).unwrap())
    });
    c.bench_function("extract_mel_5s", |b| {
        b.iter(|| frontend::extract_mel::<f32>(black_box(&clip), &cfg).unwrap())
    });
}

criterion_group!(benches, mel_pipeline);
criterion_main!(benches);
