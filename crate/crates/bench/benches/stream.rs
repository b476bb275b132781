use std::hint::black_box;

use cog_bench::{random_frames, random_model, reference_scale_engine};
use cog_core::objective::LossConfig;
use cog_core::trainer::loss_and_grads;
use cog_core::ModelConfig;
use criterion::{criterion_group, criterion_main, Criterion};

fn push_frame(c: &mut Criterion) {
    let mut engine = reference_scale_engine(0);
    let frames = random_frames(4096, engine.d_vis(), 1);
    // past the warm-up so every buffer is full
    for t in 0..256 {
        engine.push_frame(frames.row(t)).unwrap();
    }
    let mut t = 256;
    c.bench_function("stream/push_frame_reference_scale", |b| {
        b.iter(|| {
            if t == frames.shape()[0] {
                t = 0;
            }
            let r = engine.push_frame(black_box(frames.row(t))).unwrap();
            t += 1;
            r
        })
    });
}

fn batch_forward(c: &mut Criterion) {
    let m = random_model(ModelConfig::mini(), 2);
    let x = random_frames(256, m.config.d_vis, 3).cast::<f64>();
    c.bench_function("batch/error_probabilities_mini_T256", |b| {
        b.iter(|| m.error_probabilities(black_box(&x)).unwrap())
    });
    let labels: Vec<u8> = (0..256).map(|t| u8::from(t % 7 < 3)).collect();
    let loss = LossConfig::default();
    c.bench_function("train/loss_and_grads_mini_T256", |b| {
        b.iter(|| loss_and_grads(&m, black_box(&x), &labels, &loss).unwrap())
    });
}

criterion_group!(benches, push_frame, batch_forward);
criterion_main!(benches);
