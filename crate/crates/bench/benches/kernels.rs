use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use sagkit_bench::fixture;
use sagkit_core::audio::{griffin_lim, mel_spectrogram, MelConfig};
use sagkit_core::blocks::{build_condition, ModelConfig};
use sagkit_core::edm::{sample_seeded, Denoiser, EdmConfig, NetDenoiser};
use sagkit_core::semantic::extract_semantic;
use sagkit_core::training::{training_step, PreparedPair, TrainConfig};

use rand::SeedableRng;

fn front_end(c: &mut Criterion) {
    let f = fixture(ModelConfig::miniature(), 4.0);
    let mel = MelConfig::default();
    let spec = mel_spectrogram(&f.accompaniment, &mel).unwrap();
    let mut g = c.benchmark_group("front_end_4s");
    g.sample_size(20);
    g.bench_function("mel", |b| b.iter(|| mel_spectrogram(black_box(&f.accompaniment), &mel).unwrap()));
    g.bench_function("semantic", |b| b.iter(|| extract_semantic(black_box(&f.vocal)).unwrap()));
    g.bench_function("condition", |b| {
        b.iter(|| build_condition(&f.model, &f.store, black_box(&f.vocal)).unwrap())
    });
    g.bench_function("griffin_lim_16", |b| b.iter(|| griffin_lim(black_box(&spec), &mel, 16).unwrap()));
    g.finish();
}

fn sampler(c: &mut Criterion) {
    let f = fixture(ModelConfig::miniature(), 2.0);
    let mut g = c.benchmark_group("sampler_2s");
    g.sample_size(10);
    let base = EdmConfig::default();
    let den = NetDenoiser {
        model: &f.model,
        store: &f.store,
        prior: &f.prior,
        cfg: &base,
    };
    g.bench_function("denoiser_call", |b| b.iter(|| den.denoise(black_box(&f.prior), 1.0).unwrap()));
    for steps in [2usize, 5, 10] {
        let edm = EdmConfig { steps, ..base.clone() };
        let den = NetDenoiser { cfg: &edm, ..den };
        g.bench_with_input(BenchmarkId::new("steps", steps), &steps, |b, _| {
            b.iter(|| sample_seeded(&den, f.prior.shape(), &edm, 3).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::miniature();
    let f = fixture(cfg.clone(), 2.0);
    let pair = sagkit_core::data::synth_pair_seeded(2, 2.0).unwrap();
    let prepared = PreparedPair::new(&pair, &cfg.mel).unwrap();
    let tc = TrainConfig::default();
    let edm = EdmConfig::default();
    let mut g = c.benchmark_group("training_2s");
    g.sample_size(10);
    g.bench_function("forward_backward", |b| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        b.iter(|| training_step(&f.model, &f.store, &tc, &edm, &prepared, &mut rng).unwrap())
    });
    g.finish();
}

criterion_group!(benches, front_end, sampler, train_step);
criterion_main!(benches);
