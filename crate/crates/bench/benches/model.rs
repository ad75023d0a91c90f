use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use echovt_core::encoder::Frame;
use echovt_core::heads::SdMode;
use echovt_core::model::{Model, Preset, PresetName};
use echovt_core::pipeline::{predict_video, LrSchedule, TrainConfig, Trainer};
use echovt_core::sampling::Method;
use echovt_core::synth::{generate_dataset, PhantomConfig};

fn model(c: &mut Criterion) {
    let mut g = c.benchmark_group("model");
    g.sample_size(10);

    for name in [PresetName::Toy, PresetName::Reduced2] {
        let preset = Preset::new(name);
        let m = Model::new(preset, SdMode::Regression).unwrap();
        let store = m.init(&mut ChaCha8Rng::seed_from_u64(2));
        let s = preset.frame_size;
        let frame = Arc::new(Frame::new(s, s, (0..s * s).map(|i| (i * 37 % 251) as u8).collect()).unwrap());
        let n = preset.num_frames();
        let frames = vec![frame; n];
        let mask: Vec<bool> = (0..n).map(|i| i < n * 3 / 4).collect();
        g.bench_function(format!("predict clip {name}"), |b| {
            b.iter(|| m.predict(&store, black_box(&frames), &mask).unwrap())
        });
    }

    let preset = Preset::new(PresetName::Reduced2);
    let pc = PhantomConfig {
        frame_size: preset.frame_size,
        num_frames: (48, 64),
        seed: 3,
        ..PhantomConfig::default()
    };
    let videos: Vec<_> = generate_dataset(&pc, 4).unwrap().into_iter().map(|(v, _)| v).collect();
    let m = Model::new(preset, SdMode::Regression).unwrap();
    let store = m.init(&mut ChaCha8Rng::seed_from_u64(4));
    g.bench_function("predict video reduced2", |b| {
        b.iter(|| predict_video(&m, &store, black_box(&videos[0])).unwrap())
    });

    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        lr: 1e-3,
        schedule: LrSchedule::Constant,
        method: Method::Mirror,
        sd_mode: SdMode::Regression,
        seed: 5,
        ..TrainConfig::default()
    };
    g.bench_function("train epoch reduced2 (4 videos)", |b| {
        b.iter_batched(
            || Trainer::new(preset, cfg.clone()).unwrap(),
            |mut t| t.train_epoch(&videos).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
