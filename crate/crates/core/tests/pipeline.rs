use std::time::Instant;

use echovt_core::heads::{SdMode, SdOutput};
use echovt_core::metrics::{extract_indices, MetricsReport, VideoResult};
use echovt_core::model::{Preset, PresetName};
use echovt_core::pipeline::{evaluate, predict_video, score_video, Checkpoint, LrSchedule, TrainConfig, TrainStatus, Trainer, VideoPrediction};
use echovt_core::sampling::{Method, VideoRecord};
use echovt_core::synth::{generate_dataset, PhantomConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn videos(preset: &Preset, count: usize, seed: u64) -> Vec<VideoRecord> {
    let cfg = PhantomConfig {
        frame_size: preset.frame_size,
        num_frames: (36, 48),
        cycle_length: (12, 20),
        seed,
        ..PhantomConfig::default()
    };
    generate_dataset(&cfg, count).unwrap().into_iter().map(|(v, _)| v).collect()
}

fn config(epochs: usize, mode: SdMode) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        lr: 1e-3,
        schedule: LrSchedule::Cosine,
        method: Method::GuidedRandom,
        sd_mode: mode,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_same_run() {
    let preset = Preset::new(PresetName::Toy);
    let data = videos(&preset, 6, 1);
    let run = || {
        let mut t = Trainer::new(preset, config(2, SdMode::Regression)).unwrap();
        let out = t.run(&data, &data[..2], |_, _| {}).unwrap();
        (out.history, t.params().clone())
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let preset = Preset::new(PresetName::Toy);
    let data = videos(&preset, 4, 2);
    let mut cfg = config(1, SdMode::Classification);
    cfg.lr = 0.0;
    let mut t = Trainer::new(preset, cfg).unwrap();
    let before = t.params().clone();
    let out = t.run(&data, &[], |_, _| {}).unwrap();
    assert_eq!(out.status, TrainStatus::Completed);
    assert_eq!(&before, t.params());
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let preset = Preset::new(PresetName::Toy);
    let data = videos(&preset, 4, 3);
    let mut t = Trainer::new(preset, config(1, SdMode::Regression)).unwrap();
    t.run(&data, &[], |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    t.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, t.checkpoint());
    let a = evaluate(t.model(), t.params(), &data).unwrap();
    let b = evaluate(&loaded.model().unwrap(), &loaded.params, &data).unwrap();
    assert_eq!(a.results, b.results);
    assert_eq!(a.results.len(), data.len());
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let preset = Preset::new(PresetName::Toy);
    let data = videos(&preset, 4, 4);
    let mut straight = Trainer::new(preset, config(3, SdMode::Regression)).unwrap();
    let full = straight.run(&data, &[], |_, _| {}).unwrap();

    let mut first = Trainer::new(preset, config(3, SdMode::Regression)).unwrap();
    first.train_epoch(&data).unwrap();
    let mut resumed = Trainer::resume(first.checkpoint(), config(3, SdMode::Regression)).unwrap();
    let rest = resumed.run(&data, &[], |_, _| {}).unwrap();

    assert_eq!(rest.history[..], full.history[1..]);
    assert_eq!(straight.params(), resumed.params());
}

#[test]
fn resume_rejects_mode_change() {
    let preset = Preset::new(PresetName::Toy);
    let t = Trainer::new(preset, config(1, SdMode::Regression)).unwrap();
    assert!(Trainer::resume(t.checkpoint(), config(2, SdMode::Classification)).is_err());
}

#[test]
fn oracle_signals_score_perfectly() {
    let cfg = PhantomConfig {
        frame_size: 28,
        // below the subsampling threshold, so labels keep their exact frames
        num_frames: (64, 120),
        seed: 9,
        ..PhantomConfig::default()
    };
    let results: Vec<VideoResult> = generate_dataset(&cfg, 12)
        .unwrap()
        .iter()
        .map(|(v, truth)| {
            // +1 at ED volume, -1 at ES volume
            let sd: Vec<f64> = (0..v.num_frames())
                .map(|i| 2.0 * (truth.volume(i) - truth.esv) / (truth.edv - truth.esv) - 1.0)
                .collect();
            let indices = extract_indices(&SdOutput::Regression(sd.clone()), &vec![true; sd.len()]).unwrap();
            let pred = VideoPrediction {
                id: v.id.clone(),
                sd: SdOutput::Regression(sd),
                ef_percent: v.ef_percent,
                indices,
                fps: v.fps,
                subsampled: false,
            };
            score_video(v, &pred)
        })
        .collect();
    let r = MetricsReport::from_results(&results).unwrap();
    assert_eq!(r.videos, 12);
    assert_eq!(r.rejected_count, 0);
    assert_eq!(r.afd_es.unwrap().mean, 0.0);
    assert_eq!(r.afd_ed.unwrap().mean, 0.0);
    assert_eq!(r.ef.mae, 0.0);
    assert_eq!(r.ef.r2, Some(1.0));
}

#[test]
fn reduced_model_inference_is_fast() {
    let preset = Preset::new(PresetName::Reduced2);
    let model = echovt_core::model::Model::new(preset, SdMode::Regression).unwrap();
    let store = model.init(&mut ChaCha8Rng::seed_from_u64(5));
    let v = &videos(&preset, 1, 6)[0];
    predict_video(&model, &store, v).unwrap();
    let start = Instant::now();
    let p = predict_video(&model, &store, v).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "{elapsed:?}");
    assert!(p.ef_percent > 0.0 && p.ef_percent < 100.0);
}
