//! Trainer plumbing: toy data, loss wiring, the update rule and clipping.

use axial_style::codec::{CodecConfig, FeatureTaps};
use axial_style::dit::DitConfig;
use axial_style::trainer::{self, toy_batch, train_step, TrainConfig, TrainState};
use axial_style::{Model, Rng, Tensor};

fn small() -> TrainConfig {
    TrainConfig {
        image_size: 16,
        steps: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn toy_batch_is_seeded_and_bounded() {
    let cfg = small();
    let a = toy_batch(&cfg).unwrap();
    let b = toy_batch(&cfg).unwrap();
    assert_eq!(a.content.data(), b.content.data());
    assert_eq!(a.content.shape(), &[4, 3, 16, 16]);
    assert_eq!(a.style.shape(), &[1, 3, 16, 16]);
    assert!(a.content.data().iter().chain(a.style.data()).all(|v| (0.0..=1.0).contains(v)));
    let other = toy_batch(&TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.content.data(), other.content.data());
}

#[test]
fn video_frames_pan_across_one_scene() {
    let cfg = TrainConfig { image_size: 32, ..small() };
    let batch = toy_batch(&cfg).unwrap();
    let plane = 32 * 32;
    let (f0, f1) = (&batch.content.data()[..3 * plane], &batch.content.data()[3 * plane..6 * plane]);
    // frame 1 is frame 0 shifted left by two pixels, noise aside
    let mut gap = 0.0f64;
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..30 {
                gap = gap.max((f1[(c * 32 + y) * 32 + x] - f0[(c * 32 + y) * 32 + x + 2]).abs());
            }
        }
    }
    assert!(gap < 0.25, "{gap}");
}

fn perturb_batch(t: &Tensor, start: usize, rng: &mut Rng) -> Tensor {
    let n = t.dim(0);
    let keep = t.narrow(0, 0, start).unwrap();
    let rest = rng.uniform_tensor(&[n - start, t.dim(1), t.dim(2), t.dim(3)], 0.0, 3.0);
    Tensor::concat(&[keep, rest], 0).unwrap()
}

#[test]
fn temporal_term_ignores_image_frames() {
    let mut rng = Rng::new(1);
    let mk = |rng: &mut Rng| {
        FeatureTaps([
            rng.uniform_tensor(&[4, 4, 8, 8], 0.0, 1.0),
            rng.uniform_tensor(&[4, 8, 4, 4], 0.0, 1.0),
            rng.uniform_tensor(&[4, 16, 2, 2], 0.0, 1.0),
            rng.uniform_tensor(&[4, 16, 1, 1], 0.0, 1.0),
        ])
    };
    let (c, cs) = (mk(&mut rng), mk(&mut rng));
    let base = trainer::video_temporal_loss(&c, &cs, 2).unwrap().item();
    let moved = |t: &FeatureTaps, rng: &mut Rng| FeatureTaps(t.0.clone().map(|tap| perturb_batch(&tap, 2, rng)));
    let (c2, cs2) = (moved(&c, &mut rng), moved(&cs, &mut rng));
    assert_eq!(trainer::video_temporal_loss(&c2, &cs2, 2).unwrap().item(), base);
    // a video frame does move it
    let mut v = cs.clone();
    v.0[2] = perturb_batch(&v.0[2], 1, &mut rng);
    assert_ne!(trainer::video_temporal_loss(&c, &v, 2).unwrap().item(), base);
}

#[test]
fn step_updates_decoder_and_transformer_only() {
    let cfg = small();
    let batch = toy_batch(&cfg).unwrap();
    let model = Model::init(cfg.dit.clone(), cfg.codec, 0).unwrap();
    let before = model.clone();
    let mut state = TrainState::new(model);
    let losses = train_step(&mut state, &batch, &cfg).unwrap();
    assert!(losses.total.is_finite() && losses.total > 0.0);
    let expected = cfg.weights.lambda_c * losses.content
        + cfg.weights.lambda_s * losses.style
        + losses.identity
        + cfg.weights.lambda_t * losses.temporal;
    assert!((losses.total - expected).abs() < 1e-9 * expected);
    for (a, b) in before.codec.encoder.layers.iter().zip(&state.model.codec.encoder.layers) {
        assert_eq!(a.weight.data(), b.weight.data());
        assert_eq!(a.bias.data(), b.bias.data());
    }
    let moved = before
        .trainable()
        .iter()
        .zip(state.model.trainable())
        .filter(|(a, b)| a.data() != b.data())
        .count();
    assert!(moved > before.trainable().len() / 2, "{moved} tensors moved");
}

/// First update with zero velocity is `-lr * scale * grad`.
#[test]
fn first_update_is_clipped_gradient_step() {
    let cfg = TrainConfig {
        clip_norm: Some(1e-3),
        ..small()
    };
    let batch = toy_batch(&cfg).unwrap();
    let model = Model::init(cfg.dit.clone(), cfg.codec, 2).unwrap();
    let before: Vec<Vec<f64>> = model.trainable().iter().map(Tensor::to_vec).collect();
    let mut state = TrainState::new(model);
    train_step(&mut state, &batch, &cfg).unwrap();
    let step: f64 = state
        .model
        .trainable()
        .iter()
        .zip(&before)
        .flat_map(|(a, b)| a.data().iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt();
    // with the norm clipped to c, the first step has length lr * c
    assert!((step - cfg.lr * 1e-3).abs() < 1e-12, "{step}");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig { steps: 0, ..small() },
        TrainConfig { lr: f64::NAN, ..small() },
        TrainConfig { momentum: 1.0, ..small() },
        TrainConfig { clip_norm: Some(0.0), ..small() },
        TrainConfig { n_video: 1, ..small() },
        TrainConfig { n_image: 3, ..small() },
        TrainConfig { image_size: 12, ..small() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    let solo = TrainConfig {
        n_image: 3,
        dit: DitConfig {
            unimodal: true,
            ..DitConfig::test_scale()
        },
        ..small()
    };
    assert!(solo.validate().is_ok());
}

#[test]
fn short_overfit_run_is_reproducible() {
    let cfg = small();
    let (a, ma) = trainer::overfit_check(&cfg).unwrap();
    let (b, mb) = trainer::overfit_check(&cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    assert!(a.encoder_unchanged);
    assert_eq!(ma.checkpoint_bytes(), mb.checkpoint_bytes());
    let csv = trainer::curve_csv(&a.curve);
    assert_eq!(csv.lines().count(), cfg.steps + 1);
    assert!(csv.starts_with("step,total,content,style,identity,temporal\n"));
}

#[test]
fn checkpoint_restores_a_trained_model() {
    let cfg = small();
    let (_, model) = trainer::overfit_check(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.udit");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    let img = Rng::new(3).uniform_tensor(&[2, 3, 16, 16], 0.0, 1.0);
    let style = Rng::new(4).uniform_tensor(&[1, 3, 16, 16], 0.0, 1.0);
    let a = model.stylize(&img, &style).unwrap().images;
    let b = back.stylize(&img, &style).unwrap().images;
    assert_eq!(a.data(), b.data());
    assert_eq!(back.codec_cfg, CodecConfig::test_scale());
}
