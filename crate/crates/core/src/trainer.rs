//! Desk-scale training loop: momentum SGD on the decoder and transformer
//! while the encoder stays fixed, over a procedurally generated batch.
//!
//! The content batch is `n_video` consecutive frames followed by `n_image`
//! still images. Each step runs three passes: content under the style image,
//! content as its own style (every frame styled by itself), and the style
//! image as its own content.

use std::fmt::Write as _;

use serde::Serialize;

use crate::codec::{self, CodecConfig, FeatureTaps};
use crate::dit::{DitConfig, GridKind, TokenGrid};
use crate::error::{Error, Result};
use crate::losses::{self, IdentityInputs, LossParts, LossWeights};
use crate::model::Model;
use crate::numcore::{Rng, Tensor};
use crate::params::ParamSet;

/// Divergence threshold relative to the first step's loss.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Guards against the early gradient spikes of the norm-valued losses.
pub const DEFAULT_CLIP_NORM: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    pub dit: DitConfig,
    pub codec: CodecConfig,
    pub n_video: usize,
    pub n_image: usize,
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 1e-3,
            momentum: 0.9,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            seed: 0,
            weights: LossWeights::default(),
            dit: DitConfig::test_scale(),
            codec: CodecConfig::test_scale(),
            n_video: 2,
            n_image: 2,
            image_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need lr >= 0 and momentum in [0, 1), got lr={} momentum={}",
                self.lr, self.momentum
            )));
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config(format!("clip norm must be positive, got {:?}", self.clip_norm)));
        }
        if self.n_video < 2 {
            return Err(Error::Config("at least two video frames are needed for the temporal term".into()));
        }
        if !self.dit.unimodal && self.dit.interaction_enabled && self.n_video != self.n_image {
            return Err(Error::Config(format!(
                "video/image interaction needs equal halves, got {} video and {} image frames",
                self.n_video, self.n_image
            )));
        }
        if self.image_size == 0 || self.image_size % codec::TOKEN_STRIDE != 0 {
            return Err(Error::Config(format!("image size {} must be a multiple of 8", self.image_size)));
        }
        self.weights.validate()?;
        self.dit.validate()
    }

    pub fn frames(&self) -> usize {
        self.n_video + self.n_image
    }
}

/// Content frames `[n_video + n_image, 3, S, S]` and one style image.
#[derive(Clone, Debug)]
pub struct ToyBatch {
    pub content: Tensor,
    pub style: Tensor,
}

/// Smooth colour ramp, a checkerboard and uniform noise, blended with
/// seed-dependent weights; `shift` translates the pattern horizontally.
fn toy_image(rng: &mut Rng, size: usize, shift: usize, noise_seed: u64) -> Vec<f64> {
    let ramp: [f64; 3] = [rng.uniform(), rng.uniform(), rng.uniform()];
    let tint: [f64; 3] = [rng.uniform(), rng.uniform(), rng.uniform()];
    let cell = 4 + rng.below(8);
    let mix = rng.uniform_in(0.2, 0.6);
    let mut noise = Rng::new(noise_seed);
    let mut out = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let xs = x + shift;
                let u = xs as f64 / size as f64;
                let v = y as f64 / size as f64;
                let smooth = 0.5 + 0.5 * (std::f64::consts::TAU * (ramp[c] * u + (1.0 - ramp[c]) * v)).sin();
                let check = if (xs / cell + y / cell) % 2 == 0 { tint[c] } else { 1.0 - tint[c] };
                let n = noise.uniform();
                out[(c * size + y) * size + x] = (1.0 - mix) * smooth + mix * check * 0.8 + 0.2 * mix * n;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

pub fn toy_batch(cfg: &TrainConfig) -> Result<ToyBatch> {
    let size = cfg.image_size;
    let mut rng = Rng::new(cfg.seed ^ 0x746f_795f_6461_7461);
    let mut content = Vec::new();
    // consecutive video frames: one scene panning by 2 px per frame, shared noise
    let mut scene = rng.fork();
    let noise_seed = rng.next_u64();
    for f in 0..cfg.n_video {
        content.extend(toy_image(&mut scene.clone(), size, 2 * f, noise_seed));
    }
    for _ in 0..cfg.n_image {
        let seed = rng.next_u64();
        content.extend(toy_image(&mut rng.fork(), size, 0, seed));
    }
    scene = rng.fork();
    let style_seed = rng.next_u64();
    let style = toy_image(&mut scene, size, 0, style_seed);
    Ok(ToyBatch {
        content: Tensor::new(content, &[cfg.frames(), 3, size, size])?,
        style: Tensor::new(style, &[1, 3, size, size])?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLosses {
    pub content: f64,
    pub style: f64,
    pub identity: f64,
    pub temporal: f64,
    pub total: f64,
}

/// Batch features that do not depend on trainable weights.
struct FixedInputs {
    taps_c: FeatureTaps,
    taps_s: FeatureTaps,
    grid_c: TokenGrid,
    grid_s: TokenGrid,
}

fn fixed_inputs(model: &Model, batch: &ToyBatch) -> Result<FixedInputs> {
    let taps_c = model.encode(&batch.content)?;
    let taps_s = model.encode(&batch.style)?;
    let grid_c = codec::tokenize(&taps_c)?;
    let grid_s = codec::tokenize(&taps_s)?.with_kind(GridKind::Style);
    Ok(FixedInputs {
        taps_c,
        taps_s,
        grid_c,
        grid_s,
    })
}

/// Loss terms for the current weights, with a live tape.
pub fn loss_parts(model: &Model, batch: &ToyBatch, cfg: &TrainConfig) -> Result<LossParts> {
    let x = fixed_inputs(model, batch)?;
    let cs = model.transform(&x.grid_c, &x.grid_s)?.images;
    let taps_cs = model.encode(&cs)?;

    // identity passes: every content frame styled by itself, and the style
    // image run through the single-sequence path as its own content
    let cc = model.transform(&x.grid_c, &x.grid_c.with_kind(GridKind::Style))?.images;
    let taps_cc = model.encode(&cc)?;
    let solo = model.with_dit_config(DitConfig {
        unimodal: true,
        ..model.dit_cfg.clone()
    });
    let ss = solo.transform(&x.grid_s.with_kind(GridKind::Content), &x.grid_s)?.images;
    let taps_ss = model.encode(&ss)?;

    let content = losses::content_loss(&taps_cs, &x.taps_c)?;
    let style = losses::style_loss(&taps_cs, &x.taps_s)?;
    let identity = losses::identity_loss(
        &IdentityInputs {
            cc: &cc,
            c: &batch.content,
            ss: &ss,
            s: &batch.style,
            taps_cc: &taps_cc,
            taps_c: &x.taps_c,
            taps_ss: &taps_ss,
            taps_s: &x.taps_s,
        },
        &cfg.weights,
    )?;
    let temporal = video_temporal_loss(&x.taps_c, &taps_cs, cfg.n_video)?;
    Ok(LossParts {
        content,
        style,
        identity,
        temporal,
    })
}

/// Temporal term over consecutive pairs among the first `n_video` frames.
pub fn video_temporal_loss(taps_c: &FeatureTaps, taps_cs: &FeatureTaps, n_video: usize) -> Result<Tensor> {
    let pairs = n_video - 1;
    losses::temporal_loss(
        &taps_c.narrow_batch(0, pairs)?,
        &taps_c.narrow_batch(1, pairs)?,
        &taps_cs.narrow_batch(0, pairs)?,
        &taps_cs.narrow_batch(1, pairs)?,
    )
}

pub struct TrainState {
    pub model: Model,
    velocity: Vec<Vec<f64>>,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let velocity = model.trainable().iter().map(|t| vec![0.0; t.numel()]).collect();
        TrainState { model, velocity, step: 0 }
    }

    /// Gradients of the most recent step, in trainable order.
    fn apply_update(&mut self, params: &[Tensor], cfg: &TrainConfig) -> Result<()> {
        let grads: Vec<Option<Tensor>> = params.iter().map(|p| p.grad()).collect();
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let mut next = Vec::with_capacity(params.len());
        for ((p, v), grad) in params.iter().zip(&mut self.velocity).zip(&grads) {
            let g = grad.as_ref().map(|g| g.data());
            let data: Vec<f64> = p
                .data()
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    v[i] = cfg.momentum * v[i] + g.map_or(0.0, |g| scale * g[i]);
                    w - cfg.lr * v[i]
                })
                .collect();
            next.push(Tensor::param(data, p.shape())?);
        }
        self.model.replace_trainable(&next)
    }
}

/// Forward, backward and one momentum-SGD update. Returns the losses
/// measured before the update.
pub fn train_step(state: &mut TrainState, batch: &ToyBatch, cfg: &TrainConfig) -> Result<StepLosses> {
    let params = state.model.trainable();
    let parts = loss_parts(&state.model, batch, cfg)?;
    let total = losses::total_loss(&parts, &cfg.weights)?;
    total.backward()?;
    state.apply_update(&params, cfg)?;
    state.step += 1;
    Ok(StepLosses {
        content: parts.content.item(),
        style: parts.style.item(),
        identity: parts.identity.item(),
        temporal: parts.temporal.item(),
        total: total.item(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OverfitReport {
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `final_loss / initial_loss`.
    pub ratio: f64,
    pub encoder_unchanged: bool,
    pub curve: Vec<StepLosses>,
}

/// Trains for `cfg.steps` steps on the seeded toy batch. `final_loss` is
/// measured after the last update.
pub fn overfit_check(cfg: &TrainConfig) -> Result<(OverfitReport, Model)> {
    cfg.validate()?;
    let batch = toy_batch(cfg)?;
    let model = Model::init(cfg.dit.clone(), cfg.codec, cfg.seed)?;
    let encoder_before: Vec<Vec<u64>> = encoder_bits(&model);
    let mut state = TrainState::new(model);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let losses = train_step(&mut state, &batch, cfg)?;
        if let Some(first) = curve.first().map(|l: &StepLosses| l.total) {
            if losses.total > DIVERGENCE_FACTOR * first {
                return Err(Error::Divergence {
                    step,
                    loss: losses.total,
                    initial: first,
                });
            }
        }
        curve.push(losses);
    }
    let parts = loss_parts(&state.model, &batch, cfg)?;
    let final_loss = losses::total_loss(&parts, &cfg.weights)?.item();
    let initial_loss = curve[0].total;
    let report = OverfitReport {
        seed: cfg.seed,
        initial_loss,
        final_loss,
        ratio: final_loss / initial_loss,
        encoder_unchanged: encoder_bits(&state.model) == encoder_before,
        curve,
    };
    Ok((report, state.model))
}

fn encoder_bits(model: &Model) -> Vec<Vec<u64>> {
    model
        .codec
        .encoder
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

pub fn curve_csv(curve: &[StepLosses]) -> String {
    let mut out = String::from("step,total,content,style,identity,temporal\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{},{},{}", l.total, l.content, l.style, l.identity, l.temporal);
    }
    out
}
