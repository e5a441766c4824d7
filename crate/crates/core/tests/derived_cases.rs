//! Hand-stepped traces, composition oracles and closed-form loss cases.

use axial_style::attention::{amsa, amsa_height_stage, msa, AmsaParams, AmsaVariant, AttnParams, LayerNormParams};
use axial_style::codec::{self, CodecConfig, CodecParams, FeatureTaps};
use axial_style::dit::{
    decoder_block, encoder_block, video_image_interaction, DecoderBlockParams, DitConfig, EncoderBlockParams, Ffn,
    GridKind, PointwiseConv, TokenGrid,
};
use axial_style::losses::{self, IdentityInputs, LossParts, LossWeights};
use axial_style::trainer::{toy_batch, train_step, TrainConfig, TrainState};
use axial_style::{Model, Rng, Tensor};

const EPS: f64 = 1e-5;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Row vector times a `[D_in, D_out]` matrix.
fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (n, m) = (w.dim(0), w.dim(1));
    (0..m).map(|j| (0..n).map(|i| x[i] * w.data()[i * m + j]).sum()).collect()
}

fn layer_norm(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * p.gamma.data()[i] + p.beta.data()[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// `weight [D_out, D_in, 1, 1]` applied to one token.
fn pointwise(x: &[f64], c: &PointwiseConv) -> Vec<f64> {
    let (o, i) = (c.weight.dim(0), c.weight.dim(1));
    (0..o)
        .map(|oc| c.bias.data()[oc] + (0..i).map(|ic| c.weight.data()[oc * i + ic] * x[ic]).sum::<f64>())
        .collect()
}

fn ffn(x: &[f64], f: &Ffn) -> Vec<f64> {
    let h: Vec<f64> = vecmat(x, &f.w1).iter().zip(f.b1.data()).map(|(a, b)| gelu(a + b)).collect();
    vecmat(&h, &f.w2).iter().zip(f.b2.data()).map(|(a, b)| a + b).collect()
}

fn tokens(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.dim(t.rank() - 1)).map(<[f64]>::to_vec).collect()
}

fn map_tokens(t: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let out: Vec<f64> = tokens(t).iter().flat_map(|x| f(x)).collect();
    Tensor::new(out, t.shape()).unwrap()
}

fn zip_tokens(a: &Tensor, b: &Tensor, f: impl Fn(&[f64], &[f64]) -> Vec<f64>) -> Tensor {
    let out: Vec<f64> = tokens(a).iter().zip(tokens(b)).flat_map(|(x, y)| f(x, &y)).collect();
    Tensor::new(out, a.shape()).unwrap()
}

fn add(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a + b).collect()
}

#[test]
fn single_token_axial_attention_is_projection_chain() {
    let mut rng = Rng::new(1);
    let p = AmsaParams::init(8, 2, &mut rng).unwrap();
    let q = rng.uniform_tensor(&[1, 1, 1, 8], -1.0, 1.0);
    let k = rng.uniform_tensor(&[1, 1, 1, 8], -1.0, 1.0);
    let v = rng.uniform_tensor(&[1, 1, 1, 8], -1.0, 1.0);
    // one key: the attention weight is exactly 1, leaving wo · wv · value
    let through = |x: &[f64], a: &AttnParams| vecmat(&vecmat(x, &a.wv), &a.wo);
    let f = layer_norm(&through(v.data(), &p.height), &p.height_norm);
    for (variant, value) in [
        (AmsaVariant::Standard, f.clone()),
        (AmsaVariant::VariantA, f.clone()),
        (AmsaVariant::VariantB, v.to_vec()),
    ] {
        let want = layer_norm(&through(&value, &p.width), &p.width_norm);
        let got = amsa(&q, &k, &v, &p, variant).unwrap();
        assert!(max_diff(got.data(), &want) < 1e-12, "{variant}");
    }
}

#[test]
fn height_stage_is_columnwise_attention() {
    let mut rng = Rng::new(2);
    let (t, h, w, d) = (2, 4, 3, 8);
    let p = AmsaParams::init(d, 2, &mut rng).unwrap();
    let q = rng.uniform_tensor(&[t, h, w, d], -1.0, 1.0);
    let k = rng.uniform_tensor(&[t, h, w, d], -1.0, 1.0);
    let v = rng.uniform_tensor(&[t, h, w, d], -1.0, 1.0);
    let stage = amsa_height_stage(&q, &k, &v, &p).unwrap();
    let column = |g: &Tensor, f: usize, x: usize| {
        let data: Vec<f64> = (0..h).flat_map(|y| g.data()[((f * h + y) * w + x) * d..][..d].to_vec()).collect();
        Tensor::new(data, &[h, d]).unwrap()
    };
    for f in 0..t {
        for x in 0..w {
            let alone = msa(&column(&q, f, x), &column(&k, f, x), &column(&v, f, x), &p.height).unwrap();
            let want = map_tokens(&alone, |tok| layer_norm(tok, &p.height_norm));
            assert!(max_diff(column(&stage, f, x).data(), want.data()) < 1e-12);
        }
    }
}

fn grid(t: Tensor, kind: GridKind) -> TokenGrid {
    TokenGrid::new(t, kind).unwrap()
}

fn encoder_oracle(q: &Tensor, kv: &Tensor, p: &EncoderBlockParams, variant: AmsaVariant) -> Tensor {
    let qc = map_tokens(q, |x| pointwise(x, &p.conv_q));
    let kc = map_tokens(kv, |x| pointwise(x, &p.conv_k));
    let vc = map_tokens(kv, |x| pointwise(x, &p.conv_v));
    let attn = amsa(&qc, &kc, &vc, &p.amsa, variant).unwrap();
    let s1 = zip_tokens(&attn, q, |a, b| layer_norm(&add(a, b), &p.norm_attn));
    map_tokens(&s1, |x| layer_norm(&add(&ffn(x, &p.ffn), x), &p.norm_ffn))
}

#[test]
fn encoder_block_matches_composition() {
    let mut rng = Rng::new(3);
    let p = EncoderBlockParams::init(16, 2, &mut rng).unwrap();
    let x = rng.uniform_tensor(&[2, 4, 4, 16], -1.0, 1.0);
    let other = rng.uniform_tensor(&[1, 4, 4, 16], -1.0, 1.0);
    for variant in AmsaVariant::ALL {
        let got = encoder_block(&grid(x.clone(), GridKind::Content), &grid(x.clone(), GridKind::Content), &p, variant).unwrap();
        assert!(max_diff(got.data.data(), encoder_oracle(&x, &x, &p, variant).data()) < 1e-12);
        let got = encoder_block(&grid(x.clone(), GridKind::Content), &grid(other.clone(), GridKind::Style), &p, variant).unwrap();
        assert!(max_diff(got.data.data(), encoder_oracle(&x, &other, &p, variant).data()) < 1e-12);
    }
}

#[test]
fn decoder_block_matches_composition() {
    let mut rng = Rng::new(4);
    let p = DecoderBlockParams::init(16, 2, &mut rng).unwrap();
    let c = rng.uniform_tensor(&[2, 3, 4, 16], -1.0, 1.0);
    let s = rng.uniform_tensor(&[1, 3, 4, 16], -1.0, 1.0);
    let variant = AmsaVariant::Standard;
    let a1 = amsa(
        &map_tokens(&c, |x| pointwise(x, &p.conv_q1)),
        &map_tokens(&s, |x| pointwise(x, &p.conv_k1)),
        &map_tokens(&s, |x| pointwise(x, &p.conv_v1)),
        &p.amsa1,
        variant,
    )
    .unwrap();
    let s2 = zip_tokens(&a1, &c, |a, b| layer_norm(&add(a, b), &p.norm1));
    let a2 = amsa(
        &map_tokens(&s2, |x| pointwise(x, &p.conv_q2)),
        &map_tokens(&s, |x| pointwise(x, &p.conv_k2)),
        &map_tokens(&s, |x| pointwise(x, &p.conv_v2)),
        &p.amsa2,
        variant,
    )
    .unwrap();
    let s1 = zip_tokens(&a2, &s2, |a, b| layer_norm(&add(a, b), &p.norm2));
    let want = map_tokens(&s1, |x| layer_norm(&add(&ffn(x, &p.ffn), x), &p.norm3));
    let got = decoder_block(&grid(c, GridKind::Content), &grid(s, GridKind::Style), &p, variant).unwrap();
    assert!(max_diff(got.data.data(), want.data()) < 1e-12);
}

#[test]
fn interaction_halves_are_cross_encoder_calls() {
    let mut rng = Rng::new(5);
    let cfg = DitConfig::test_scale();
    let blocks = vec![
        EncoderBlockParams::init(16, 2, &mut rng).unwrap(),
        EncoderBlockParams::init(16, 2, &mut rng).unwrap(),
    ];
    let seq = rng.uniform_tensor(&[4, 2, 3, 16], -1.0, 1.0);
    let out = video_image_interaction(&grid(seq.clone(), GridKind::Content), &blocks, &cfg).unwrap();
    let video = grid(seq.narrow(0, 0, 2).unwrap(), GridKind::Content);
    let image = grid(seq.narrow(0, 2, 2).unwrap(), GridKind::Content);
    let v = encoder_block(&video, &image, &blocks[0], cfg.variant).unwrap();
    let i = encoder_block(&image, &video, &blocks[1], cfg.variant).unwrap();
    assert!(max_diff(out.data.narrow(0, 0, 2).unwrap().data(), v.data.data()) < 1e-12);
    assert!(max_diff(out.data.narrow(0, 2, 2).unwrap().data(), i.data.data()) < 1e-12);
}

fn const_taps(batch: usize, value: f64) -> FeatureTaps {
    FeatureTaps([
        Tensor::full(&[batch, 4, 8, 8], value),
        Tensor::full(&[batch, 8, 4, 4], value),
        Tensor::full(&[batch, 16, 2, 2], value),
        Tensor::full(&[batch, 16, 1, 1], value),
    ])
}

fn shifted(t: &FeatureTaps, k: f64) -> FeatureTaps {
    FeatureTaps(t.0.clone().map(|x| x.add_scalar(k).unwrap()))
}

#[test]
fn content_loss_of_unit_offset_is_sum_of_root_sizes() {
    let a = FeatureTaps(const_taps(1, 0.0).0.map(|t| Rng::new(6).uniform_tensor(t.shape(), 0.0, 1.0)));
    let want: f64 = a.iter().map(|t| (t.numel() as f64).sqrt()).sum();
    let got = losses::content_loss(&shifted(&a, 1.0), &a).unwrap().item();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn style_loss_of_mean_shift_is_channel_root() {
    let s = FeatureTaps(const_taps(1, 0.0).0.map(|t| Rng::new(7).uniform_tensor(t.shape(), 0.0, 1.0)));
    let k: f64 = -0.35;
    let want: f64 = s.iter().map(|t| (t.dim(1) as f64).sqrt() * k.abs()).sum();
    let got = losses::style_loss(&shifted(&s, k), &s).unwrap().item();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn identity_pixel_offset_is_weighted_root_count() {
    let c = Rng::new(8).uniform_tensor(&[1, 3, 8, 8], 0.0, 1.0);
    let cc = c.add_scalar(1.0).unwrap();
    let s = Rng::new(9).uniform_tensor(&[1, 3, 8, 8], 0.0, 1.0);
    let taps = const_taps(1, 0.5);
    let w = LossWeights::default();
    let got = losses::identity_loss(
        &IdentityInputs {
            cc: &cc,
            c: &c,
            ss: &s,
            s: &s,
            taps_cc: &taps,
            taps_c: &taps,
            taps_ss: &taps,
            taps_s: &taps,
        },
        &w,
    )
    .unwrap()
    .item();
    assert!((got - 0.1 * (3.0 * 64.0f64).sqrt()).abs() < 1e-12);
}

#[test]
fn gram_of_constant_maps() {
    let one = Tensor::full(&[1, 1, 4, 4], 1.0);
    let two = Tensor::full(&[1, 1, 4, 4], 2.0);
    assert_eq!(losses::gram(&two).unwrap().data(), &[4.0]);
    let taps = |t: &Tensor| FeatureTaps([t.clone(), t.clone(), t.clone(), t.clone()]);
    let d = losses::gram_texture_diff(&taps(&one), &taps(&two)).unwrap().item();
    assert!((d - 4.0 * 3.0).abs() < 1e-12);
}

#[test]
fn color_diff_of_unit_offset() {
    let a = Rng::new(10).uniform_tensor(&[2, 3, 8, 8], 0.0, 1.0);
    let b = a.add_scalar(1.0).unwrap();
    let got = losses::color_diff(&b, &a).unwrap().item();
    assert!((got - (3.0 * 64.0f64).sqrt()).abs() < 1e-12);
}

#[test]
fn metrics_average_item_losses() {
    let mut rng = Rng::new(11);
    let a = FeatureTaps(const_taps(2, 0.0).0.map(|t| rng.uniform_tensor(t.shape(), 0.0, 1.0)));
    let b = FeatureTaps(const_taps(2, 0.0).0.map(|t| rng.uniform_tensor(t.shape(), 0.0, 1.0)));
    let item = |i| losses::content_loss(&a.narrow_batch(i, 1).unwrap(), &b.narrow_batch(i, 1).unwrap()).unwrap().item();
    assert!((losses::metric_dc(&a, &b).unwrap() - (item(0) + item(1)) / 2.0).abs() < 1e-12);
    assert_eq!(losses::metric_dc(&a, &a).unwrap(), 0.0);
    assert_eq!(losses::metric_ds(&a, &a).unwrap(), 0.0);
}

#[test]
fn total_loss_gradient_is_the_weights() {
    let parts: Vec<Tensor> = [0.3, 1.7, 2.2, 0.9].iter().map(|&v| Tensor::scalar(v).unwrap().detach_param()).collect();
    let w = LossWeights::default();
    let total = losses::total_loss(
        &LossParts {
            content: parts[0].clone(),
            style: parts[1].clone(),
            identity: parts[2].clone(),
            temporal: parts[3].clone(),
        },
        &w,
    )
    .unwrap();
    total.backward().unwrap();
    let grads: Vec<f64> = parts.iter().map(|p| p.grad().unwrap().item()).collect();
    assert_eq!(grads, vec![w.lambda_c, w.lambda_s, 1.0, w.lambda_t]);
}

#[test]
fn zero_temporal_weight_drops_the_term() {
    let cfg = TrainConfig {
        image_size: 16,
        weights: LossWeights {
            lambda_t: 0.0,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    let batch = toy_batch(&cfg).unwrap();
    let mut state = TrainState::new(Model::init(cfg.dit.clone(), cfg.codec, 1).unwrap());
    for _ in 0..2 {
        let l = train_step(&mut state, &batch, &cfg).unwrap();
        assert!(l.temporal > 0.0);
        assert_eq!(l.total, 0.1 * l.content + 1.5 * l.style + l.identity);
    }
}

#[test]
fn encoder_taps_follow_eight_pixel_shifts() {
    let cfg = CodecConfig::test_scale();
    let params = CodecParams::init(&cfg, &mut Rng::new(12)).unwrap();
    let (h, w) = (16, 96);
    let a = Rng::new(13).uniform_tensor(&[1, 3, h, w], 0.0, 1.0);
    // b is a moved right by 8 pixels; its first 8 columns are unrelated
    let filler = Rng::new(14).uniform_tensor(&[1, 3, h, w], 0.0, 1.0);
    let b = Tensor::from_fn(&[1, 3, h, w], |i| {
        let x = i % w;
        if x < 8 { filler.data()[i] } else { a.data()[i - 8] }
    })
    .unwrap();
    let (ta, tb) = (codec::encode(&a, &params.encoder).unwrap(), codec::encode(&b, &params.encoder).unwrap());
    for (level, (pa, pb)) in ta.iter().zip(tb.iter()).enumerate() {
        let scale = 1 << level;
        let (ch, th, tw) = (pa.dim(1), pa.dim(2), pa.dim(3));
        let step = 8 / scale;
        // columns whose receptive field stays inside both images
        let (lo, hi) = (40 / scale, (w - 40) / scale - step);
        let mut worst = 0.0f64;
        for c in 0..ch {
            for y in 0..th {
                for x in lo..hi {
                    let va = pa.data()[(c * th + y) * tw + x];
                    let vb = pb.data()[(c * th + y) * tw + x + step];
                    worst = worst.max((va - vb).abs());
                }
            }
        }
        assert!(worst < 1e-12, "tap {level}: {worst}");
    }
}
