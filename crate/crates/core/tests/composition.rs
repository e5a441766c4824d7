//! Attention, codec and transformer wiring against direct constructions.

use axial_style::attention::{amsa, msa, AmsaParams, AmsaVariant, AttnParams};
use axial_style::codec::{self, CodecConfig, CodecParams};
use axial_style::dit::{dit_forward, DitConfig, DitParams, GridKind, TokenGrid};
use axial_style::{Model, Rng, Tensor};

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn matvec_row(x: &[f64], w: &Tensor) -> Vec<f64> {
    let d = w.dim(0);
    (0..d).map(|j| (0..d).map(|i| x[i] * w.data()[i * d + j]).sum()).collect()
}

/// Per-head scaled dot-product attention written as loops over `[N, D]` rows.
fn ref_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], p: &AttnParams) -> Vec<Vec<f64>> {
    let d = p.dim();
    let dh = d / p.heads;
    let qp: Vec<_> = q.iter().map(|r| matvec_row(r, &p.wq)).collect();
    let kp: Vec<_> = k.iter().map(|r| matvec_row(r, &p.wk)).collect();
    let vp: Vec<_> = v.iter().map(|r| matvec_row(r, &p.wv)).collect();
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for h in 0..p.heads {
        let cols = h * dh..(h + 1) * dh;
        for (n, qn) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|km| cols.clone().map(|c| qn[c] * km[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[n][c] = e.iter().zip(&vp).map(|(a, vm)| a / z * vm[c]).sum();
            }
        }
    }
    ctx.iter().map(|r| matvec_row(r, &p.wo)).collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.dim(t.rank() - 1);
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

#[test]
fn msa_matches_loop_attention() {
    let mut rng = Rng::new(1);
    for (n, m, d, heads) in [(5, 5, 8, 2), (3, 7, 12, 3), (1, 4, 4, 1)] {
        let p = AttnParams::init(d, heads, &mut rng).unwrap();
        let q = rng.uniform_tensor(&[n, d], -2.0, 2.0);
        let k = rng.uniform_tensor(&[m, d], -2.0, 2.0);
        let v = rng.uniform_tensor(&[m, d], -2.0, 2.0);
        let got = msa(&q, &k, &v, &p).unwrap();
        let want = ref_attention(&rows(&q), &rows(&k), &rows(&v), &p);
        let want = Tensor::new(want.concat(), &[n, d]).unwrap();
        assert!(max_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn msa_broadcasts_a_single_key_batch() {
    let mut rng = Rng::new(2);
    let p = AttnParams::init(8, 2, &mut rng).unwrap();
    let q = rng.uniform_tensor(&[3, 4, 8], -1.0, 1.0);
    let k = rng.uniform_tensor(&[1, 5, 8], -1.0, 1.0);
    let v = rng.uniform_tensor(&[1, 5, 8], -1.0, 1.0);
    let shared = msa(&q, &k, &v, &p).unwrap();
    let rep = |t: &Tensor| Tensor::concat(&[t.clone(), t.clone(), t.clone()], 0).unwrap();
    let repeated = msa(&q, &rep(&k), &rep(&v), &p).unwrap();
    assert_eq!(shared.data(), repeated.data());
}

#[test]
fn amsa_treats_frames_independently() {
    let mut rng = Rng::new(3);
    let p = AmsaParams::init(8, 2, &mut rng).unwrap();
    let q = rng.uniform_tensor(&[3, 4, 5, 8], -1.0, 1.0);
    let k = rng.uniform_tensor(&[3, 4, 5, 8], -1.0, 1.0);
    let v = rng.uniform_tensor(&[3, 4, 5, 8], -1.0, 1.0);
    for variant in AmsaVariant::ALL {
        let whole = amsa(&q, &k, &v, &p, variant).unwrap();
        for f in 0..3 {
            let frame = |t: &Tensor| t.narrow(0, f, 1).unwrap();
            let alone = amsa(&frame(&q), &frame(&k), &frame(&v), &p, variant).unwrap();
            assert!(max_diff(&frame(&whole), &alone) < 1e-13, "{variant} frame {f}");
        }
    }
}

#[test]
fn amsa_variants_differ() {
    let mut rng = Rng::new(4);
    let p = AmsaParams::init(8, 2, &mut rng).unwrap();
    let q = rng.uniform_tensor(&[1, 3, 3, 8], -1.0, 1.0);
    let k = rng.uniform_tensor(&[1, 3, 3, 8], -1.0, 1.0);
    let v = rng.uniform_tensor(&[1, 3, 3, 8], -1.0, 1.0);
    let outs: Vec<Tensor> = AmsaVariant::ALL.iter().map(|&var| amsa(&q, &k, &v, &p, var).unwrap()).collect();
    assert!(max_diff(&outs[0], &outs[1]) > 1e-6);
    assert!(max_diff(&outs[0], &outs[2]) > 1e-6);
    assert!(max_diff(&outs[1], &outs[2]) > 1e-6);
}

#[test]
fn amsa_rejects_mismatched_grids() {
    let mut rng = Rng::new(5);
    let p = AmsaParams::init(8, 2, &mut rng).unwrap();
    let q = Tensor::zeros(&[2, 3, 3, 8]);
    assert!(amsa(&q, &Tensor::zeros(&[3, 3, 3, 8]), &Tensor::zeros(&[3, 3, 3, 8]), &p, AmsaVariant::Standard).is_err());
    assert!(amsa(&q, &Tensor::zeros(&[1, 3, 4, 8]), &Tensor::zeros(&[1, 3, 4, 8]), &p, AmsaVariant::Standard).is_err());
    assert!(amsa(&q, &Tensor::zeros(&[1, 3, 3, 8]), &Tensor::zeros(&[2, 3, 3, 8]), &p, AmsaVariant::Standard).is_err());
}

#[test]
fn tokens_are_the_deepest_tap_channels() {
    let cfg = CodecConfig::test_scale();
    let params = CodecParams::init(&cfg, &mut Rng::new(6)).unwrap();
    let img = Rng::new(7).uniform_tensor(&[2, 3, 16, 24], 0.0, 1.0);
    let taps = codec::encode(&img, &params.encoder).unwrap();
    let phi4 = taps.get(3);
    assert_eq!(phi4.shape(), &[2, cfg.embed_dim, 2, 3]);
    let grid = codec::tokenize(&taps).unwrap();
    assert_eq!(grid.data.shape(), &[2, 2, 3, cfg.embed_dim]);
    let d = cfg.embed_dim;
    for t in 0..2 {
        for y in 0..2 {
            for x in 0..3 {
                for c in 0..d {
                    let token = grid.data.data()[((t * 2 + y) * 3 + x) * d + c];
                    let feature = phi4.data()[((t * d + c) * 2 + y) * 3 + x];
                    assert_eq!(token, feature);
                }
            }
        }
    }
    assert_eq!(codec::detokenize(&grid).unwrap().data(), phi4.data());
}

#[test]
fn tap_shapes_halve_per_level() {
    let cfg = CodecConfig::test_scale();
    let params = CodecParams::init(&cfg, &mut Rng::new(8)).unwrap();
    let img = Rng::new(9).uniform_tensor(&[1, 3, 32, 16], 0.0, 1.0);
    let taps = codec::encode(&img, &params.encoder).unwrap();
    for (i, (tap, c)) in taps.iter().zip(cfg.tap_channels()).enumerate() {
        assert_eq!(tap.shape(), &[1, c, 32 >> i, 16 >> i]);
        assert!(tap.data().iter().all(|&v| v >= 0.0));
    }
    assert!(codec::encode(&Rng::new(1).uniform_tensor(&[1, 3, 12, 16], 0.0, 1.0), &params.encoder).is_err());
}

#[test]
fn decode_restores_pixel_resolution() {
    let cfg = CodecConfig::test_scale();
    let params = CodecParams::init(&cfg, &mut Rng::new(10)).unwrap();
    let grid = TokenGrid::new(Rng::new(11).uniform_tensor(&[2, 2, 3, cfg.embed_dim], 0.0, 1.0), GridKind::Content).unwrap();
    let img = codec::decode(&grid, &params.decoder).unwrap();
    assert_eq!(img.shape(), &[2, 3, 16, 24]);
}

#[test]
fn encoder_receives_no_gradient() {
    let model = Model::init(DitConfig::test_scale(), CodecConfig::test_scale(), 12).unwrap();
    let img = Rng::new(13).uniform_tensor(&[1, 3, 16, 16], 0.0, 1.0).detach_param();
    let taps = model.encode(&img).unwrap();
    taps.get(3).sum().unwrap().backward().unwrap();
    assert!(img.grad().is_some());
    for layer in &model.codec.encoder.layers {
        assert!(layer.weight.grad().is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    }
}

fn grids(rng: &mut Rng, t: usize, d: usize) -> (TokenGrid, TokenGrid) {
    (
        TokenGrid::new(rng.uniform_tensor(&[t, 2, 3, d], -1.0, 1.0), GridKind::Content).unwrap(),
        TokenGrid::new(rng.uniform_tensor(&[1, 2, 3, d], -1.0, 1.0), GridKind::Style).unwrap(),
    )
}

#[test]
fn dit_preserves_content_grid_shape() {
    let cfg = DitConfig::test_scale();
    let mut rng = Rng::new(14);
    let params = DitParams::init(&cfg, &mut rng).unwrap();
    let (c, s) = grids(&mut rng, 4, cfg.embed_dim);
    let out = dit_forward(&c, &s, &cfg, &params).unwrap();
    assert_eq!(out.data.shape(), c.data.shape());
}

#[test]
fn odd_frame_counts_need_the_single_sequence_path() {
    let cfg = DitConfig::test_scale();
    let mut rng = Rng::new(15);
    let params = DitParams::init(&cfg, &mut rng).unwrap();
    let (c, s) = grids(&mut rng, 3, cfg.embed_dim);
    assert!(dit_forward(&c, &s, &cfg, &params).is_err());
    let solo = DitConfig { unimodal: true, ..cfg.clone() };
    assert!(dit_forward(&c, &s, &solo, &params).is_ok());
    let bare = DitConfig { interaction_enabled: false, ..cfg };
    assert!(dit_forward(&c, &s, &bare, &params).is_ok());
}

#[test]
fn interaction_mixes_the_two_halves() {
    let cfg = DitConfig::test_scale();
    let mut rng = Rng::new(16);
    let params = DitParams::init(&cfg, &mut rng).unwrap();
    let (c, s) = grids(&mut rng, 2, cfg.embed_dim);
    let base = dit_forward(&c, &s, &cfg, &params).unwrap();
    // perturb only the second frame; the first output frame must move
    let mut data = c.data.to_vec();
    let half = data.len() / 2;
    data[half..].iter_mut().for_each(|v| *v += 0.5);
    let moved = TokenGrid::new(Tensor::new(data, c.data.shape()).unwrap(), GridKind::Content).unwrap();
    let out = dit_forward(&moved, &s, &cfg, &params).unwrap();
    let first = |g: &TokenGrid| g.data.narrow(0, 0, 1).unwrap();
    assert!(max_diff(&first(&base), &first(&out)) > 1e-6);

    let bare = DitConfig { interaction_enabled: false, ..cfg };
    let a = dit_forward(&c, &s, &bare, &params).unwrap();
    let b = dit_forward(&moved, &s, &bare, &params).unwrap();
    assert_eq!(first(&a).data(), first(&b).data());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let model = Model::init(DitConfig::test_scale(), CodecConfig::test_scale(), 17).unwrap();
    let bytes = model.checkpoint_bytes();
    let back = Model::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.checkpoint_bytes(), bytes);
    assert_eq!(back.dit_cfg, model.dit_cfg);
    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0xff;
    assert!(Model::from_checkpoint_bytes(&corrupt).is_err());
    assert!(Model::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
}
