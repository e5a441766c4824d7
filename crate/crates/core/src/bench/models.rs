//! Op graphs for the attention layers and transformer blocks. Each builder
//! issues the same primitive sequence, with the same scope labels, as its
//! runtime counterpart.

use super::graph::{OpGraph, Sym};
use crate::attention::AmsaVariant;
use crate::dit::{DitConfig, FFN_EXPANSION};
use crate::error::{Error, Result};

const SWAP_HW: [usize; 4] = [0, 2, 1, 3];
const TO_NCHW: [usize; 4] = [0, 3, 1, 2];
const TO_NHWC: [usize; 4] = [0, 2, 3, 1];

fn split_heads(g: &mut OpGraph, x: &Sym, heads: usize) -> Result<Sym> {
    let r = x.rank();
    let d = x.dim(r - 1);
    let mut shape = x.shape[..r - 1].to_vec();
    shape.extend([heads, d / heads]);
    let mut perm: Vec<usize> = (0..r - 2).collect();
    perm.extend([r - 1, r - 2, r]);
    let y = g.reshape(x, &shape)?;
    Ok(g.permute(&y, &perm))
}

fn merge_heads(g: &mut OpGraph, x: &Sym) -> Result<Sym> {
    let r = x.rank();
    let mut perm: Vec<usize> = (0..r - 3).collect();
    perm.extend([r - 2, r - 3, r - 1]);
    let y = g.permute(x, &perm);
    let mut shape = y.shape[..r - 2].to_vec();
    shape.push(x.dim(r - 3) * x.dim(r - 1));
    g.reshape(&y, &shape)
}

/// Multi-head attention over the second-to-last axis.
pub fn msa(g: &mut OpGraph, q: &Sym, k: &Sym, v: &Sym, heads: usize) -> Result<Sym> {
    let d = q.dim(q.rank() - 1);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
    }
    g.scoped("msa", |g| {
        let w: Vec<Sym> = ["wq", "wk", "wv", "wo"].iter().map(|n| g.param(n, &[d, d])).collect();
        let (qp, kp, vp) = g.scoped("proj", |g| -> Result<_> {
            Ok((g.matmul(q, &w[0])?, g.matmul(k, &w[1])?, g.matmul(v, &w[2])?))
        })?;
        let qh = split_heads(g, &qp, heads)?;
        let kh = split_heads(g, &kp, heads)?;
        let vh = split_heads(g, &vp, heads)?;
        let r = kh.rank();
        let mut perm: Vec<usize> = (0..r - 2).collect();
        perm.extend([r - 1, r - 2]);
        let kt = g.permute(&kh, &perm);
        let scores = g.scoped("score", |g| g.matmul(&qh, &kt))?;
        let attn = g.scoped("softmax", |g| {
            let s = g.scale(&scores);
            g.softmax_last(&s)
        });
        let ctx = g.scoped("score", |g| g.matmul(&attn, &vh))?;
        g.scoped("proj", |g| {
            let m = merge_heads(g, &ctx)?;
            g.matmul(&m, &w[3])
        })
    })
}

/// Axial attention on `[T, H, W, D]` grids; `k`/`v` may carry one frame.
pub fn amsa(g: &mut OpGraph, q: &Sym, k: &Sym, v: &Sym, heads: usize, variant: AmsaVariant) -> Result<Sym> {
    g.scoped("amsa", |g| {
        let (qs, ks, vs) = (g.permute(q, &SWAP_HW), g.permute(k, &SWAP_HW), g.permute(v, &SWAP_HW));
        let out = g.scoped("height", |g| msa(g, &qs, &ks, &vs, heads))?;
        let back = g.permute(&out, &SWAP_HW);
        let f = g.layer_norm(&back);
        let (keys, values) = match variant {
            AmsaVariant::Standard => (k, &f),
            AmsaVariant::VariantA => (&f, &f),
            AmsaVariant::VariantB => (k, v),
        };
        let out = g.scoped("width", |g| msa(g, &f, keys, values, heads))?;
        Ok(g.layer_norm(&out))
    })
}

fn pointwise_conv(g: &mut OpGraph, x: &Sym) -> Result<Sym> {
    let d = x.dim(3);
    let nchw = g.permute(x, &TO_NCHW);
    let y = g.conv2d(&nchw, d, 1)?;
    Ok(g.permute(&y, &TO_NHWC))
}

fn ffn(g: &mut OpGraph, x: &Sym) -> Result<Sym> {
    let d = x.dim(x.rank() - 1);
    let hidden = FFN_EXPANSION * d;
    g.scoped("ffn", |g| {
        let w1 = g.param("w1", &[d, hidden]);
        let b1 = g.param("b1", &[hidden]);
        let w2 = g.param("w2", &[hidden, d]);
        let b2 = g.param("b2", &[d]);
        let h = g.matmul(x, &w1)?;
        let h = g.add(&h, &b1)?;
        let h = g.gelu(&h);
        let o = g.matmul(&h, &w2)?;
        g.add(&o, &b2)
    })
}

pub fn encoder_block(g: &mut OpGraph, x_q: &Sym, x_kv: &Sym, heads: usize, variant: AmsaVariant) -> Result<Sym> {
    g.scoped("encoder_block", |g| {
        let q = pointwise_conv(g, x_q)?;
        let k = pointwise_conv(g, x_kv)?;
        let v = pointwise_conv(g, x_kv)?;
        let attn = amsa(g, &q, &k, &v, heads, variant)?;
        let r = g.add(&attn, x_q)?;
        let s1 = g.layer_norm(&r);
        let f = ffn(g, &s1)?;
        let r = g.add(&f, &s1)?;
        Ok(g.layer_norm(&r))
    })
}

pub fn decoder_block(g: &mut OpGraph, content: &Sym, style: &Sym, heads: usize, variant: AmsaVariant) -> Result<Sym> {
    g.scoped("decoder_block", |g| {
        let q = pointwise_conv(g, content)?;
        let k = pointwise_conv(g, style)?;
        let v = pointwise_conv(g, style)?;
        let a1 = amsa(g, &q, &k, &v, heads, variant)?;
        let r = g.add(&a1, content)?;
        let s2 = g.layer_norm(&r);
        let q = pointwise_conv(g, &s2)?;
        let k = pointwise_conv(g, style)?;
        let v = pointwise_conv(g, style)?;
        let a2 = amsa(g, &q, &k, &v, heads, variant)?;
        let r = g.add(&a2, &s2)?;
        let s1 = g.layer_norm(&r);
        let f = ffn(g, &s1)?;
        let r = g.add(&f, &s1)?;
        Ok(g.layer_norm(&r))
    })
}

pub fn interaction(g: &mut OpGraph, seq: &Sym, cfg: &DitConfig) -> Result<Sym> {
    if !cfg.interaction_enabled {
        return Ok(seq.clone());
    }
    g.scoped("interaction", |g| {
        if cfg.unimodal {
            return encoder_block(g, seq, seq, cfg.heads, cfg.variant);
        }
        let t = seq.dim(0);
        if t % 2 != 0 {
            return Err(Error::Config(format!("bimodal interaction needs an even frame count, got {t}")));
        }
        let video = g.narrow(seq, 0, 0, t / 2)?;
        let image = g.narrow(seq, 0, t / 2, t / 2)?;
        let out_v = encoder_block(g, &video, &image, cfg.heads, cfg.variant)?;
        let out_i = encoder_block(g, &image, &video, cfg.heads, cfg.variant)?;
        Ok(g.concat(&[&out_v, &out_i], 0))
    })
}

pub fn dit_forward(g: &mut OpGraph, content: &Sym, style: &Sym, cfg: &DitConfig) -> Result<Sym> {
    cfg.validate()?;
    let mut c = content.clone();
    g.scoped("content_encoder", |g| -> Result<()> {
        for _ in 0..cfg.n_c {
            c = encoder_block(g, &c, &c, cfg.heads, cfg.variant)?;
        }
        Ok(())
    })?;
    let mut s = style.clone();
    g.scoped("style_encoder", |g| -> Result<()> {
        for _ in 0..cfg.n_s {
            s = encoder_block(g, &s, &s, cfg.heads, cfg.variant)?;
        }
        Ok(())
    })?;
    c = interaction(g, &c, cfg)?;
    g.scoped("decoder", |g| -> Result<()> {
        for _ in 0..cfg.n_t {
            c = decoder_block(g, &c, &s, cfg.heads, cfg.variant)?;
        }
        Ok(())
    })?;
    Ok(c)
}
