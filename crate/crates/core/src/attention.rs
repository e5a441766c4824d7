//! Multi-head attention and its axial (height-then-width) factorization.
//!
//! Projections use the row-vector convention `x · W` with `W: [D, D]`, and
//! there are no positional encodings anywhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::cost;
use crate::numcore::{Rng, Tensor, LAYER_NORM_EPS};

/// Head count used at full scale (D = 512).
pub const DEFAULT_HEADS: usize = 8;

/// Q/K/V/output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

impl AttnParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: usize) -> Result<Self> {
        let d = wq.shape().first().copied().unwrap_or(0);
        for (name, w) in [("wq", &wq), ("wk", &wk), ("wv", &wv), ("wo", &wo)] {
            if w.shape() != [d, d] {
                return Err(Error::shape("AttnParams", format!("{name} is {:?}, expected [{d}, {d}]", w.shape())));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("embedding dim {d} is not divisible by {heads} heads")));
        }
        Ok(AttnParams { wq, wk, wv, wo, heads })
    }

    pub fn init(d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let mut w = || rng.init_param(&[d, d], d);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        AttnParams::new(wq, wk, wv, wo, heads)
    }

    pub fn dim(&self) -> usize {
        self.wq.dim(0)
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}

/// Affine parameters of a layer norm over the embedding axis.
#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(&[d]).detach_param(),
            beta: Tensor::zeros(&[d]).detach_param(),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// Parameters of one axial layer: an attention + norm per axis.
#[derive(Clone, Debug)]
pub struct AmsaParams {
    pub height: AttnParams,
    pub height_norm: LayerNormParams,
    pub width: AttnParams,
    pub width_norm: LayerNormParams,
}

impl AmsaParams {
    pub fn init(d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(AmsaParams {
            height: AttnParams::init(d, heads, rng)?,
            height_norm: LayerNormParams::init(d),
            width: AttnParams::init(d, heads, rng)?,
            width_norm: LayerNormParams::init(d),
        })
    }
}

/// Wiring of the second (width-axis) attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AmsaVariant {
    /// Q = V = first-stage output, K = original keys.
    #[default]
    Standard,
    /// Q = K = V = first-stage output.
    VariantA,
    /// Q = first-stage output, K and V = original keys and values.
    VariantB,
}

impl AmsaVariant {
    pub const ALL: [AmsaVariant; 3] = [AmsaVariant::Standard, AmsaVariant::VariantA, AmsaVariant::VariantB];

    pub fn code(self) -> u32 {
        match self {
            AmsaVariant::Standard => 0,
            AmsaVariant::VariantA => 1,
            AmsaVariant::VariantB => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(AmsaVariant::Standard),
            1 => Ok(AmsaVariant::VariantA),
            2 => Ok(AmsaVariant::VariantB),
            _ => Err(Error::Format(format!("unknown AMSA variant code {code}"))),
        }
    }
}

impl FromStr for AmsaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(AmsaVariant::Standard),
            "a" => Ok(AmsaVariant::VariantA),
            "b" => Ok(AmsaVariant::VariantB),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected standard, a or b)"))),
        }
    }
}

impl fmt::Display for AmsaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AmsaVariant::Standard => "standard",
            AmsaVariant::VariantA => "a",
            AmsaVariant::VariantB => "b",
        })
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    // [.., N, D] -> [.., h, N, dh]
    let r = x.rank();
    let d = x.dim(r - 1);
    let mut shape = x.shape()[..r - 1].to_vec();
    shape.extend([heads, d / heads]);
    let mut perm: Vec<usize> = (0..r - 2).collect();
    perm.extend([r - 1, r - 2, r]);
    x.reshape(&shape)?.permute(&perm)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    // [.., h, N, dh] -> [.., N, D]
    let r = x.rank();
    let mut perm: Vec<usize> = (0..r - 3).collect();
    perm.extend([r - 2, r - 3, r - 1]);
    let y = x.permute(&perm)?;
    let mut shape = y.shape()[..r - 2].to_vec();
    shape.push(x.dim(r - 3) * x.dim(r - 1));
    y.reshape(&shape)
}

/// Scaled dot-product multi-head attention over the second-to-last axis.
///
/// `q: [.., N, D]`, `k, v: [.., M, D]`; leading dims broadcast, which is how a
/// single style frame serves every content frame. Scores are scaled by
/// `1/sqrt(D/h)`.
pub fn msa(q: &Tensor, k: &Tensor, v: &Tensor, p: &AttnParams) -> Result<Tensor> {
    let d = p.dim();
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() < 2 || t.shape()[t.rank() - 1] != d {
            return Err(Error::shape(
                "msa",
                format!("{name} has shape {:?}, expected [.., N, {d}]", t.shape()),
            ));
        }
    }
    if k.dim(k.rank() - 2) != v.dim(v.rank() - 2) {
        return Err(Error::shape(
            "msa",
            format!("k {:?} and v {:?} disagree on sequence length", k.shape(), v.shape()),
        ));
    }
    let h = p.heads;
    let scale = 1.0 / ((d / h) as f64).sqrt();
    cost::scope("msa", || {
        let (qp, kp, vp) = cost::scope("proj", || -> Result<_> {
            Ok((q.matmul(&p.wq)?, k.matmul(&p.wk)?, v.matmul(&p.wv)?))
        })?;
        let (qh, kh, vh) = (split_heads(&qp, h)?, split_heads(&kp, h)?, split_heads(&vp, h)?);
        let scores = cost::scope("score", || qh.matmul(&kh.transpose_last()?))?;
        let attn = cost::scope("softmax", || scores.scale(scale)?.softmax_last())?;
        let ctx = cost::scope("score", || attn.matmul(&vh))?;
        cost::scope("proj", || merge_heads(&ctx)?.matmul(&p.wo))
    })
}

fn check_axial(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    let rank4 = |t: &Tensor| t.rank() == 4;
    if !(rank4(q) && rank4(k) && rank4(v)) {
        return Err(Error::shape(
            "amsa",
            format!("expected [T, H, W, D] grids, got {:?}, {:?}, {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if k.shape() != v.shape() {
        return Err(Error::shape("amsa", format!("k {:?} and v {:?} differ", k.shape(), v.shape())));
    }
    if q.shape()[1..] != k.shape()[1..] {
        return Err(Error::shape(
            "amsa",
            format!("spatial mismatch: q {:?} vs k/v {:?}", q.shape(), k.shape()),
        ));
    }
    let (t, tk) = (q.dim(0), k.dim(0));
    if tk != 1 && tk != t {
        return Err(Error::shape("amsa", format!("k/v have {tk} frames, q has {t} (need 1 or {t})")));
    }
    Ok(())
}

/// First axial stage: attention along H for every (frame, column), then norm.
pub fn amsa_height_stage(q: &Tensor, k: &Tensor, v: &Tensor, p: &AmsaParams) -> Result<Tensor> {
    check_axial(q, k, v)?;
    const SWAP_HW: [usize; 4] = [0, 2, 1, 3];
    let out = cost::scope("height", || {
        msa(&q.permute(&SWAP_HW)?, &k.permute(&SWAP_HW)?, &v.permute(&SWAP_HW)?, &p.height)
    })?;
    p.height_norm.apply(&out.permute(&SWAP_HW)?)
}

/// Second axial stage: attention along W for every (frame, row), then norm.
/// `f` is the first-stage output; `k`, `v` are the original keys/values.
pub fn amsa_width_stage(f: &Tensor, k: &Tensor, v: &Tensor, p: &AmsaParams, variant: AmsaVariant) -> Result<Tensor> {
    check_axial(f, k, v)?;
    let (keys, values) = match variant {
        AmsaVariant::Standard => (k, f),
        AmsaVariant::VariantA => (f, f),
        AmsaVariant::VariantB => (k, v),
    };
    let out = cost::scope("width", || msa(f, keys, values, &p.width))?;
    p.width_norm.apply(&out)
}

/// Axial multi-head attention over `[T, H, W, D]` grids. `k`/`v` may carry a
/// single frame, which is then shared by all query frames.
pub fn amsa(q: &Tensor, k: &Tensor, v: &Tensor, p: &AmsaParams, variant: AmsaVariant) -> Result<Tensor> {
    cost::scope("amsa", || {
        let f = amsa_height_stage(q, k, v, p)?;
        amsa_width_stage(&f, k, v, p, variant)
    })
}

struct Grid<'a> {
    data: &'a [f64],
    h: usize,
    w: usize,
    d: usize,
}

impl<'a> Grid<'a> {
    fn new(t: &'a Tensor) -> Self {
        Grid {
            data: t.data(),
            h: t.dim(1),
            w: t.dim(2),
            d: t.dim(3),
        }
    }

    fn token(&self, t: usize, y: usize, x: usize) -> &'a [f64] {
        let at = ((t * self.h + y) * self.w + x) * self.d;
        &self.data[at..at + self.d]
    }
}

fn loop_project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let d = x.len();
    let wd = w.data();
    (0..d).map(|j| (0..d).map(|c| x[c] * wd[c * d + j]).sum()).collect()
}

fn loop_msa(qs: &[&[f64]], ks: &[&[f64]], vs: &[&[f64]], p: &AttnParams) -> Vec<Vec<f64>> {
    let d = p.dim();
    let dh = d / p.heads;
    let qp: Vec<Vec<f64>> = qs.iter().map(|x| loop_project(x, &p.wq)).collect();
    let kp: Vec<Vec<f64>> = ks.iter().map(|x| loop_project(x, &p.wk)).collect();
    let vp: Vec<Vec<f64>> = vs.iter().map(|x| loop_project(x, &p.wv)).collect();
    let mut out = Vec::with_capacity(qs.len());
    for qi in &qp {
        let mut ctx = vec![0.0; d];
        for head in 0..p.heads {
            let lanes = head * dh..(head + 1) * dh;
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| lanes.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (e, vj) in exps.iter().zip(&vp) {
                for c in lanes.clone() {
                    ctx[c] += e / z * vj[c];
                }
            }
        }
        out.push(loop_project(&ctx, &p.wo));
    }
    out
}

fn loop_layer_norm(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let (g, b) = (p.gamma.data(), p.beta.data());
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g[j] + b[j])
        .collect()
}

/// Independent nested-loop evaluation of [`amsa`] with no reshapes or
/// batched products. Meant for small grids in equivalence tests.
pub fn axial_oracle(q: &Tensor, k: &Tensor, v: &Tensor, p: &AmsaParams, variant: AmsaVariant) -> Result<Tensor> {
    check_axial(q, k, v)?;
    let (t, h, w, d) = (q.dim(0), q.dim(1), q.dim(2), q.dim(3));
    if d != p.height.dim() || d != p.width.dim() {
        return Err(Error::shape("axial_oracle", format!("embedding dim {d} vs params {}", p.height.dim())));
    }
    let single_style = k.dim(0) == 1;
    let (qg, kg, vg) = (Grid::new(q), Grid::new(k), Grid::new(v));

    let mut f = vec![0.0; t * h * w * d];
    for ti in 0..t {
        let tk = if single_style { 0 } else { ti };
        for x in 0..w {
            let qs: Vec<&[f64]> = (0..h).map(|y| qg.token(ti, y, x)).collect();
            let ks: Vec<&[f64]> = (0..h).map(|y| kg.token(tk, y, x)).collect();
            let vs: Vec<&[f64]> = (0..h).map(|y| vg.token(tk, y, x)).collect();
            for (y, row) in loop_msa(&qs, &ks, &vs, &p.height).iter().enumerate() {
                let at = ((ti * h + y) * w + x) * d;
                f[at..at + d].copy_from_slice(&loop_layer_norm(row, &p.height_norm));
            }
        }
    }
    let f = Tensor::new(f, q.shape())?;
    let fg = Grid::new(&f);

    let mut out = vec![0.0; t * h * w * d];
    for ti in 0..t {
        let tk = if single_style { 0 } else { ti };
        for y in 0..h {
            let fs: Vec<&[f64]> = (0..w).map(|x| fg.token(ti, y, x)).collect();
            let ks: Vec<&[f64]> = (0..w).map(|x| kg.token(tk, y, x)).collect();
            let vs: Vec<&[f64]> = (0..w).map(|x| vg.token(tk, y, x)).collect();
            let (keys, values) = match variant {
                AmsaVariant::Standard => (&ks, &fs),
                AmsaVariant::VariantA => (&fs, &fs),
                AmsaVariant::VariantB => (&ks, &vs),
            };
            for (x, row) in loop_msa(&fs, keys, values, &p.width).iter().enumerate() {
                let at = ((ti * h + y) * w + x) * d;
                out[at..at + d].copy_from_slice(&loop_layer_norm(row, &p.width_norm));
            }
        }
    }
    Tensor::new(out, q.shape())
}

/// Analytic attention cost, split into score terms (QKᵀ and the weighted
/// sum of V) and the four projections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AttentionFlops {
    pub score: u64,
    pub projection: u64,
}

impl std::ops::Add for AttentionFlops {
    type Output = AttentionFlops;
    fn add(self, o: AttentionFlops) -> AttentionFlops {
        AttentionFlops {
            score: self.score + o.score,
            projection: self.projection + o.projection,
        }
    }
}

impl std::ops::Mul<u64> for AttentionFlops {
    type Output = AttentionFlops;
    fn mul(self, k: u64) -> AttentionFlops {
        AttentionFlops {
            score: self.score * k,
            projection: self.projection * k,
        }
    }
}

/// One attention call with `n_q` queries over `n_kv` keys. Splitting into
/// heads does not change the count: h·(2·N_q·N_kv·D/h) per product.
pub fn attention_flops(n_q: u64, n_kv: u64, d: u64, heads: u64) -> AttentionFlops {
    assert!(n_q >= 1 && n_kv >= 1 && d >= 1 && heads >= 1, "attention_flops needs positive dims");
    AttentionFlops {
        score: 2 * n_q * n_kv * d + 2 * n_q * n_kv * d,
        projection: 2 * n_q * d * d + 2 * 2 * n_kv * d * d + 2 * n_q * d * d,
    }
}

/// Full attention over all `H·W` tokens of each of `t` frames.
pub fn msa_grid_flops(t: u64, h: u64, w: u64, d: u64, heads: u64) -> AttentionFlops {
    attention_flops(h * w, h * w, d, heads) * t
}

/// Axial attention for `t` query frames against `t_kv` key/value frames.
/// Score terms: `t·W` height attentions of length H plus `t·H` width
/// attentions of length W. Projections follow the variant's wiring.
pub fn amsa_flops(t: u64, t_kv: u64, h: u64, w: u64, d: u64, heads: u64, variant: AmsaVariant) -> AttentionFlops {
    let score = attention_flops(h, h, d, heads).score * t * w + attention_flops(w, w, d, heads).score * t * h;
    let tokens = |frames: u64| 2 * frames * h * w * d * d;
    let (k2, v2) = match variant {
        AmsaVariant::Standard => (t_kv, t),
        AmsaVariant::VariantA => (t, t),
        AmsaVariant::VariantB => (t_kv, t_kv),
    };
    let projection = (tokens(t) + tokens(t_kv) * 2 + tokens(t)) + (tokens(t) + tokens(k2) + tokens(v2) + tokens(t));
    AttentionFlops { score, projection }
}
