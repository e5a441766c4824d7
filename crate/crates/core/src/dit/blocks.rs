use super::TokenGrid;
use crate::attention::{amsa, AmsaParams, AmsaVariant, LayerNormParams};
use crate::error::{Error, Result};
use crate::numcore::{cost, Rng, Tensor};

/// Hidden width of the feed-forward layer, as a multiple of D.
pub const FFN_EXPANSION: usize = 4;

const TO_NCHW: [usize; 4] = [0, 3, 1, 2];
const TO_NHWC: [usize; 4] = [0, 2, 3, 1];

/// 1×1 convolution over a token grid (a per-token affine map).
#[derive(Clone, Debug)]
pub struct PointwiseConv {
    pub weight: Tensor,
    pub bias: Tensor,
}

crate::params::param_set!(PointwiseConv { weight, bias });

impl PointwiseConv {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        PointwiseConv {
            weight: rng.init_param(&[d, d, 1, 1], d),
            bias: rng.init_param(&[d], d),
        }
    }

    /// `[T, H, W, D] -> [T, H, W, D]`.
    pub fn apply(&self, grid: &Tensor) -> Result<Tensor> {
        grid.permute(&TO_NCHW)?
            .conv2d(&self.weight, Some(&self.bias), 1, 0)?
            .permute(&TO_NHWC)
    }
}

/// Two pointwise layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

crate::params::param_set!(Ffn { w1, b1, w2, b2 });

impl Ffn {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let hidden = FFN_EXPANSION * d;
        Ffn {
            w1: rng.init_param(&[d, hidden], d),
            b1: rng.init_param(&[hidden], d),
            w2: rng.init_param(&[hidden, d], hidden),
            b2: rng.init_param(&[d], hidden),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        cost::scope("ffn", || {
            x.matmul(&self.w1)?
                .add(&self.b1)?
                .gelu()?
                .matmul(&self.w2)?
                .add(&self.b2)
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlockParams {
    pub conv_q: PointwiseConv,
    pub conv_k: PointwiseConv,
    pub conv_v: PointwiseConv,
    pub amsa: AmsaParams,
    pub norm_attn: LayerNormParams,
    pub ffn: Ffn,
    pub norm_ffn: LayerNormParams,
}

crate::params::param_set!(EncoderBlockParams {
    conv_q,
    conv_k,
    conv_v,
    amsa,
    norm_attn,
    ffn,
    norm_ffn
});

impl EncoderBlockParams {
    pub fn init(d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderBlockParams {
            conv_q: PointwiseConv::init(d, rng),
            conv_k: PointwiseConv::init(d, rng),
            conv_v: PointwiseConv::init(d, rng),
            amsa: AmsaParams::init(d, heads, rng)?,
            norm_attn: LayerNormParams::init(d),
            ffn: Ffn::init(d, rng),
            norm_ffn: LayerNormParams::init(d),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.norm_attn.gamma.numel()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlockParams {
    pub conv_q1: PointwiseConv,
    pub conv_k1: PointwiseConv,
    pub conv_v1: PointwiseConv,
    pub amsa1: AmsaParams,
    pub norm1: LayerNormParams,
    pub conv_q2: PointwiseConv,
    pub conv_k2: PointwiseConv,
    pub conv_v2: PointwiseConv,
    pub amsa2: AmsaParams,
    pub norm2: LayerNormParams,
    pub ffn: Ffn,
    pub norm3: LayerNormParams,
}

crate::params::param_set!(DecoderBlockParams {
    conv_q1,
    conv_k1,
    conv_v1,
    amsa1,
    norm1,
    conv_q2,
    conv_k2,
    conv_v2,
    amsa2,
    norm2,
    ffn,
    norm3
});

impl DecoderBlockParams {
    pub fn init(d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(DecoderBlockParams {
            conv_q1: PointwiseConv::init(d, rng),
            conv_k1: PointwiseConv::init(d, rng),
            conv_v1: PointwiseConv::init(d, rng),
            amsa1: AmsaParams::init(d, heads, rng)?,
            norm1: LayerNormParams::init(d),
            conv_q2: PointwiseConv::init(d, rng),
            conv_k2: PointwiseConv::init(d, rng),
            conv_v2: PointwiseConv::init(d, rng),
            amsa2: AmsaParams::init(d, heads, rng)?,
            norm2: LayerNormParams::init(d),
            ffn: Ffn::init(d, rng),
            norm3: LayerNormParams::init(d),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.norm1.gamma.numel()
    }
}

fn check_pair(op: &'static str, a: &TokenGrid, b: &TokenGrid, d: usize) -> Result<()> {
    let (sa, sb) = (a.data.shape(), b.data.shape());
    if sa[1..] != sb[1..] || sa[3] != d {
        return Err(Error::shape(
            op,
            format!("grids {sa:?} and {sb:?} must share H, W and D = {d}"),
        ));
    }
    Ok(())
}

/// `S' = LN(AMSA(Conv(Q), Conv(K), Conv(V)) + Q)`, `S = LN(FFN(S') + S')`
/// with `Q = x_q` and `K = V = x_kv`.
pub fn encoder_block(x_q: &TokenGrid, x_kv: &TokenGrid, p: &EncoderBlockParams, variant: AmsaVariant) -> Result<TokenGrid> {
    check_pair("encoder_block", x_q, x_kv, p.embed_dim())?;
    cost::scope("encoder_block", || {
        let q = &x_q.data;
        let kv = &x_kv.data;
        let attn = amsa(&p.conv_q.apply(q)?, &p.conv_k.apply(kv)?, &p.conv_v.apply(kv)?, &p.amsa, variant)?;
        let s1 = p.norm_attn.apply(&attn.add(q)?)?;
        let s = p.norm_ffn.apply(&p.ffn.apply(&s1)?.add(&s1)?)?;
        TokenGrid::new(s, x_q.kind)
    })
}

/// Two cross-attention sub-layers against the style grid, then the FFN,
/// each followed by a residual sum and layer norm.
pub fn decoder_block(content: &TokenGrid, style: &TokenGrid, p: &DecoderBlockParams, variant: AmsaVariant) -> Result<TokenGrid> {
    check_pair("decoder_block", content, style, p.embed_dim())?;
    let (t, ts) = (content.frames(), style.frames());
    if ts != 1 && ts != t {
        return Err(Error::shape("decoder_block", format!("style has {ts} frames, content {t}")));
    }
    cost::scope("decoder_block", || {
        let q = &content.data;
        let s = &style.data;
        let a1 = amsa(&p.conv_q1.apply(q)?, &p.conv_k1.apply(s)?, &p.conv_v1.apply(s)?, &p.amsa1, variant)?;
        let s2 = p.norm1.apply(&a1.add(q)?)?;
        let a2 = amsa(&p.conv_q2.apply(&s2)?, &p.conv_k2.apply(s)?, &p.conv_v2.apply(s)?, &p.amsa2, variant)?;
        let s1 = p.norm2.apply(&a2.add(&s2)?)?;
        let out = p.norm3.apply(&p.ffn.apply(&s1)?.add(&s1)?)?;
        TokenGrid::new(out, content.kind)
    })
}
