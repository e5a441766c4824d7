//! Domain interaction transformer.
//!
//! Three stages run in order: per-domain self-attention encoders (content
//! and style), a video/image cross-attention exchange over the two halves of
//! the content sequence, and content-to-style decoder blocks. Every attention
//! layer is axial and works inside one frame's H×W grid; frames only mix in
//! the interaction stage.

mod blocks;

use serde::{Deserialize, Serialize};

use crate::attention::{AmsaVariant, DEFAULT_HEADS};
use crate::error::{Error, Result};
use crate::numcore::{cost, Rng, Tensor};

pub use blocks::{
    decoder_block, encoder_block, DecoderBlockParams, EncoderBlockParams, Ffn, PointwiseConv, FFN_EXPANSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    Content,
    Style,
    Stylized,
}

/// A `[T, H, W, D]` stack of token maps.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub data: Tensor,
    pub kind: GridKind,
}

impl TokenGrid {
    pub fn new(data: Tensor, kind: GridKind) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::shape("TokenGrid", format!("expected [T, H, W, D], got {:?}", data.shape())));
        }
        Ok(TokenGrid { data, kind })
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    pub fn embed_dim(&self) -> usize {
        self.data.dim(3)
    }

    pub fn with_kind(&self, kind: GridKind) -> TokenGrid {
        TokenGrid {
            data: self.data.clone(),
            kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DitConfig {
    /// Content self-attention encoder blocks.
    pub n_c: usize,
    /// Style self-attention encoder blocks.
    pub n_s: usize,
    /// Content-style decoder blocks.
    pub n_t: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub interaction_enabled: bool,
    /// Run the interaction stage as self-attention over the whole sequence.
    pub unimodal: bool,
    pub variant: AmsaVariant,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            n_c: 2,
            n_s: 1,
            n_t: 3,
            embed_dim: 512,
            heads: DEFAULT_HEADS,
            interaction_enabled: true,
            unimodal: false,
            variant: AmsaVariant::Standard,
        }
    }
}

impl DitConfig {
    /// Default block counts at D = 16 with 2 heads.
    pub fn test_scale() -> Self {
        DitConfig {
            embed_dim: 16,
            heads: 2,
            ..DitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 || self.n_s == 0 || self.n_t == 0 {
            return Err(Error::Config(format!(
                "block counts must be >= 1, got n_c={} n_s={} n_t={}",
                self.n_c, self.n_s, self.n_t
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DitParams {
    pub content_encoders: Vec<EncoderBlockParams>,
    pub style_encoders: Vec<EncoderBlockParams>,
    /// `[video-queries-image, image-queries-video]`. Always present so that
    /// toggling the interaction keeps the parameter layout.
    pub interaction: Vec<EncoderBlockParams>,
    pub decoders: Vec<DecoderBlockParams>,
}

crate::params::param_set!(DitParams {
    content_encoders,
    style_encoders,
    interaction,
    decoders
});

impl DitParams {
    pub fn init(cfg: &DitConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.embed_dim, cfg.heads);
        let enc = |n: usize, rng: &mut Rng| (0..n).map(|_| EncoderBlockParams::init(d, h, rng)).collect::<Result<Vec<_>>>();
        let content_encoders = enc(cfg.n_c, rng)?;
        let style_encoders = enc(cfg.n_s, rng)?;
        let interaction = enc(2, rng)?;
        let decoders = (0..cfg.n_t)
            .map(|_| DecoderBlockParams::init(d, h, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DitParams {
            content_encoders,
            style_encoders,
            interaction,
            decoders,
        })
    }

    fn check_matches(&self, cfg: &DitConfig) -> Result<()> {
        let counts = (
            self.content_encoders.len(),
            self.style_encoders.len(),
            self.interaction.len(),
            self.decoders.len(),
        );
        if counts != (cfg.n_c, cfg.n_s, 2, cfg.n_t) {
            return Err(Error::Config(format!(
                "parameters hold (content, style, interaction, decoder) = {counts:?} blocks, config wants ({}, {}, 2, {})",
                cfg.n_c, cfg.n_s, cfg.n_t
            )));
        }
        Ok(())
    }
}

/// Cross-frame exchange between the video half and the image half of the
/// content sequence. Disabled: returns the input untouched. Unimodal: one
/// self-attention block (the first interaction block's weights) over the
/// whole sequence.
pub fn video_image_interaction(seq: &TokenGrid, params: &[EncoderBlockParams], cfg: &DitConfig) -> Result<TokenGrid> {
    if !cfg.interaction_enabled {
        return Ok(seq.clone());
    }
    if params.len() != 2 {
        return Err(Error::Config(format!("interaction needs 2 blocks, got {}", params.len())));
    }
    cost::scope("interaction", || {
        if cfg.unimodal {
            return encoder_block(seq, seq, &params[0], cfg.variant);
        }
        let t = seq.frames();
        if t % 2 != 0 {
            return Err(Error::Config(format!(
                "bimodal interaction needs an even frame count (video half + image half), got {t}"
            )));
        }
        let half = t / 2;
        let video = TokenGrid::new(seq.data.narrow(0, 0, half)?, seq.kind)?;
        let image = TokenGrid::new(seq.data.narrow(0, half, half)?, seq.kind)?;
        let out_v = encoder_block(&video, &image, &params[0], cfg.variant)?;
        let out_i = encoder_block(&image, &video, &params[1], cfg.variant)?;
        TokenGrid::new(Tensor::concat(&[out_v.data, out_i.data], 0)?, seq.kind)
    })
}

/// Full transformer pass; output has the content grid's shape.
///
/// The style grid carries one frame (shared by every content frame) or as
/// many frames as the content, which is how the content-as-style identity
/// pass is run.
pub fn dit_forward(content: &TokenGrid, style: &TokenGrid, cfg: &DitConfig, params: &DitParams) -> Result<TokenGrid> {
    cfg.validate()?;
    params.check_matches(cfg)?;
    if content.kind != GridKind::Content || style.kind != GridKind::Style {
        return Err(Error::Contract(format!(
            "dit_forward expects (Content, Style) grids, got ({:?}, {:?})",
            content.kind, style.kind
        )));
    }
    for g in [content, style] {
        if g.embed_dim() != cfg.embed_dim {
            return Err(Error::shape(
                "dit_forward",
                format!("grid {:?} has embed dim {}, config {}", g.data.shape(), g.embed_dim(), cfg.embed_dim),
            ));
        }
    }
    if style.frames() != 1 && style.frames() != content.frames() {
        return Err(Error::shape(
            "dit_forward",
            format!("style has {} frames, content {}", style.frames(), content.frames()),
        ));
    }

    let mut c = content.clone();
    cost::scope("content_encoder", || -> Result<()> {
        for p in &params.content_encoders {
            c = encoder_block(&c, &c, p, cfg.variant)?;
        }
        Ok(())
    })?;
    let mut s = style.clone();
    cost::scope("style_encoder", || -> Result<()> {
        for p in &params.style_encoders {
            s = encoder_block(&s, &s, p, cfg.variant)?;
        }
        Ok(())
    })?;
    c = video_image_interaction(&c, &params.interaction, cfg)?;
    cost::scope("decoder", || -> Result<()> {
        for p in &params.decoders {
            c = decoder_block(&c, &s, p, cfg.variant)?;
        }
        Ok(())
    })?;
    Ok(c.with_kind(GridKind::Stylized))
}
