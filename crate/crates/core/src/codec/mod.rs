//! Convolutional tokenizer and pixel decoder.
//!
//! The encoder is a frozen, randomly initialised conv stack whose four
//! rectified outputs serve as multi-scale feature taps; the deepest tap is
//! the token grid. The decoder mirrors it with nearest-neighbour upsampling
//! and is the only trainable part.

pub mod ppm;

use serde::{Deserialize, Serialize};

use crate::dit::{GridKind, TokenGrid};
use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
/// Total downsampling between pixels and tokens.
pub const TOKEN_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Channel width of the first tap; later taps use 2c and 4c.
    pub base_channels: usize,
    /// Channel width of the deepest tap, equal to the token dim.
    pub embed_dim: usize,
}

impl CodecConfig {
    pub fn test_scale() -> Self {
        CodecConfig {
            base_channels: 4,
            embed_dim: 16,
        }
    }

    pub fn full_scale() -> Self {
        CodecConfig {
            base_channels: 64,
            embed_dim: 512,
        }
    }

    pub fn tap_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, self.embed_dim]
    }
}

/// Encoder outputs at strides 1, 2, 4, 8.
#[derive(Clone, Debug)]
pub struct FeatureTaps(pub [Tensor; 4]);

impl FeatureTaps {
    pub fn get(&self, i: usize) -> &Tensor {
        &self.0[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.0.iter()
    }

    pub fn batch(&self) -> usize {
        self.0[0].dim(0)
    }

    /// Taps restricted to batch items `start..start + len`.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<FeatureTaps> {
        let [a, b, c, d] = &self.0;
        Ok(FeatureTaps([
            a.narrow(0, start, len)?,
            b.narrow(0, start, len)?,
            c.narrow(0, start, len)?,
            d.narrow(0, start, len)?,
        ]))
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

crate::params::param_set!(ConvLayer { weight, bias });

impl ConvLayer {
    fn init(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let fan_in = 9 * c_in;
        ConvLayer {
            weight: rng.init_param(&[c_out, c_in, 3, 3], fan_in),
            bias: rng.init_param(&[c_out], fan_in),
        }
    }

    fn frozen(self) -> Self {
        ConvLayer {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), 1, 1)
    }
}

/// Fixed feature extractor; its tensors never require gradients.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
}

crate::params::param_set!(EncoderParams { layers });

/// Learnable decoder: three upsample stages then a projection to RGB.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub stages: Vec<ConvLayer>,
    pub to_rgb: ConvLayer,
}

crate::params::param_set!(DecoderParams { stages, to_rgb });

#[derive(Clone, Debug)]
pub struct CodecParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

crate::params::param_set!(CodecParams { encoder, decoder });

impl CodecParams {
    pub fn init(cfg: &CodecConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.base_channels == 0 || cfg.embed_dim == 0 {
            return Err(Error::Config(format!("codec widths must be positive: {cfg:?}")));
        }
        let [c1, c2, c3, c4] = cfg.tap_channels();
        let mut enc_rng = rng.fork();
        let mut dec_rng = rng.fork();
        let encoder = EncoderParams {
            layers: [(IMAGE_CHANNELS, c1), (c1, c2), (c2, c3), (c3, c4)]
                .into_iter()
                .map(|(i, o)| ConvLayer::init(i, o, &mut enc_rng).frozen())
                .collect(),
        };
        let decoder = DecoderParams {
            stages: [(c4, c3), (c3, c2), (c2, c1)]
                .into_iter()
                .map(|(i, o)| ConvLayer::init(i, o, &mut dec_rng))
                .collect(),
            to_rgb: ConvLayer::init(c1, IMAGE_CHANNELS, &mut dec_rng),
        };
        Ok(CodecParams { encoder, decoder })
    }

    pub fn embed_dim(&self) -> usize {
        self.decoder.stages[0].weight.dim(1)
    }
}

/// `[B, 3, H, W]` images to four taps. Gradients flow to the images but never
/// to the encoder weights.
pub fn encode(images: &Tensor, params: &EncoderParams) -> Result<FeatureTaps> {
    let &[_, ch, h, w] = images.shape() else {
        return Err(Error::shape("encode", format!("expected [B, 3, H, W], got {:?}", images.shape())));
    };
    if ch != IMAGE_CHANNELS {
        return Err(Error::shape("encode", format!("expected 3 channels, got {ch}")));
    }
    if h % TOKEN_STRIDE != 0 || w % TOKEN_STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::shape("encode", format!("spatial dims {h}x{w} must be positive multiples of 8")));
    }
    if params.layers.len() != 4 {
        return Err(Error::Config(format!("encoder has {} layers, expected 4", params.layers.len())));
    }
    let phi1 = params.layers[0].apply(images)?.relu()?;
    let phi2 = params.layers[1].apply(&phi1.max_pool2x2()?)?.relu()?;
    let phi3 = params.layers[2].apply(&phi2.max_pool2x2()?)?.relu()?;
    let phi4 = params.layers[3].apply(&phi3.max_pool2x2()?)?.relu()?;
    Ok(FeatureTaps([phi1, phi2, phi3, phi4]))
}

/// Deepest tap `[B, D, h, w]` as a `[B, h, w, D]` content grid.
pub fn tokenize(taps: &FeatureTaps) -> Result<TokenGrid> {
    TokenGrid::new(taps.get(3).permute(&[0, 2, 3, 1])?, GridKind::Content)
}

/// Inverse layout of [`tokenize`].
pub fn detokenize(grid: &TokenGrid) -> Result<Tensor> {
    grid.data.permute(&[0, 3, 1, 2])
}

/// `[T, h, w, D]` tokens to raw `[T, 3, 8h, 8w]` pixels (unclamped).
pub fn decode(tokens: &TokenGrid, params: &DecoderParams) -> Result<Tensor> {
    let d = params.stages[0].weight.dim(1);
    if tokens.embed_dim() != d {
        return Err(Error::shape(
            "decode",
            format!("tokens have dim {}, decoder expects {d}", tokens.embed_dim()),
        ));
    }
    let mut x = detokenize(tokens)?;
    for stage in &params.stages {
        x = stage.apply(&x.upsample_nearest2x()?)?.relu()?;
    }
    params.to_rgb.apply(&x)
}
