//! The full image pipeline (encode, tokenize, transform, decode) and its
//! binary checkpoint format.
//!
//! Checkpoint layout, little-endian throughout:
//!
//! ```text
//! b"UDIT"  u32 version (= 1)
//! u32 × 9  n_c, n_s, n_t, embed_dim, heads, interaction_enabled,
//!          unimodal, variant code, base_channels
//! repeated until end of file:
//!   u32 name_len, name bytes (UTF-8), u32 rank, u64 × rank dims,
//!   f64 × numel payload (row-major)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::attention::AmsaVariant;
use crate::codec::{self, CodecConfig, CodecParams, FeatureTaps};
use crate::dit::{dit_forward, DitConfig, DitParams, GridKind, TokenGrid};
use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UDIT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Model {
    pub dit_cfg: DitConfig,
    pub codec_cfg: CodecConfig,
    pub codec: CodecParams,
    pub dit: DitParams,
}

/// Intermediate products of one stylization.
#[derive(Clone, Debug)]
pub struct Stylized {
    /// Raw decoder output `[T, 3, H, W]`.
    pub images: Tensor,
    pub tokens: TokenGrid,
}

impl Model {
    pub fn init(dit_cfg: DitConfig, codec_cfg: CodecConfig, seed: u64) -> Result<Self> {
        check_dims(&dit_cfg, &codec_cfg)?;
        let mut rng = Rng::new(seed);
        let codec = CodecParams::init(&codec_cfg, &mut rng.fork())?;
        let dit = DitParams::init(&dit_cfg, &mut rng.fork())?;
        Ok(Model {
            dit_cfg,
            codec_cfg,
            codec,
            dit,
        })
    }

    /// Copy running under a different transformer configuration; block counts
    /// and widths must agree with the stored parameters.
    pub fn with_dit_config(&self, cfg: DitConfig) -> Model {
        Model {
            dit_cfg: cfg,
            ..self.clone()
        }
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeatureTaps> {
        codec::encode(images, &self.codec.encoder)
    }

    /// Transformer plus decoder on already-tokenized inputs.
    pub fn transform(&self, content: &TokenGrid, style: &TokenGrid) -> Result<Stylized> {
        let tokens = dit_forward(content, style, &self.dit_cfg, &self.dit)?;
        let images = codec::decode(&tokens, &self.codec.decoder)?;
        Ok(Stylized { images, tokens })
    }

    /// `content: [T, 3, H, W]`, `style: [1, 3, H, W]` (or `T` frames).
    pub fn stylize(&self, content: &Tensor, style: &Tensor) -> Result<Stylized> {
        let c = codec::tokenize(&self.encode(content)?)?;
        let s = codec::tokenize(&self.encode(style)?)?.with_kind(GridKind::Style);
        self.transform(&c, &s)
    }

    /// Learnable tensors: decoder then transformer, in traversal order.
    pub fn trainable(&self) -> Vec<Tensor> {
        let mut out = self.codec.decoder.tensors();
        out.extend(self.dit.tensors());
        out
    }

    pub fn replace_trainable(&mut self, tensors: &[Tensor]) -> Result<()> {
        let n = self.codec.decoder.tensors().len();
        if tensors.len() < n {
            return Err(Error::shape("replace_trainable", "too few tensors"));
        }
        self.codec.decoder.replace_tensors(&tensors[..n])?;
        self.dit.replace_tensors(&tensors[n..])
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.codec.visit("codec", &mut |name, t| out.push((name, t.clone())));
        self.dit.visit("dit", &mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let c = &self.dit_cfg;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let header = [
            CHECKPOINT_VERSION,
            c.n_c as u32,
            c.n_s as u32,
            c.n_t as u32,
            c.embed_dim as u32,
            c.heads as u32,
            c.interaction_enabled as u32,
            c.unimodal as u32,
            c.variant.code(),
            self.codec_cfg.base_channels as u32,
        ];
        for v in header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (name, t) in self.named_tensors() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut h = [0usize; 9];
        for v in &mut h {
            *v = r.u32()? as usize;
        }
        let flag = |v: usize, what: &str| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Format(format!("{what} flag must be 0 or 1, got {v}"))),
        };
        let dit_cfg = DitConfig {
            n_c: h[0],
            n_s: h[1],
            n_t: h[2],
            embed_dim: h[3],
            heads: h[4],
            interaction_enabled: flag(h[5], "interaction")?,
            unimodal: flag(h[6], "unimodal")?,
            variant: AmsaVariant::from_code(h[7] as u32)?,
        };
        let codec_cfg = CodecConfig {
            base_channels: h[8],
            embed_dim: h[3],
        };
        let mut named = HashMap::new();
        while !r.done() {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dim overflows usize".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} overflows")))?;
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            let t = Tensor::new(data, &shape).map_err(|_| Error::Format(format!("{name}: non-finite values")))?;
            if named.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        // Build a skeleton with the right shapes, then fill every slot.
        let mut model = Model::init(dit_cfg, codec_cfg, 0)?;
        model.codec.encoder.load_named("codec.encoder", &named, false)?;
        model.codec.decoder.load_named("codec.decoder", &named, true)?;
        model.dit.load_named("dit", &named, true)?;
        let expected = model.named_tensors().len();
        if named.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {expected}",
                named.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_checkpoint_bytes(&fs::read(path)?)
    }
}

fn check_dims(dit: &DitConfig, codec: &CodecConfig) -> Result<()> {
    dit.validate()?;
    if dit.embed_dim != codec.embed_dim {
        return Err(Error::Config(format!(
            "transformer dim {} differs from codec token dim {}",
            dit.embed_dim, codec.embed_dim
        )));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
