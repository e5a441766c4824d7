//! Training objectives over feature taps and the evaluation metrics.
//!
//! Every norm here is a plain Euclidean norm (not squared). Style-side
//! tensors may carry a batch of 1, which is shared by every stylized item.

use serde::{Deserialize, Serialize};

use crate::codec::FeatureTaps;
use crate::error::{Error, Result};
use crate::numcore::{Tensor, INSTANCE_EPS};

/// Guard for cosine denominators and distance-matrix column sums.
pub const COSINE_EPS: f64 = 1e-8;
/// Taps used by the temporal term (third and fourth).
pub const TEMPORAL_TAPS: [usize; 2] = [2, 3];
pub const COLOR_BLUR_TAPS: usize = 21;
pub const COLOR_BLUR_SIGMA: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_id1: f64,
    pub lambda_id2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 0.1,
            lambda_s: 1.5,
            lambda_t: 90.0,
            lambda_id1: 0.1,
            lambda_id2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_c, self.lambda_s, self.lambda_t, self.lambda_id1, self.lambda_id2];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted terms; `identity` already includes its inner weights.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub content: Tensor,
    pub style: Tensor,
    pub identity: Tensor,
    pub temporal: Tensor,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Style-side tensors must match channels and carry batch 1 or the same batch.
fn style_compatible(op: &'static str, cs: &Tensor, s: &Tensor) -> Result<()> {
    let (a, b) = (cs.shape(), s.shape());
    if a.len() != 4 || b.len() != 4 || a[1] != b[1] || (b[0] != 1 && b[0] != a[0]) {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}: channels must agree, style batch 1 or equal")));
    }
    Ok(())
}

fn sum_all(terms: Vec<Tensor>) -> Result<Tensor> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::Contract("empty loss sum".into()))?;
    it.try_fold(first, |acc, t| acc.add(&t))
}

/// `Σᵢ ‖φᵢ(cs) − φᵢ(c)‖` over the four taps.
pub fn content_loss(taps_cs: &FeatureTaps, taps_c: &FeatureTaps) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(4);
    for (a, b) in taps_cs.iter().zip(taps_c.iter()) {
        same_shape("content_loss", a, b)?;
        terms.push(a.sub(b)?.l2_norm()?);
    }
    sum_all(terms)
}

/// Per-item content distances, `[B]`.
fn content_per_item(taps_cs: &FeatureTaps, taps_c: &FeatureTaps) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(4);
    for (a, b) in taps_cs.iter().zip(taps_c.iter()) {
        same_shape("metric_dc", a, b)?;
        let n = a.dim(0);
        terms.push(a.sub(b)?.reshape(&[n, a.numel() / n])?.l2_norm_last()?);
    }
    sum_all(terms)
}

/// Per-item style distances, `[B]`: for each tap, channel-wise L2 of the
/// mean gap plus that of the standard-deviation gap.
fn style_per_item(taps_cs: &FeatureTaps, taps_s: &FeatureTaps) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(8);
    for (a, b) in taps_cs.iter().zip(taps_s.iter()) {
        style_compatible("style_loss", a, b)?;
        let (mu_a, sigma_a) = a.instance_stats(INSTANCE_EPS)?;
        let (mu_b, sigma_b) = b.instance_stats(INSTANCE_EPS)?;
        terms.push(mu_a.sub(&mu_b)?.l2_norm_last()?);
        terms.push(sigma_a.sub(&sigma_b)?.l2_norm_last()?);
    }
    sum_all(terms)
}

/// `Σᵢ ‖μ(φᵢ(cs)) − μ(φᵢ(s))‖ + ‖σ(φᵢ(cs)) − σ(φᵢ(s))‖`, statistics per
/// (item, channel), norms over channels, summed over the batch.
pub fn style_loss(taps_cs: &FeatureTaps, taps_s: &FeatureTaps) -> Result<Tensor> {
    style_per_item(taps_cs, taps_s)?.sum()
}

pub struct IdentityInputs<'a> {
    pub cc: &'a Tensor,
    pub c: &'a Tensor,
    pub ss: &'a Tensor,
    pub s: &'a Tensor,
    pub taps_cc: &'a FeatureTaps,
    pub taps_c: &'a FeatureTaps,
    pub taps_ss: &'a FeatureTaps,
    pub taps_s: &'a FeatureTaps,
}

/// `λ_id1·(‖cc − c‖ + ‖ss − s‖) + λ_id2·Σᵢ(‖φᵢ(cc) − φᵢ(c)‖ + ‖φᵢ(ss) − φᵢ(s)‖)`.
pub fn identity_loss(x: &IdentityInputs<'_>, w: &LossWeights) -> Result<Tensor> {
    same_shape("identity_loss", x.cc, x.c)?;
    same_shape("identity_loss", x.ss, x.s)?;
    let pixel = x.cc.sub(x.c)?.l2_norm()?.add(&x.ss.sub(x.s)?.l2_norm()?)?;
    let feature = content_loss(x.taps_cc, x.taps_c)?.add(&content_loss(x.taps_ss, x.taps_s)?)?;
    pixel.scale(w.lambda_id1)?.add(&feature.scale(w.lambda_id2)?)
}

/// Column-normalised cosine-distance matrices `[B, N, N]` between the spatial
/// feature vectors of frame `u` (rows m) and frame `v` (columns n).
pub fn normalized_distance(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    same_shape("temporal_loss", u, v)?;
    let &[b, c, h, w] = u.shape() else {
        return Err(Error::shape("temporal_loss", format!("expected [B, C, H, W], got {:?}", u.shape())));
    };
    let n = h * w;
    let fu = u.reshape(&[b, c, n])?.transpose_last()?;
    let fv = v.reshape(&[b, c, n])?.transpose_last()?;
    let dots = fu.matmul(&fv.transpose_last()?)?;
    let nu = fu.l2_norm_last()?.reshape(&[b, n, 1])?;
    let nv = fv.l2_norm_last()?.reshape(&[b, 1, n])?;
    let cos = dots.div(&nu.mul(&nv)?.clamp_min(COSINE_EPS)?)?;
    let dist = cos.neg()?.add_scalar(1.0)?;
    let colsum = dist.sum_axes(&[1], true)?.clamp_min(COSINE_EPS)?;
    dist.div(&colsum)
}

/// For taps 3 and 4: mean over (m, n) of the gap between the normalised
/// distance matrices of the content pair and the stylized pair; summed over
/// the two taps and over frame pairs in the batch.
pub fn temporal_loss(
    taps_c1: &FeatureTaps,
    taps_c2: &FeatureTaps,
    taps_cs1: &FeatureTaps,
    taps_cs2: &FeatureTaps,
) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(TEMPORAL_TAPS.len());
    for i in TEMPORAL_TAPS {
        let dc = normalized_distance(taps_c1.get(i), taps_c2.get(i))?;
        let dcs = normalized_distance(taps_cs1.get(i), taps_cs2.get(i))?;
        same_shape("temporal_loss", &dc, &dcs)?;
        let pairs = dc.dim(0);
        terms.push(dc.sub(&dcs)?.abs()?.mean()?.scale(pairs as f64)?);
    }
    sum_all(terms)
}

/// `λ_c·L_c + λ_s·L_s + L_id + λ_t·L_t`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    parts
        .content
        .scale(w.lambda_c)?
        .add(&parts.style.scale(w.lambda_s)?)?
        .add(&parts.identity)?
        .add(&parts.temporal.scale(w.lambda_t)?)
}

/// Content distance averaged over the batch.
pub fn metric_dc(taps_cs: &FeatureTaps, taps_c: &FeatureTaps) -> Result<f64> {
    Ok(content_per_item(taps_cs, taps_c)?.mean()?.item())
}

/// Style distance averaged over the batch.
pub fn metric_ds(taps_cs: &FeatureTaps, taps_s: &FeatureTaps) -> Result<f64> {
    Ok(style_per_item(taps_cs, taps_s)?.mean()?.item())
}

/// `F·Fᵀ / (C·H·W)` per item: `[B, C, C]`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let &[b, c, h, w] = f.shape() else {
        return Err(Error::shape("gram", format!("expected [B, C, H, W], got {:?}", f.shape())));
    };
    let flat = f.reshape(&[b, c, h * w])?;
    flat.matmul(&flat.transpose_last()?)?.scale(1.0 / (c * h * w) as f64)
}

/// `Σᵢ ‖G(φᵢ(cs)) − G(φᵢ(s))‖`, per item, averaged over the batch.
pub fn gram_texture_diff(taps_cs: &FeatureTaps, taps_s: &FeatureTaps) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(4);
    for (a, b) in taps_cs.iter().zip(taps_s.iter()) {
        style_compatible("gram_texture_diff", a, b)?;
        let d = gram(a)?.sub(&gram(b)?)?;
        let n = d.dim(0);
        terms.push(d.reshape(&[n, d.numel() / n])?.l2_norm_last()?);
    }
    sum_all(terms)?.mean()
}

/// `[n, n]` Gaussian smoothing matrix; row `i` holds the kernel centred on
/// `i`, truncated at the borders and renormalised to sum to one.
pub fn gaussian_blur_matrix(n: usize, taps: usize, sigma: f64) -> Result<Tensor> {
    let radius = (taps / 2) as isize;
    let mut m = vec![0.0; n * n];
    for i in 0..n as isize {
        let lo = (i - radius).max(0);
        let hi = (i + radius).min(n as isize - 1);
        let row: Vec<f64> = (lo..=hi)
            .map(|j| (-(((j - i) * (j - i)) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = row.iter().sum();
        for (j, v) in (lo..=hi).zip(row) {
            m[i as usize * n + j as usize] = v / total;
        }
    }
    Tensor::new(m, &[n, n])
}

/// Separable Gaussian blur of `[B, C, H, W]` images.
pub fn gaussian_blur(img: &Tensor, taps: usize, sigma: f64) -> Result<Tensor> {
    let &[_, _, h, w] = img.shape() else {
        return Err(Error::shape("gaussian_blur", format!("expected [B, C, H, W], got {:?}", img.shape())));
    };
    let bh = gaussian_blur_matrix(h, taps, sigma)?;
    let bw = gaussian_blur_matrix(w, taps, sigma)?;
    bh.matmul(img)?.matmul(&bw.transpose_last()?)
}

/// Euclidean distance between blurred images, per item, averaged over the batch.
pub fn color_diff(img_cs: &Tensor, img_s: &Tensor) -> Result<Tensor> {
    style_compatible("color_diff", img_cs, img_s)?;
    if img_cs.shape()[2..] != img_s.shape()[2..] {
        return Err(Error::shape("color_diff", format!("{:?} vs {:?}", img_cs.shape(), img_s.shape())));
    }
    let d = gaussian_blur(img_cs, COLOR_BLUR_TAPS, COLOR_BLUR_SIGMA)?
        .sub(&gaussian_blur(img_s, COLOR_BLUR_TAPS, COLOR_BLUR_SIGMA)?)?;
    let n = d.dim(0);
    d.reshape(&[n, d.numel() / n])?.l2_norm_last()?.mean()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_total() {
        let one = || Tensor::scalar(1.0).unwrap();
        let parts = LossParts {
            content: one(),
            style: one(),
            identity: one(),
            temporal: one(),
        };
        let t = total_loss(&parts, &LossWeights::default()).unwrap().item();
        assert!((t - 92.6).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Tensor::full(&[1, 3, 8, 24], 0.25);
        let out = gaussian_blur(&img, COLOR_BLUR_TAPS, COLOR_BLUR_SIGMA).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_t: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
