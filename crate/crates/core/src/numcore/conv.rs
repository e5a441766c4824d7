//! Spatial ops over `[B, C, H, W]` tensors.
//!
//! `conv2d` is a cross-correlation (no kernel flip) with zero padding.

use std::sync::Arc;

use super::cost::{self, Primitive};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Output range `[lo, hi)` of positions whose input coordinate
/// `o * stride + k - pad` lands inside `0..len`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // need o * stride + k - pad <= len - 1
    let hi = if len + pad < k + 1 {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

fn expect_rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, format!("expected a rank-4 tensor, got {:?}", t.shape()))),
    }
}

impl Tensor {
    /// 2-D cross-correlation. `weight` is `[O, C, kh, kw]` with kh, kw ∈ {1, 3};
    /// `bias` is `[O]`. Output is `[B, O, H', W']`, `H' = (H + 2·pad − kh)/stride + 1`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let [b, c, h, w] = expect_rank4("conv2d", self)?;
        let [o, wc, kh, kw] = expect_rank4("conv2d", weight)?;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} has {c} channels, weight {:?} expects {wc}", self.shape(), weight.shape()),
            ));
        }
        if ![1, 3].contains(&kh) || ![1, 3].contains(&kw) {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} not in {{1, 3}}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} should be [{o}]", bias.shape())));
            }
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad} gives non-integral output"),
            ));
        }
        let oh = (span_h - kh) / stride + 1;
        let ow = (span_w - kw) / stride + 1;
        let geom = Arc::new(ConvGeom { b, c, h, w, o, kh, kw, oh, ow, stride, pad });

        let x = self.data();
        let wt = weight.data();
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oi in 0..o {
                let plane = &mut out[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
                if let Some(bias) = bias {
                    plane.fill(bias.data()[oi]);
                }
                for ci in 0..c {
                    let xp = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wv = wt[((oi * c + ci) * kh + ki) * kw + kj];
                            geom.for_each_row(ki, kj, |oy, iy, lo, hi| {
                                let orow = &mut plane[oy * ow + lo..oy * ow + hi];
                                let start = iy * w + lo * stride + kj - pad;
                                if stride == 1 {
                                    for (o, &xv) in orow.iter_mut().zip(&xp[start..start + (hi - lo)]) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for (o, &xv) in orow.iter_mut().zip(xp[start..].iter().step_by(stride)) {
                                        *o += wv * xv;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
        cost::record(
            Primitive::Conv2d,
            cost::conv2d_flops(b as u64, c as u64, o as u64, kh as u64, kw as u64, oh as u64, ow as u64, bias.is_some()),
        );

        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let (xt, wtt) = (self.clone(), weight.clone());
        Tensor::from_op(
            "conv2d",
            out,
            vec![b, o, oh, ow],
            parents,
            Box::new(move |g, needs| {
                let ConvGeom { b, c, h, w, o, kh, kw, oh, ow, stride, pad } = *geom;
                let (x, wt) = (xt.data(), wtt.data());
                let mut gx = needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = needs[1].then(|| vec![0.0; wt.len()]);
                for bi in 0..b {
                    for oi in 0..o {
                        let gp = &g[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let widx = ((oi * c + ci) * kh + ki) * kw + kj;
                                    if let Some(gx) = gx.as_mut() {
                                        let wv = wt[widx];
                                        let gxp = &mut gx[base..base + h * w];
                                        geom.for_each_row(ki, kj, |oy, iy, lo, hi| {
                                            let grow = &gp[oy * ow + lo..oy * ow + hi];
                                            let start = iy * w + lo * stride + kj - pad;
                                            if stride == 1 {
                                                for (d, &gv) in gxp[start..start + (hi - lo)].iter_mut().zip(grow) {
                                                    *d += wv * gv;
                                                }
                                            } else {
                                                for (d, &gv) in gxp[start..].iter_mut().step_by(stride).zip(grow) {
                                                    *d += wv * gv;
                                                }
                                            }
                                        });
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        let xp = &x[base..base + h * w];
                                        let mut acc = 0.0;
                                        geom.for_each_row(ki, kj, |oy, iy, lo, hi| {
                                            let grow = &gp[oy * ow + lo..oy * ow + hi];
                                            let start = iy * w + lo * stride + kj - pad;
                                            acc += grow
                                                .iter()
                                                .zip(xp[start..].iter().step_by(stride))
                                                .map(|(g, x)| g * x)
                                                .sum::<f64>();
                                        });
                                        gw[widx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        (0..o)
                            .map(|oi| {
                                (0..b)
                                    .map(|bi| g[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow].iter().sum::<f64>())
                                    .sum()
                            })
                            .collect()
                    }));
                }
                grads
            }),
        )
    }

    /// 2×2 max pooling with stride 2; H and W must be even. Ties route the
    /// gradient to the first maximum in row-major window order.
    pub fn max_pool2x2(&self) -> Result<Tensor> {
        let [b, c, h, w] = expect_rank4("max_pool2x2", self)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2x2", format!("spatial dims {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = p * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        cost::record(Primitive::Pool, x.len() as u64);
        let n = x.len();
        Tensor::from_op(
            "max_pool2x2",
            out,
            vec![b, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for (&i, gi) in argmax.iter().zip(g) {
                    gx[i] += gi;
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Nearest-neighbour ×2 upsampling of the two trailing axes.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        let [b, c, h, w] = expect_rank4("upsample_nearest2x", self)?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(p * oh + oy) * ow + ox] = x[(p * h + oy / 2) * w + ox / 2];
                }
            }
        }
        let n = x.len();
        Tensor::from_op(
            "upsample_nearest2x",
            out,
            vec![b, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n];
                for p in 0..b * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gx[(p * h + oy / 2) * w + ox / 2] += g[(p * oh + oy) * ow + ox];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Calls `f(oy, iy, ox_lo, ox_hi)` for each output row that reads a valid
    /// input row at kernel offset (ki, kj).
    #[inline]
    fn for_each_row(&self, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oy_lo, oy_hi) = valid_range(self.oh, self.h, ki, self.stride, self.pad);
        let (ox_lo, ox_hi) = valid_range(self.ow, self.w, kj, self.stride, self.pad);
        for oy in oy_lo..oy_hi {
            f(oy, oy * self.stride + ki - self.pad, ox_lo, ox_hi);
        }
    }
}
