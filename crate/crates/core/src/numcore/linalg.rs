//! Matrix product, softmax and layer normalization.

use std::sync::Arc;

use super::cost::{self, Primitive};
use super::ops::{broadcast_index, broadcast_shape};
use super::tensor::{numel_of, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// c += a · b with a: [m, k], b: [k, n].
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
}

/// c += a · bᵀ with a: [m, k], b: [n, k].
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// c += aᵀ · b with a: [k, m], b: [k, n].
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
}

impl Tensor {
    /// Batched matrix product `[.., M, K] · [.., K, N] -> [.., M, N]` with
    /// broadcasting over the leading (batch) dims.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 || self.dim(ra - 1) != other.dim(rb - 2) {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.dim(ra - 2), self.dim(ra - 1), other.dim(rb - 1));
        let batch_a = &self.shape()[..ra - 2];
        let batch_b = &other.shape()[..rb - 2];
        let batch = broadcast_shape("matmul", batch_a, batch_b).map_err(|_| {
            Error::shape(
                "matmul",
                format!("batch dims of {:?} and {:?} do not broadcast", self.shape(), other.shape()),
            )
        })?;
        let nb = numel_of(&batch);
        let ia = Arc::new(broadcast_index(batch_a, &batch));
        let ib = Arc::new(broadcast_index(batch_b, &batch));

        let (da, db) = (self.data(), other.data());
        let mut data = vec![0.0; nb * m * n];
        for bi in 0..nb {
            let a = &da[ia[bi] * m * k..(ia[bi] + 1) * m * k];
            let b = &db[ib[bi] * k * n..(ib[bi] + 1) * k * n];
            gemm_nn(a, b, &mut data[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        cost::record(Primitive::MatMul, cost::matmul_flops(nb as u64, m as u64, k as u64, n as u64));

        let mut shape = batch;
        shape.extend([m, n]);
        let (a_t, b_t) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let (da, db) = (a_t.data(), b_t.data());
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; da.len()];
                    for bi in 0..nb {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let b = &db[ib[bi] * k * n..(ib[bi] + 1) * k * n];
                        gemm_nt(gc, b, &mut ga[ia[bi] * m * k..(ia[bi] + 1) * m * k], m, n, k);
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; db.len()];
                    for bi in 0..nb {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let a = &da[ia[bi] * m * k..(ia[bi] + 1) * m * k];
                        gemm_tn(a, gc, &mut gb[ib[bi] * k * n..(ib[bi] + 1) * k * n], k, m, n);
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let len = self.dim(axis);
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[at(j)] /= sum;
                }
            }
        }
        cost::record(Primitive::Softmax, x.len() as u64 * cost::SOFTMAX_FLOPS_PER_ELEM);
        let saved = Arc::new(y.clone());
        Tensor::from_op(
            "softmax",
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let y = &saved;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn softmax_last(&self) -> Result<Tensor> {
        self.softmax(self.rank().saturating_sub(1))
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// (population) variance, then applies `gamma` and `beta` of shape `[D]`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?} needs gamma/beta of shape [{d}], got {:?} and {:?}",
                    self.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let rows = self.numel() / d;
        let (x, gm, bt) = (self.data(), gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gm[j] + bt[j];
            }
        }
        cost::record(Primitive::LayerNorm, x.len() as u64 * cost::LAYER_NORM_FLOPS_PER_ELEM);
        let gamma_t = gamma.clone();
        Tensor::from_op(
            "layer_norm",
            y,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, needs| {
                let gm = gamma_t.data();
                let mut gx = needs[0].then(|| vec![0.0; xhat.len()]);
                let mut gg = needs[1].then(|| vec![0.0; d]);
                let mut gb = needs[2].then(|| vec![0.0; d]);
                let mut gh = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    if let Some(gg) = gg.as_mut() {
                        gg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(a, (gi, hi))| *a += gi * hi);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb.iter_mut().zip(gr).for_each(|(a, gi)| *a += gi);
                    }
                    if let Some(gx) = gx.as_mut() {
                        for j in 0..d {
                            gh[j] = gr[j] * gm[j];
                        }
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                }
                vec![gx, gg, gb]
            }),
        )
    }
}
